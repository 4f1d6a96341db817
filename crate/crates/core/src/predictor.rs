//! The noise-predictor contract shared by the toy backend and any adapter
//! for a real latent-diffusion network.

use ndarray::{Array2, Array3};

use crate::attention::AttentionSite;
use crate::error::Result;
use crate::hooks::AttentionHooks;
use crate::schedule::LatentState;

/// Prompt conditioning: token ids and one embedding row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<u64>,
    pub vectors: Array2<f32>,
}

impl TextEmbedding {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

/// A noise-prediction network `eps_theta(z, c, t)` whose self-attention
/// computations are delegated to [`AttentionHooks`].
///
/// Implementations must run, per block, self-attention, then
/// cross-attention onto the prompt, then a pointwise feedforward, and must
/// call the hooks once per self-attention site per evaluation.
pub trait NoisePredictor: Sync {
    /// Self-attention sites in execution order; `layer_index` runs `1..=L`.
    fn sites(&self) -> &[AttentionSite];

    /// `(channels, height, width)` of the latents this predictor accepts.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn predict_noise(
        &self,
        z: &LatentState,
        c: &TextEmbedding,
        t: usize,
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Array3<f32>>;
}
