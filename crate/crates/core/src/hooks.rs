//! Attention hooks: the callbacks a [`NoisePredictor`](crate::NoisePredictor)
//! uses at every self-attention and cross-attention site.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};

use crate::attention::{plain_attention, AttentionSite, ReferenceFeatureCache};
use crate::error::Result;
use crate::masks::CrossAttnRecord;

/// Callbacks into the attention computations of one predictor evaluation.
///
/// The defaults reproduce the unmodified network.
pub trait AttentionHooks {
    /// Announces the step index subsequent calls belong to.
    fn begin_step(&mut self, _step: usize) {}

    /// Computes the self-attention output (heads concatenated, before the
    /// output projection) from the block's projections.
    fn self_attention(
        &mut self,
        site: &AttentionSite,
        q: &Array2<f32>,
        k: &Array2<f32>,
        v: &Array2<f32>,
    ) -> Result<Array2<f32>> {
        plain_attention(q, k, v, site.head_count)
    }

    /// Observes (and may overwrite) the cross-attention probabilities
    /// `[heads, N_q, seq_len]` before they are applied to the prompt values.
    fn cross_attention(&mut self, _site: &AttentionSite, _probs: &mut Array3<f32>) -> Result<()> {
        Ok(())
    }
}

/// Hooks that leave every attention untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainHooks;

impl AttentionHooks for PlainHooks {}

/// Head-averaged per-token maps `[N_q]` from a probability tensor.
pub(crate) fn token_maps(probs: &Array3<f32>) -> Vec<ndarray::Array1<f32>> {
    let mean = probs.mean_axis(Axis(0)).expect("at least one head");
    mean.columns().into_iter().map(|c| c.to_owned()).collect()
}

/// Plain attention plus optional recording of reference Key/Values and
/// cross-attention maps, keyed by the step set with `begin_step`.
#[derive(Debug, Default)]
pub struct Recorder {
    step: usize,
    kv: Option<ReferenceFeatureCache>,
    maps: Option<CrossAttnRecord>,
    probs: Option<BTreeMap<(usize, usize), Array3<f32>>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_kv(mut self) -> Self {
        self.kv = Some(ReferenceFeatureCache::new());
        self
    }

    pub fn with_maps(mut self) -> Self {
        self.maps = Some(CrossAttnRecord::new());
        self
    }

    /// Also keep the full per-head cross-attention probabilities, used for
    /// prompt-to-prompt style map injection.
    pub fn with_probs(mut self) -> Self {
        self.probs = Some(BTreeMap::new());
        self
    }

    pub fn take_kv(&mut self) -> Option<ReferenceFeatureCache> {
        self.kv.take()
    }

    pub fn take_maps(&mut self) -> Option<CrossAttnRecord> {
        self.maps.take()
    }

    pub fn take_probs(&mut self) -> Option<BTreeMap<(usize, usize), Array3<f32>>> {
        self.probs.take()
    }
}

impl AttentionHooks for Recorder {
    fn begin_step(&mut self, step: usize) {
        self.step = step;
    }

    fn self_attention(
        &mut self,
        site: &AttentionSite,
        q: &Array2<f32>,
        k: &Array2<f32>,
        v: &Array2<f32>,
    ) -> Result<Array2<f32>> {
        if let Some(cache) = self.kv.as_mut() {
            cache.record_kv(self.step, site, k.clone(), v.clone())?;
        }
        plain_attention(q, k, v, site.head_count)
    }

    fn cross_attention(&mut self, site: &AttentionSite, probs: &mut Array3<f32>) -> Result<()> {
        if let Some(maps) = self.maps.as_mut() {
            maps.record_all(self.step, site, probs)?;
        }
        if let Some(store) = self.probs.as_mut() {
            store.insert((self.step, site.layer_index), probs.clone());
        }
        Ok(())
    }
}
