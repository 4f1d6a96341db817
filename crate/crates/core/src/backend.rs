//! Deterministic toy denoiser, text encoder and image codec.
//!
//! The denoiser is a stack of transformer blocks (self-attention,
//! cross-attention onto the prompt, pointwise feedforward) with fixed random
//! weights drawn from the configured seed. Block `l` reads the running
//! latent `z + eps_so_far` average-pooled to its resolution and adds its
//! nearest-upsampled output to the noise estimate.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{apply_weights, attention_weights, AttentionSite};
use crate::error::{Result, SpecRefError};
use crate::hooks::AttentionHooks;
use crate::image::RgbImage;
use crate::predictor::{NoisePredictor, TextEmbedding};
use crate::schedule::LatentState;

/// Token id used to pad prompts to `seq_len`.
pub const PAD_TOKEN: u64 = 0;

const TEXT_SALT: u64 = 0x7465_7874_5f65_6d62;
const CODEC_SALT: u64 = 0x636f_6465_635f_6d69;
const TIME_SCALE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendConfig {
    pub channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Grid of each block, in execution order. Each must divide the latent grid.
    pub block_resolutions: Vec<(usize, usize)>,
    pub heads: usize,
    pub head_dim: usize,
    pub text_dim: usize,
    pub seq_len: usize,
    /// Image pixels per latent cell along each axis.
    pub patch: usize,
    pub seed: u64,
}

impl BackendConfig {
    /// 4x16x16 latents, four blocks at 16, 8, 8, 16, two heads of width 8.
    pub fn toy(seed: u64) -> Self {
        Self {
            channels: 4,
            latent_height: 16,
            latent_width: 16,
            block_resolutions: vec![(16, 16), (8, 8), (8, 8), (16, 16)],
            heads: 2,
            head_dim: 8,
            text_dim: 32,
            seq_len: 8,
            patch: 4,
            seed,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.latent_height, self.latent_width)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SpecRefError::InvalidScheduleConfig(msg));
        if self.channels < 3 {
            return bad("the image codec needs at least 3 latent channels".into());
        }
        if self.heads == 0 || self.head_dim == 0 || self.text_dim == 0 || self.seq_len == 0 {
            return bad("heads, head_dim, text_dim and seq_len must be positive".into());
        }
        if self.patch == 0 || self.latent_height == 0 || self.latent_width == 0 {
            return bad("latent grid and patch must be non-empty".into());
        }
        if self.block_resolutions.is_empty() {
            return bad("at least one block is required".into());
        }
        for &(h, w) in &self.block_resolutions {
            if h == 0
                || w == 0
                || !self.latent_height.is_multiple_of(h)
                || !self.latent_width.is_multiple_of(w)
            {
                return bad(format!(
                    "block grid {h}x{w} does not divide latent grid {}x{}",
                    self.latent_height, self.latent_width
                ));
            }
        }
        Ok(())
    }
}

/// Fixed weights of one transformer block. Matrices act on row vectors.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub w_in: Array2<f32>,
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub w_o: Array2<f32>,
    pub w_cross_q: Array2<f32>,
    pub w_cross_k: Array2<f32>,
    pub w_cross_v: Array2<f32>,
    pub w_cross_o: Array2<f32>,
    pub w_ff1: Array2<f32>,
    pub w_ff2: Array2<f32>,
    pub w_out: Array2<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f32) -> Array2<f32> {
    let scale = gain / (rows as f32).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f32, _>(StandardNormal) * scale)
}

impl BlockWeights {
    fn draw(rng: &mut ChaCha8Rng, cfg: &BackendConfig) -> Self {
        let c = cfg.channels;
        let d = cfg.model_dim();
        let f = 2 * d;
        Self {
            w_in: gaussian(rng, c, d, 1.0),
            w_q: gaussian(rng, d, d, 1.0),
            w_k: gaussian(rng, d, d, 1.0),
            w_v: gaussian(rng, d, d, 1.0),
            w_o: gaussian(rng, d, d, 0.5),
            w_cross_q: gaussian(rng, d, d, 1.0),
            w_cross_k: gaussian(rng, cfg.text_dim, d, 1.0),
            w_cross_v: gaussian(rng, cfg.text_dim, d, 1.0),
            w_cross_o: gaussian(rng, d, d, 0.5),
            w_ff1: gaussian(rng, d, f, 1.0),
            w_ff2: gaussian(rng, f, d, 0.5),
            w_out: gaussian(rng, d, c, 0.5),
        }
    }
}

/// Sinusoidal embedding of the (integer) step `t`, length `dim`.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32 * TIME_SCALE;
        out[i + half] = arg.cos() as f32 * TIME_SCALE;
    }
    out
}

/// Average pooling of a `[C, H, W]` latent to `res`, as `[tokens, C]`
/// with tokens in row-major order.
pub fn pool_tokens(z: &Array3<f32>, res: (usize, usize)) -> Array2<f32> {
    let (c, h, w) = z.dim();
    let (fy, fx) = (h / res.0, w / res.1);
    let norm = (fy * fx) as f32;
    Array2::from_shape_fn((res.0 * res.1, c), |(n, ch)| {
        let (i, j) = (n / res.1, n % res.1);
        let mut sum = 0.0f32;
        for y in i * fy..(i + 1) * fy {
            for x in j * fx..(j + 1) * fx {
                sum += z[[ch, y, x]];
            }
        }
        sum / norm
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Stable token id of one word; never equal to [`PAD_TOKEN`].
pub fn token_id(word: &str) -> u64 {
    match fnv1a(word.as_bytes()) {
        PAD_TOKEN => 1,
        h => h,
    }
}

/// Orthonormal columns `[rows, cols]` (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        loop {
            let mut v: Array1<f64> = (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for k in 0..j {
                let prev = m.column(k);
                let proj = v.dot(&prev);
                v.scaled_add(-proj, &prev);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                m.column_mut(j).assign(&(v / norm));
                break;
            }
        }
    }
    m
}

/// The toy denoiser together with its stub text encoder and image codec.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: BackendConfig,
    sites: Vec<AttentionSite>,
    blocks: Vec<BlockWeights>,
    mixing: Array2<f64>,
}

impl ToyBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = config.block_resolutions.iter().map(|_| BlockWeights::draw(&mut rng, &config)).collect();
        let sites = config
            .block_resolutions
            .iter()
            .enumerate()
            .map(|(i, &resolution)| AttentionSite {
                layer_index: i + 1,
                resolution,
                head_count: config.heads,
                head_dim: config.head_dim,
            })
            .collect();
        let mut codec_rng = ChaCha8Rng::seed_from_u64(config.seed ^ CODEC_SALT);
        let mixing = orthonormal_columns(&mut codec_rng, config.channels, 3);
        Ok(Self { config, sites, blocks, mixing })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Weights of the block behind layer `layer_index` (1-based).
    pub fn block(&self, layer_index: usize) -> &BlockWeights {
        &self.blocks[layer_index - 1]
    }

    /// The `[channels, 3]` codec mixing matrix (orthonormal columns).
    pub fn mixing(&self) -> &Array2<f64> {
        &self.mixing
    }

    pub fn embed_text(&self, prompt: &str) -> TextEmbedding {
        let mut tokens: Vec<u64> =
            prompt.split_whitespace().take(self.config.seq_len).map(token_id).collect();
        tokens.resize(self.config.seq_len, PAD_TOKEN);
        let mut vectors = Array2::zeros((self.config.seq_len, self.config.text_dim));
        for (row, &tok) in vectors.rows_mut().into_iter().zip(&tokens) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ TEXT_SALT ^ tok);
            let mut row = row;
            row.map_inplace(|v| *v = rng.sample::<f32, _>(StandardNormal));
        }
        TextEmbedding { tokens, vectors }
    }

    /// Patch-mean downsampling to the latent grid, pixel values mapped to
    /// `[-1, 1]`, then mixed from RGB into the latent channels.
    pub fn encode_image(&self, image: &RgbImage) -> Result<LatentState> {
        let (c, h, w) = self.config.latent_shape();
        let p = self.config.patch;
        if image.width != w * p || image.height != h * p {
            return Err(SpecRefError::DimensionMismatch(format!(
                "image must be {}x{}, got {}x{}",
                w * p,
                h * p,
                image.width,
                image.height
            )));
        }
        let norm = (p * p) as f64;
        let mut data = Array3::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                let mut rgb = [0.0f64; 3];
                for y in i * p..(i + 1) * p {
                    for x in j * p..(j + 1) * p {
                        let px = image.get(x, y);
                        for k in 0..3 {
                            rgb[k] += px[k] as f64;
                        }
                    }
                }
                let rgb = rgb.map(|s| s / norm / 127.5 - 1.0);
                for ch in 0..c {
                    let v: f64 = rgb.iter().enumerate().map(|(k, x)| self.mixing[[ch, k]] * x).sum();
                    data[[ch, i, j]] = v as f32;
                }
            }
        }
        Ok(LatentState::new(data, 0))
    }

    /// Transposed channel mixing, nearest-neighbour upsampling and mapping
    /// of `[-1, 1]` to `[0, 255]` with clamping.
    pub fn decode_latent(&self, latent: &LatentState) -> Result<RgbImage> {
        let (c, h, w) = latent.shape();
        if c != self.config.channels {
            return Err(SpecRefError::shape(self.config.channels, c));
        }
        let p = self.config.patch;
        let mut image = RgbImage::filled(w * p, h * p, [0, 0, 0]);
        for i in 0..h {
            for j in 0..w {
                let mut px = [0u8; 3];
                for (k, out) in px.iter_mut().enumerate() {
                    let mut v = 0.0f64;
                    for ch in 0..c {
                        v += self.mixing[[ch, k]] * latent.data[[ch, i, j]] as f64;
                    }
                    *out = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                }
                for y in i * p..(i + 1) * p {
                    for x in j * p..(j + 1) * p {
                        image.put(x, y, px);
                    }
                }
            }
        }
        Ok(image)
    }

    fn block_forward(
        &self,
        site: &AttentionSite,
        weights: &BlockWeights,
        stream: &Array3<f32>,
        temb: &Array1<f32>,
        c: &TextEmbedding,
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Array2<f32>> {
        let heads = site.head_count;
        let x = pool_tokens(stream, site.resolution);
        let mut h = x.dot(&weights.w_in) + temb;

        let q = h.dot(&weights.w_q);
        let k = h.dot(&weights.w_k);
        let v = h.dot(&weights.w_v);
        let attn = hooks.self_attention(site, &q, &k, &v)?;
        if attn.dim() != h.dim() {
            return Err(SpecRefError::shape(h.dim(), attn.dim()));
        }
        h += &attn.dot(&weights.w_o);

        let qc = h.dot(&weights.w_cross_q);
        let kc = c.vectors.dot(&weights.w_cross_k);
        let vc = c.vectors.dot(&weights.w_cross_v);
        let mut probs = attention_weights(&qc, &kc, heads)?;
        hooks.cross_attention(site, &mut probs)?;
        h += &apply_weights(&probs, &vc)?.dot(&weights.w_cross_o);

        let hidden = h.dot(&weights.w_ff1).mapv(f32::tanh);
        h += &hidden.dot(&weights.w_ff2);

        Ok(h.dot(&weights.w_out))
    }
}

impl NoisePredictor for ToyBackend {
    fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.config.latent_shape()
    }

    fn predict_noise(
        &self,
        z: &LatentState,
        c: &TextEmbedding,
        t: usize,
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Array3<f32>> {
        if z.shape() != self.config.latent_shape() {
            return Err(SpecRefError::shape(self.config.latent_shape(), z.shape()));
        }
        if c.vectors.ncols() != self.config.text_dim {
            return Err(SpecRefError::shape(self.config.text_dim, c.vectors.ncols()));
        }
        if !z.is_finite() {
            return Err(SpecRefError::NonFiniteInput("latent".into()));
        }
        let temb = timestep_embedding(t, self.config.model_dim());
        let (_, height, width) = z.shape();
        let mut eps = Array3::<f32>::zeros(z.shape());
        for (site, weights) in self.sites.iter().zip(&self.blocks) {
            let stream = &z.data + &eps;
            let out = self.block_forward(site, weights, &stream, &temb, c, hooks)?;
            let (fy, fx) = (height / site.resolution.0, width / site.resolution.1);
            for (ch, mut plane) in eps.axis_iter_mut(Axis(0)).enumerate() {
                for ((y, x), v) in plane.indexed_iter_mut() {
                    *v += out[[(y / fy) * site.resolution.1 + x / fx, ch]];
                }
            }
        }
        Ok(eps)
    }
}

/// Runs the wrapped predictor (so hooks still see every attention call) but
/// reports a zero noise estimate.
#[derive(Debug, Clone)]
pub struct ZeroNoise<P>(pub P);

impl<P: NoisePredictor> NoisePredictor for ZeroNoise<P> {
    fn sites(&self) -> &[AttentionSite] {
        self.0.sites()
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.0.latent_shape()
    }

    fn predict_noise(
        &self,
        z: &LatentState,
        c: &TextEmbedding,
        t: usize,
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Array3<f32>> {
        let eps = self.0.predict_noise(z, c, t, hooks)?;
        Ok(Array3::zeros(eps.dim()))
    }
}
