//! Source mask, target mask and blend mask.
//!
//! The source mask selects the reference object and is fixed for the whole
//! run. The target mask and the blend mask are re-derived every step from
//! cross-attention maps of a chosen prompt token: maps are averaged over
//! the layers at the canonical (coarsest) resolution, min-max normalized and
//! thresholded.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};

use crate::attention::AttentionSite;
use crate::error::{Result, SpecRefError};
use crate::hooks::token_maps;
use crate::image::GrayImage;

/// Pixel values strictly above this are active.
pub const MASK_PIXEL_THRESHOLD: u8 = 127;

fn factors(from: (usize, usize), to: (usize, usize)) -> Option<(usize, usize)> {
    if to.0 == 0 || to.1 == 0 || !from.0.is_multiple_of(to.0) || !from.1.is_multiple_of(to.1) {
        None
    } else {
        Some((from.0 / to.0, from.1 / to.1))
    }
}

/// Max pooling to a coarser grid. On binary grids this is any-coverage
/// pooling: a coarse cell is active if any fine cell under it is.
pub fn pool_max(grid: &Array2<f32>, to: (usize, usize)) -> Result<Array2<f32>> {
    let (fy, fx) = factors(grid.dim(), to)
        .ok_or_else(|| SpecRefError::DimensionMismatch(format!("cannot pool {:?} to {to:?}", grid.dim())))?;
    Ok(Array2::from_shape_fn(to, |(i, j)| {
        let mut m = f32::NEG_INFINITY;
        for y in i * fy..(i + 1) * fy {
            for x in j * fx..(j + 1) * fx {
                m = m.max(grid[[y, x]]);
            }
        }
        m
    }))
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest(grid: &Array2<f32>, to: (usize, usize)) -> Result<Array2<f32>> {
    let (fy, fx) = factors(to, grid.dim()).ok_or_else(|| {
        SpecRefError::DimensionMismatch(format!("cannot upsample {:?} to {to:?}", grid.dim()))
    })?;
    Ok(Array2::from_shape_fn(to, |(y, x)| grid[[y / fy, x / fx]]))
}

/// Upsamples (nearest) or max-pools `grid` to `to`.
pub fn resample(grid: &Array2<f32>, to: (usize, usize)) -> Result<Array2<f32>> {
    let (h, w) = grid.dim();
    if (h, w) == to {
        Ok(grid.clone())
    } else if to.0 >= h && to.1 >= w {
        upsample_nearest(grid, to)
    } else {
        pool_max(grid, to)
    }
}

/// `1` where `v >= threshold`, else `0`.
pub fn binarize(grid: &Array2<f32>, threshold: f32) -> Array2<f32> {
    grid.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all ones.
pub fn normalize(grid: &Array2<f32>) -> Array2<f32> {
    let min = grid.fold(f32::INFINITY, |m, &v| m.min(v));
    let max = grid.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return Array2::ones(grid.dim());
    }
    let span = max - min;
    grid.mapv(|v| ((v - min) / span).clamp(0.0, 1.0))
}

fn flatten(grid: &Array2<f32>) -> Array1<f32> {
    grid.iter().copied().collect()
}

fn distinct_resolutions(sites: &[AttentionSite]) -> Vec<(usize, usize)> {
    let mut res: Vec<_> = sites.iter().map(|s| s.resolution).collect();
    res.sort_unstable();
    res.dedup();
    res
}

/// Static binary mask over the reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMask {
    /// Binary grid at latent resolution.
    pub full_res: Array2<f32>,
    /// Flattened (row-major) binary mask per attention resolution.
    pub per_site: BTreeMap<(usize, usize), Array1<f32>>,
}

impl SourceMask {
    /// Derives the per-site masks from a binary latent-resolution grid.
    pub fn from_latent_grid(grid: Array2<f32>, sites: &[AttentionSite]) -> Result<Self> {
        if grid.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(SpecRefError::NonBinaryMask);
        }
        if !grid.iter().any(|&v| v == 1.0) {
            return Err(SpecRefError::EmptyMask);
        }
        let mut per_site = BTreeMap::new();
        for res in distinct_resolutions(sites) {
            per_site.insert(res, flatten(&resample(&grid, res)?));
        }
        Ok(Self { full_res: grid, per_site })
    }

    pub fn for_site(&self, site: &AttentionSite) -> Result<&Array1<f32>> {
        self.per_site.get(&site.resolution).ok_or_else(|| {
            SpecRefError::DimensionMismatch(format!(
                "source mask has no entry for resolution {:?}",
                site.resolution
            ))
        })
    }
}

/// Reads a grayscale mask image, binarizes it and pools it to the latent
/// and every attention resolution by any-coverage pooling.
pub fn load_source_mask(
    mask_image: &GrayImage,
    latent_resolution: (usize, usize),
    sites: &[AttentionSite],
) -> Result<SourceMask> {
    let full = Array2::from_shape_fn((mask_image.height, mask_image.width), |(y, x)| {
        if mask_image.get(x, y) > MASK_PIXEL_THRESHOLD {
            1.0
        } else {
            0.0
        }
    });
    if !full.iter().any(|&v| v == 1.0) {
        return Err(SpecRefError::EmptyMask);
    }
    if factors(full.dim(), latent_resolution).is_none() {
        return Err(SpecRefError::DimensionMismatch(format!(
            "mask image {}x{} does not tile latent grid {}x{}",
            mask_image.width, mask_image.height, latent_resolution.1, latent_resolution.0
        )));
    }
    let latent = pool_max(&full, latent_resolution)?;
    SourceMask::from_latent_grid(latent, sites)
}

/// Per-step mask over the editing image's query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMask {
    /// Mask at the canonical resolution, values in `[0, 1]`.
    pub canonical: Array2<f32>,
    /// Flattened mask per attention resolution.
    pub per_site: BTreeMap<(usize, usize), Array1<f32>>,
    pub timestep: usize,
}

impl TargetMask {
    pub fn from_grid(grid: Array2<f32>, sites: &[AttentionSite], timestep: usize) -> Result<Self> {
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SpecRefError::InvalidRequest("target mask values must lie in [0, 1]".into()));
        }
        let mut per_site = BTreeMap::new();
        for res in distinct_resolutions(sites) {
            per_site.insert(res, flatten(&resample(&grid, res)?));
        }
        Ok(Self { canonical: grid, per_site, timestep })
    }

    pub fn for_site(&self, site: &AttentionSite) -> Result<&Array1<f32>> {
        self.per_site.get(&site.resolution).ok_or_else(|| {
            SpecRefError::DimensionMismatch(format!(
                "target mask has no entry for resolution {:?}",
                site.resolution
            ))
        })
    }
}

/// Cross-attention maps keyed by `(step, layer, token)`, each flattened at
/// its layer's resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrossAttnRecord {
    maps: BTreeMap<(usize, usize, usize), Array1<f32>>,
    resolutions: BTreeMap<usize, (usize, usize)>,
}

impl CrossAttnRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn insert(
        &mut self,
        t: usize,
        layer: usize,
        resolution: (usize, usize),
        token: usize,
        map: Array1<f32>,
    ) -> Result<()> {
        if map.len() != resolution.0 * resolution.1 {
            return Err(SpecRefError::shape(resolution.0 * resolution.1, map.len()));
        }
        if map.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(SpecRefError::NonFiniteInput("cross-attention map".into()));
        }
        match self.resolutions.get(&layer) {
            Some(&r) if r != resolution => {
                return Err(SpecRefError::shape(r, resolution));
            }
            _ => {
                self.resolutions.insert(layer, resolution);
            }
        }
        if self.maps.contains_key(&(t, layer, token)) {
            return Err(SpecRefError::DuplicateEntry { t, layer });
        }
        self.maps.insert((t, layer, token), map);
        Ok(())
    }

    /// Records the head-averaged map of every token of `probs` `[heads, N_q, seq]`.
    pub fn record_all(&mut self, t: usize, site: &AttentionSite, probs: &Array3<f32>) -> Result<()> {
        for (token, map) in token_maps(probs).into_iter().enumerate() {
            self.insert(t, site.layer_index, site.resolution, token, map)?;
        }
        Ok(())
    }

    pub fn get(&self, t: usize, layer: usize, token: usize) -> Option<&Array1<f32>> {
        self.maps.get(&(t, layer, token))
    }

    pub fn resolution(&self, layer: usize) -> Option<(usize, usize)> {
        self.resolutions.get(&layer).copied()
    }

    /// The coarsest resolution present.
    pub fn canonical_resolution(&self) -> Option<(usize, usize)> {
        self.resolutions.values().copied().min_by_key(|r| (r.0 * r.1, *r))
    }

    /// All entries in `(step, layer, token)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize), &Array1<f32>)> {
        self.maps.iter().map(|(k, v)| (*k, v))
    }

    /// Keeps only the entries recorded at step `t`.
    pub fn slice_step(&self, t: usize) -> CrossAttnRecord {
        let maps = self.maps.iter().filter(|((s, _, _), _)| *s == t).map(|(k, v)| (*k, v.clone())).collect();
        CrossAttnRecord { maps, resolutions: self.resolutions.clone() }
    }

    /// Merges `other` into `self`; overlapping keys are an error.
    pub fn extend(&mut self, other: CrossAttnRecord) -> Result<()> {
        for ((t, layer, token), map) in other.maps {
            let res = other.resolutions[&layer];
            self.insert(t, layer, res, token, map)?;
        }
        Ok(())
    }

    /// Mean over canonical-resolution layers of `token`'s maps at step `t`.
    pub fn aggregate(&self, token: usize, t: usize) -> Result<Array2<f32>> {
        let canonical = self.canonical_resolution().ok_or(SpecRefError::MissingRecords { t, token })?;
        let mut sum = Array2::<f32>::zeros(canonical);
        let mut count = 0usize;
        for (&layer, &res) in &self.resolutions {
            if res != canonical {
                continue;
            }
            if let Some(map) = self.maps.get(&(t, layer, token)) {
                let grid = map.view().into_shape_with_order(res).expect("length checked on insert");
                sum += &grid;
                count += 1;
            }
        }
        if count == 0 {
            return Err(SpecRefError::MissingRecords { t, token });
        }
        Ok(sum / count as f32)
    }
}

/// Target mask from `token`'s maps recorded at `record_step`.
///
/// The caller chooses the source: the previous editing step's maps for the
/// edit token, or the last inversion step's maps for the source token when
/// no editing step has run yet. With `soft`, the normalized map is used
/// without thresholding.
pub fn update_target_mask(
    records: &CrossAttnRecord,
    token: usize,
    record_step: usize,
    threshold: f32,
    soft: bool,
    sites: &[AttentionSite],
    timestep: usize,
) -> Result<TargetMask> {
    let normalized = normalize(&records.aggregate(token, record_step)?);
    let grid = if soft { normalized } else { binarize(&normalized, threshold) };
    TargetMask::from_grid(grid, sites, timestep)
}

/// Union of the normalized maps of `tokens` at step `t`, thresholded and
/// upsampled to `latent_resolution`.
pub fn compute_blend_mask(
    records: &CrossAttnRecord,
    tokens: &[usize],
    t: usize,
    threshold: f32,
    latent_resolution: (usize, usize),
) -> Result<Array2<f32>> {
    let mut union: Option<Array2<f32>> = None;
    for &token in tokens {
        let m = normalize(&records.aggregate(token, t)?);
        union = Some(match union {
            None => m,
            Some(mut u) => {
                u.zip_mut_with(&m, |a, &b| *a = a.max(b));
                u
            }
        });
    }
    let union = union.ok_or_else(|| SpecRefError::InvalidRequest("no blend tokens".into()))?;
    upsample_nearest(&binarize(&union, threshold), latent_resolution)
}

/// Elementwise maximum of two binary grids of the same shape.
pub fn union_masks(a: &Array2<f32>, b: &Array2<f32>) -> Result<Array2<f32>> {
    if a.dim() != b.dim() {
        return Err(SpecRefError::shape(a.dim(), b.dim()));
    }
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = x.max(y));
    Ok(out)
}
