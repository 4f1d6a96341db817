//! Attention kernels and the reference Key/Value cache.
//!
//! All tensors are `[tokens, heads * head_dim]` with heads laid out as
//! contiguous column blocks. Logits are scaled by `1 / sqrt(head_dim)`.
//!
//! Masked reference attention restricts each query to the reference keys
//! selected by a binary source mask; masked keys get an additive sentinel
//! logit that underflows to an exact zero weight. Specific-reference
//! attention blends that output with ordinary self-attention per query,
//! using the target mask as the blend weight.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Result, SpecRefError};

/// Additive logit for masked key positions. `exp(MASK_SENTINEL - max)` is
/// exactly zero in `f32`, and the value stays finite so no `inf - inf`.
pub const MASK_SENTINEL: f32 = -1.0e30;

/// One self-attention site of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionSite {
    /// 1-based layer index, unique within a backend.
    pub layer_index: usize,
    pub resolution: (usize, usize),
    pub head_count: usize,
    pub head_dim: usize,
}

impl AttentionSite {
    pub fn tokens(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn model_dim(&self) -> usize {
        self.head_count * self.head_dim
    }
}

/// Query/Key/Value projections of the editing path at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
}

fn head_dim_of(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) || width == 0 {
        return Err(SpecRefError::shape(format!("width divisible by {heads} heads"), width));
    }
    Ok(width / heads)
}

fn check_finite(name: &str, t: &Array2<f32>) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SpecRefError::NonFiniteInput(name.into()))
    }
}

/// Converts a binary key mask to additive logits: 1 becomes 0, 0 becomes
/// [`MASK_SENTINEL`].
pub fn to_neg_inf_mask(mask: ArrayView1<f32>) -> Result<Array1<f32>> {
    to_neg_inf_mask_with(mask, MASK_SENTINEL)
}

pub(crate) fn to_neg_inf_mask_with(mask: ArrayView1<f32>, sentinel: f32) -> Result<Array1<f32>> {
    mask.iter()
        .map(|&m| {
            if m == 1.0 {
                Ok(0.0)
            } else if m == 0.0 {
                Ok(sentinel)
            } else {
                Err(SpecRefError::NonBinaryMask)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(logits: &mut Array2<f32>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn head_logits(q: ArrayView2<f32>, k: ArrayView2<f32>, head_dim: usize) -> Array2<f32> {
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|v| v * scale);
    logits
}

fn split(t: &Array2<f32>, h: usize, d: usize) -> ArrayView2<'_, f32> {
    t.slice(s![.., h * d..(h + 1) * d])
}

fn check_qk(q: &Array2<f32>, k: &Array2<f32>, heads: usize) -> Result<usize> {
    if q.ncols() != k.ncols() {
        return Err(SpecRefError::shape(q.ncols(), k.ncols()));
    }
    head_dim_of(q.ncols(), heads)
}

/// Standard attention weights `softmax(Q K^T / sqrt(d))`, `[heads, N_q, N_kv]`.
pub fn attention_weights(q: &Array2<f32>, k: &Array2<f32>, heads: usize) -> Result<Array3<f32>> {
    let d = check_qk(q, k, heads)?;
    let mut out = Array3::zeros((heads, q.nrows(), k.nrows()));
    for h in 0..heads {
        let mut logits = head_logits(split(q, h, d), split(k, h, d), d);
        softmax_rows(&mut logits);
        out.index_axis_mut(Axis(0), h).assign(&logits);
    }
    Ok(out)
}

/// Masked attention weights against reference keys, `[heads, N_q, N_kv]`.
///
/// Every row is a probability distribution with exactly zero weight on the
/// keys where `source_mask` is 0.
pub fn mask_attn(
    q: &Array2<f32>,
    k_ref: &Array2<f32>,
    source_mask: ArrayView1<f32>,
    heads: usize,
) -> Result<Array3<f32>> {
    mask_attn_with_sentinel(q, k_ref, source_mask, heads, MASK_SENTINEL)
}

/// [`mask_attn`] with a caller-chosen sentinel. Only the self-test uses a
/// value other than [`MASK_SENTINEL`], to check that a broken sentinel is
/// caught.
pub fn mask_attn_with_sentinel(
    q: &Array2<f32>,
    k_ref: &Array2<f32>,
    source_mask: ArrayView1<f32>,
    heads: usize,
    sentinel: f32,
) -> Result<Array3<f32>> {
    let d = check_qk(q, k_ref, heads)?;
    if source_mask.len() != k_ref.nrows() {
        return Err(SpecRefError::shape(k_ref.nrows(), source_mask.len()));
    }
    let additive = to_neg_inf_mask_with(source_mask, sentinel)?;
    if !source_mask.iter().any(|&m| m == 1.0) {
        return Err(SpecRefError::EmptySourceMask);
    }
    let mut out = Array3::zeros((heads, q.nrows(), k_ref.nrows()));
    for h in 0..heads {
        let mut logits = head_logits(split(q, h, d), split(k_ref, h, d), d);
        logits += &additive;
        softmax_rows(&mut logits);
        out.index_axis_mut(Axis(0), h).assign(&logits);
    }
    Ok(out)
}

/// Applies per-head weights `[heads, N_q, N_kv]` to `v` and concatenates heads.
pub fn apply_weights(weights: &Array3<f32>, v: &Array2<f32>) -> Result<Array2<f32>> {
    let (heads, n_q, n_kv) = weights.dim();
    if v.nrows() != n_kv {
        return Err(SpecRefError::shape(n_kv, v.nrows()));
    }
    let d = head_dim_of(v.ncols(), heads)?;
    let mut out = Array2::zeros((n_q, v.ncols()));
    for h in 0..heads {
        let o = weights.index_axis(Axis(0), h).dot(&split(v, h, d));
        out.slice_mut(s![.., h * d..(h + 1) * d]).assign(&o);
    }
    Ok(out)
}

/// Plain multi-head attention output `softmax(Q K^T / sqrt(d)) V`.
pub fn plain_attention(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    heads: usize,
) -> Result<Array2<f32>> {
    if k.nrows() != v.nrows() {
        return Err(SpecRefError::shape(k.nrows(), v.nrows()));
    }
    let w = attention_weights(q, k, heads)?;
    apply_weights(&w, v)
}

/// Specific-reference attention:
/// `M_t * (MaskAttn(Q, K_ref, M_s) V_ref) + (1 - M_t) * (Attn(Q, K) V)`,
/// with `M_t` a per-query weight broadcast over channels.
///
/// Rows with `M_t == 0` (resp. `1`) copy the self (resp. reference) branch
/// verbatim so the degenerate masks reproduce each branch bit for bit.
pub fn sr_attn(
    edit: &AttentionTensors,
    k_ref: &Array2<f32>,
    v_ref: &Array2<f32>,
    source_mask: ArrayView1<f32>,
    target_mask: ArrayView1<f32>,
    heads: usize,
) -> Result<Array2<f32>> {
    check_finite("query", &edit.q)?;
    check_finite("reference keys", k_ref)?;
    check_finite("reference values", v_ref)?;
    if k_ref.nrows() != v_ref.nrows() || v_ref.ncols() != edit.v.ncols() {
        return Err(SpecRefError::shape(k_ref.dim(), v_ref.dim()));
    }
    if target_mask.len() != edit.q.nrows() {
        return Err(SpecRefError::shape(edit.q.nrows(), target_mask.len()));
    }
    if target_mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(SpecRefError::InvalidRequest("target mask values must lie in [0, 1]".into()));
    }
    let masked = mask_attn(&edit.q, k_ref, source_mask, heads)?;
    let reference_out = apply_weights(&masked, v_ref)?;
    let self_out = plain_attention(&edit.q, &edit.k, &edit.v, heads)?;

    let mut out = self_out;
    for ((mut row, r), &m) in out.rows_mut().into_iter().zip(reference_out.rows()).zip(target_mask.iter()) {
        if m == 0.0 {
            continue;
        }
        if m == 1.0 {
            row.assign(&r);
            continue;
        }
        row.zip_mut_with(&r, |o, &rv| *o = m * rv + (1.0 - m) * *o);
    }
    Ok(out)
}

/// Reference features: Key/Value projections of every self-attention layer
/// at every inversion step of the reference image, keyed by `(step, layer)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceFeatureCache {
    entries: BTreeMap<(usize, usize), (Array2<f32>, Array2<f32>)>,
}

impl ReferenceFeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores `(k, v)` for `(t, layer)`; refuses to overwrite.
    pub fn record_kv(
        &mut self,
        t: usize,
        site: &AttentionSite,
        k: Array2<f32>,
        v: Array2<f32>,
    ) -> Result<()> {
        self.insert(t, site.layer_index, k, v)
    }

    pub(crate) fn insert(&mut self, t: usize, layer: usize, k: Array2<f32>, v: Array2<f32>) -> Result<()> {
        if k.nrows() != v.nrows() {
            return Err(SpecRefError::shape(k.nrows(), v.nrows()));
        }
        match self.entries.entry((t, layer)) {
            std::collections::btree_map::Entry::Occupied(_) => Err(SpecRefError::DuplicateEntry { t, layer }),
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert((k, v));
                Ok(())
            }
        }
    }

    pub fn lookup_kv(&self, t: usize, layer: usize) -> Result<(&Array2<f32>, &Array2<f32>)> {
        self.entries.get(&(t, layer)).map(|(k, v)| (k, v)).ok_or(SpecRefError::MissingEntry { t, layer })
    }

    /// Entries in `(step, layer)` order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Array2<f32>, &Array2<f32>)> {
        self.entries.iter().map(|(&(t, l), (k, v))| (t, l, k, v))
    }

    /// Distinct recorded steps, ascending.
    pub fn steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.entries.keys().map(|&(t, _)| t).collect();
        steps.dedup();
        steps
    }

    /// Distinct recorded layers, ascending.
    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.entries.keys().map(|&(_, l)| l).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// Checks that every recorded step holds every layer of `sites`.
    pub fn validate_complete(&self, sites: &[AttentionSite]) -> Result<()> {
        for t in self.steps() {
            for site in sites {
                let (k, _) = self.lookup_kv(t, site.layer_index)?;
                if k.dim() != (site.tokens(), site.model_dim()) {
                    return Err(SpecRefError::shape((site.tokens(), site.model_dim()), k.dim()));
                }
            }
        }
        if self.layers().len() != sites.len() {
            return Err(SpecRefError::Consistency(format!(
                "cache holds {} layers, backend has {}",
                self.layers().len(),
                sites.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    /// Triple-loop reference used as the oracle for the vectorized kernels.
    fn brute_force_weights(q: &Array2<f32>, k: &Array2<f32>, mask: Option<&[f32]>) -> Vec<Vec<f64>> {
        let d = q.ncols();
        let mut rows = Vec::new();
        for i in 0..q.nrows() {
            let mut logits = Vec::new();
            for j in 0..k.nrows() {
                let mut dot = 0.0f64;
                for c in 0..d {
                    dot += q[[i, c]] as f64 * k[[j, c]] as f64;
                }
                logits.push(dot / (d as f64).sqrt());
            }
            let active: Vec<bool> = (0..k.nrows()).map(|j| mask.is_none_or(|m| m[j] == 1.0)).collect();
            let max = logits
                .iter()
                .zip(&active)
                .filter(|(_, &a)| a)
                .map(|(l, _)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> =
                logits.iter().zip(&active).map(|(l, &a)| if a { (l - max).exp() } else { 0.0 }).collect();
            let sum: f64 = exps.iter().sum();
            rows.push(exps.iter().map(|e| e / sum).collect());
        }
        rows
    }

    #[test]
    fn neg_inf_mask_values() {
        assert_eq!(to_neg_inf_mask(arr1(&[1.0, 1.0, 1.0]).view()).unwrap(), arr1(&[0.0, 0.0, 0.0]));
        assert_eq!(to_neg_inf_mask(arr1(&[1.0, 0.0]).view()).unwrap(), arr1(&[0.0, MASK_SENTINEL]));
        assert!(matches!(to_neg_inf_mask(arr1(&[1.0, 0.5]).view()), Err(SpecRefError::NonBinaryMask)));
    }

    #[test]
    fn sentinel_underflows_to_zero() {
        assert_eq!((MASK_SENTINEL - 50.0f32).exp(), 0.0);
        assert!((MASK_SENTINEL - 1.0e6f32).is_finite());
    }

    #[test]
    fn all_ones_mask_is_standard_attention() {
        let q = arr2(&[[0.3f32, -1.0], [2.0, 0.5]]);
        let k = arr2(&[[1.0f32, 0.0], [0.5, 0.5], [-1.0, 2.0]]);
        let masked = mask_attn(&q, &k, arr1(&[1.0, 1.0, 1.0]).view(), 1).unwrap();
        let plain = attention_weights(&q, &k, 1).unwrap();
        for (a, b) in masked.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_active_key_is_one_hot() {
        let q = arr2(&[[0.3f32, -1.0], [2.0, 0.5], [9.0, -9.0]]);
        let k = arr2(&[[1.0f32, 0.0], [0.5, 0.5], [-1.0, 2.0]]);
        let w = mask_attn(&q, &k, arr1(&[0.0, 1.0, 0.0]).view(), 1).unwrap();
        for row in w.index_axis(Axis(0), 0).rows() {
            assert_eq!(row.to_vec(), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn small_integer_case_matches_brute_force() {
        let q = arr2(&[[1.0f32, 2.0], [0.0, -1.0]]);
        let k = arr2(&[[1.0f32, 0.0], [2.0, 1.0], [-1.0, 3.0]]);
        let mask = [1.0f32, 1.0, 0.0];
        let w = mask_attn(&q, &k, arr1(&mask).view(), 1).unwrap();
        let expected = brute_force_weights(&q, &k, Some(&mask));
        for i in 0..2 {
            for j in 0..3 {
                assert!((w[[0, i, j]] as f64 - expected[i][j]).abs() < 1e-6);
            }
            assert_eq!(w[[0, i, 2]], 0.0);
        }
        // hand check of row 0: logits 1/sqrt2 and 4/sqrt2 over two active keys
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let b = (4.0f64 / 2f64.sqrt()).exp();
        assert!((w[[0, 0, 1]] as f64 - b / (a + b)).abs() < 1e-6);
    }

    #[test]
    fn empty_source_mask_rejected() {
        let q = arr2(&[[1.0f32, 2.0]]);
        let k = arr2(&[[1.0f32, 0.0], [2.0, 1.0]]);
        assert!(matches!(mask_attn(&q, &k, arr1(&[0.0, 0.0]).view(), 1), Err(SpecRefError::EmptySourceMask)));
        assert!(matches!(mask_attn(&q, &k, arr1(&[1.0]).view(), 1), Err(SpecRefError::ShapeMismatch { .. })));
    }

    #[test]
    fn multi_head_uses_per_head_scale() {
        let q = arr2(&[[1.0f32, 0.0, 0.0, 2.0]]);
        let k = arr2(&[[1.0f32, 1.0, 1.0, 1.0], [0.0, 1.0, 0.0, -1.0]]);
        let w = attention_weights(&q, &k, 2).unwrap();
        for h in 0..2 {
            let qh = q.slice(s![.., h * 2..h * 2 + 2]).to_owned();
            let kh = k.slice(s![.., h * 2..h * 2 + 2]).to_owned();
            let expected = brute_force_weights(&qh, &kh, None);
            for j in 0..2 {
                assert!((w[[h, 0, j]] as f64 - expected[0][j]).abs() < 1e-6);
            }
        }
    }

    fn sample_tensors() -> (AttentionTensors, Array2<f32>, Array2<f32>) {
        let edit = AttentionTensors {
            q: arr2(&[[0.5f32, -0.2, 1.0, 0.1], [1.5, 0.3, -0.7, 0.0], [0.0, 0.9, 0.4, -1.2]]),
            k: arr2(&[[0.1f32, 0.2, 0.3, 0.4], [-0.5, 1.0, 0.0, 0.2], [0.7, -0.3, 0.6, 0.9]]),
            v: arr2(&[[1.0f32, 2.0, 3.0, 4.0], [-1.0, 0.0, 1.0, 0.5], [0.2, 0.2, -0.4, 1.1]]),
        };
        let k_ref = arr2(&[[0.3f32, 0.1, -0.2, 0.8], [1.1, -0.4, 0.5, 0.0], [0.0, 0.6, 0.2, 0.3]]);
        let v_ref = arr2(&[[5.0f32, -1.0, 0.0, 2.0], [0.5, 0.5, 0.5, 0.5], [-2.0, 1.0, 3.0, 0.0]]);
        (edit, k_ref, v_ref)
    }

    #[test]
    fn sr_attn_zero_target_is_self_attention() {
        let (edit, k_ref, v_ref) = sample_tensors();
        let out =
            sr_attn(&edit, &k_ref, &v_ref, arr1(&[1.0, 0.0, 1.0]).view(), arr1(&[0.0, 0.0, 0.0]).view(), 2)
                .unwrap();
        let plain = plain_attention(&edit.q, &edit.k, &edit.v, 2).unwrap();
        assert_eq!(out, plain);
    }

    #[test]
    fn sr_attn_full_target_is_cross_attention() {
        let (edit, k_ref, v_ref) = sample_tensors();
        let out =
            sr_attn(&edit, &k_ref, &v_ref, arr1(&[1.0, 1.0, 1.0]).view(), arr1(&[1.0, 1.0, 1.0]).view(), 2)
                .unwrap();
        let cross = plain_attention(&edit.q, &k_ref, &v_ref, 2).unwrap();
        for (a, b) in out.iter().zip(cross.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sr_attn_half_target_is_branch_mean() {
        let (edit, k_ref, v_ref) = sample_tensors();
        let ms = arr1(&[0.0f32, 1.0, 1.0]);
        let out = sr_attn(&edit, &k_ref, &v_ref, ms.view(), arr1(&[0.5, 0.5, 0.5]).view(), 2).unwrap();
        let reference = apply_weights(&mask_attn(&edit.q, &k_ref, ms.view(), 2).unwrap(), &v_ref).unwrap();
        let own = plain_attention(&edit.q, &edit.k, &edit.v, 2).unwrap();
        for ((o, r), s) in out.iter().zip(reference.iter()).zip(own.iter()) {
            assert!((o - 0.5 * (r + s)).abs() < 1e-6);
        }
    }

    #[test]
    fn sr_attn_rejects_out_of_range_target() {
        let (edit, k_ref, v_ref) = sample_tensors();
        assert!(sr_attn(
            &edit,
            &k_ref,
            &v_ref,
            arr1(&[1.0, 1.0, 1.0]).view(),
            arr1(&[1.5, 0.0, 0.0]).view(),
            2
        )
        .is_err());
    }

    fn site(layer: usize) -> AttentionSite {
        AttentionSite { layer_index: layer, resolution: (1, 2), head_count: 1, head_dim: 2 }
    }

    #[test]
    fn cache_store_and_lookup() {
        let mut cache = ReferenceFeatureCache::new();
        let k = arr2(&[[0.1f32, f32::MIN_POSITIVE], [-0.0, 3.5]]);
        let v = arr2(&[[1.0f32, 2.0], [3.0, 4.0]]);
        cache.record_kv(1, &site(1), k.clone(), v.clone()).unwrap();
        let (k2, v2) = cache.lookup_kv(1, 1).unwrap();
        let bits = |a: &Array2<f32>| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(k2), bits(&k));
        assert_eq!(bits(v2), bits(&v));
        assert!(matches!(
            cache.record_kv(1, &site(1), k.clone(), v.clone()),
            Err(SpecRefError::DuplicateEntry { t: 1, layer: 1 })
        ));
        assert!(matches!(cache.lookup_kv(3, 99), Err(SpecRefError::MissingEntry { t: 3, layer: 99 })));
    }

    #[test]
    fn cache_counts_and_completeness() {
        let mut cache = ReferenceFeatureCache::new();
        let sites: Vec<_> = (1..=4).map(site).collect();
        for t in 1..=5 {
            for s in &sites {
                cache.record_kv(t, s, Array2::zeros((2, 2)), Array2::zeros((2, 2))).unwrap();
            }
        }
        assert_eq!(cache.len(), 20);
        assert_eq!(cache.steps(), vec![1, 2, 3, 4, 5]);
        cache.validate_complete(&sites).unwrap();
        assert!(cache.validate_complete(&sites[..3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Array2<f32>, Array2<f32>, Vec<f32>)> {
            (1usize..=4, 1usize..=4, 1usize..=3).prop_flat_map(|(nq, nkv, d)| {
                (
                    proptest::collection::vec(-4.0f32..4.0, nq * d),
                    proptest::collection::vec(-4.0f32..4.0, nkv * d),
                    proptest::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32)], nkv),
                    0usize..nkv,
                )
                    .prop_map(move |(qv, kv, mut mask, force)| {
                        mask[force] = 1.0;
                        (
                            Array2::from_shape_vec((nq, d), qv).unwrap(),
                            Array2::from_shape_vec((nkv, d), kv).unwrap(),
                            mask,
                        )
                    })
            })
        }

        proptest! {
            #[test]
            fn matches_triple_loop_oracle((q, k, mask) in instance()) {
                let w = mask_attn(&q, &k, arr1(&mask).view(), 1).unwrap();
                let expected = brute_force_weights(&q, &k, Some(&mask));
                for i in 0..q.nrows() {
                    let mut sum = 0.0f64;
                    for j in 0..k.nrows() {
                        prop_assert!((w[[0, i, j]] as f64 - expected[i][j]).abs() < 1e-6);
                        if mask[j] == 0.0 {
                            prop_assert_eq!(w[[0, i, j]], 0.0);
                        }
                        sum += w[[0, i, j]] as f64;
                    }
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn logit_shift_invariance((q, k, mask) in instance(), shift in -3.0f32..3.0) {
                // appending a constant column to Q and a matching column to K adds the
                // same amount to every logit of a row
                let d = q.ncols();
                let mut q2 = Array2::zeros((q.nrows(), d + 1));
                q2.slice_mut(s![.., ..d]).assign(&q);
                q2.column_mut(d).fill(shift);
                let mut k2 = Array2::zeros((k.nrows(), d + 1));
                k2.slice_mut(s![.., ..d]).assign(&k);
                k2.column_mut(d).fill(1.0);
                // rescale so the sqrt(d) factor matches
                let fix = ((d + 1) as f32 / d as f32).sqrt();
                q2.slice_mut(s![.., ..d]).mapv_inplace(|v| v * fix);
                let a = mask_attn(&q, &k, arr1(&mask).view(), 1).unwrap();
                let b = mask_attn(&q2, &k2, arr1(&mask).view(), 1).unwrap();
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
