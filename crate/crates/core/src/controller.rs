//! Two-stage editing: inversion of the source and reference images, then
//! joint denoising of a reconstruction path and an editing path.
//!
//! The reconstruction path replays the cached source trajectory exactly and
//! runs the network only to harvest cross-attention maps. The editing path
//! starts from the inverted source latent and, at gated steps and layers,
//! swaps plain self-attention for specific-reference attention against the
//! reference image's cached Key/Values. After every step the edited latent
//! is blended with the reconstruction latent outside the edit region.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::attention::{plain_attention, sr_attn, AttentionSite, AttentionTensors, ReferenceFeatureCache};
use crate::backend::ToyBackend;
use crate::error::{Result, SpecRefError};
use crate::hooks::{AttentionHooks, Recorder};
use crate::image::RgbImage;
use crate::masks::{
    compute_blend_mask, union_masks, update_target_mask, CrossAttnRecord, SourceMask, TargetMask,
};
use crate::predictor::{NoisePredictor, TextEmbedding};
use crate::schedule::{invert_trajectory, prev_step, LatentState, LatentTrajectory, NoiseSchedule};

/// Steps and self-attention layers where specific-reference attention
/// replaces plain self-attention. Both ranges are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatingPolicy {
    /// `(t_start, t_end)` with `t_start >= t_end`; sampling runs from `T` down.
    pub step_range: (usize, usize),
    /// `(first_layer, last_layer)`, 1-based.
    pub layer_range: (usize, usize),
}

impl GatingPolicy {
    /// Later 80% of the sampling steps (`T` down to `ceil(0.2 T)`) and the
    /// later half of the self-attention layers.
    pub fn default_for(steps: usize, layers: usize) -> Self {
        let t_end = ((steps as f64 * 0.2).ceil() as usize).max(1);
        let first = layers / 2 + 1;
        Self { step_range: (steps, t_end.min(steps)), layer_range: (first.min(layers), layers) }
    }

    pub fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        let (ts, te) = self.step_range;
        let (ls, le) = self.layer_range;
        if !(1 <= te && te <= ts && ts <= steps) {
            return Err(SpecRefError::InvalidScheduleConfig(format!(
                "gating steps ({ts}, {te}) must satisfy 1 <= t_end <= t_start <= {steps}"
            )));
        }
        if !(1 <= ls && ls <= le && le <= layers) {
            return Err(SpecRefError::InvalidScheduleConfig(format!(
                "gating layers ({ls}, {le}) must satisfy 1 <= start <= end <= {layers}"
            )));
        }
        Ok(())
    }
}

/// True iff `t` and `layer` both fall inside the policy's inclusive ranges.
pub fn gate_active(policy: &GatingPolicy, t: usize, layer: usize) -> bool {
    let (ts, te) = policy.step_range;
    let (ls, le) = policy.layer_range;
    (te..=ts).contains(&t) && (ls..=le).contains(&layer)
}

/// How the per-step blend mask is obtained.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BlendMode {
    /// Union of the source token's and the edit token's thresholded maps.
    #[default]
    Local,
    /// All zeros: every step returns the reconstruction latent.
    Empty,
    /// All ones: no blending.
    Full,
    /// A fixed binary grid at latent resolution.
    Fixed(Array2<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOptions {
    pub mt_threshold: f32,
    pub blend_threshold: f32,
    /// Use the normalized target map without thresholding.
    pub mt_soft: bool,
    /// Replace the editing path's cross-attention probabilities with the
    /// reconstruction path's at every step.
    pub p2p_inject: bool,
    pub blend: BlendMode,
    /// Fixed target mask at the canonical resolution, bypassing map derivation.
    pub fixed_target_mask: Option<Array2<f32>>,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            mt_threshold: 0.3,
            blend_threshold: 0.3,
            mt_soft: false,
            p2p_inject: false,
            blend: BlendMode::Local,
            fixed_target_mask: None,
        }
    }
}

/// Everything the editing stage consumes, already inverted and embedded.
#[derive(Debug, Clone, Copy)]
pub struct EditPlan<'a> {
    pub source_trajectory: &'a LatentTrajectory,
    pub source_maps: &'a CrossAttnRecord,
    pub reference: &'a ReferenceFeatureCache,
    pub source_embedding: &'a TextEmbedding,
    pub target_embedding: &'a TextEmbedding,
    pub source_token: usize,
    pub edit_token: usize,
    pub source_mask: &'a SourceMask,
    /// `None` disables specific-reference attention everywhere.
    pub gating: Option<GatingPolicy>,
    pub options: &'a EditOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub t: usize,
    /// Target mask used at this step, canonical resolution.
    pub target_mask: Array2<f32>,
    /// Blend mask at latent resolution.
    pub blend_mask: Array2<f32>,
    /// Editing-path latent `t - 1` before blending.
    pub unblended: LatentState,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub steps: Vec<StepDiagnostics>,
    pub editing_evaluations: usize,
    pub reconstruction_evaluations: usize,
    /// Editing-path cross-attention maps, keyed by sampling step.
    pub editing_maps: CrossAttnRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    /// Editing-path latents `z~_0..z~_T` (after blending).
    pub trajectory: LatentTrajectory,
    pub diagnostics: Diagnostics,
}

/// Inverts the reference latent with Key/Value recording on; the trajectory
/// itself is discarded. Entries are keyed by inversion step `1..=T`.
pub fn extract_reference(
    reference_latent: &LatentState,
    reference_embedding: &TextEmbedding,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<ReferenceFeatureCache> {
    let mut recorder = Recorder::new().with_kv();
    invert_trajectory(reference_latent, predictor, reference_embedding, schedule, &mut recorder)?;
    Ok(recorder.take_kv().expect("recorder built with KV recording"))
}

/// Inverts the source latent, recording cross-attention maps of every token
/// at every step.
pub fn invert_source(
    source_latent: &LatentState,
    source_embedding: &TextEmbedding,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<(LatentTrajectory, CrossAttnRecord)> {
    let mut recorder = Recorder::new().with_maps();
    let traj = invert_trajectory(source_latent, predictor, source_embedding, schedule, &mut recorder)?;
    Ok((traj, recorder.take_maps().expect("recorder built with map recording")))
}

type ProbStore = BTreeMap<(usize, usize), Array3<f32>>;

fn reconstruction_pass(
    trajectory: &LatentTrajectory,
    t: usize,
    predictor: &dyn NoisePredictor,
    source_embedding: &TextEmbedding,
    keep_probs: bool,
) -> Result<(LatentState, CrossAttnRecord, Option<ProbStore>)> {
    if t == 0 {
        return Err(SpecRefError::MissingTrajectoryEntry(0));
    }
    let current = trajectory.get(t)?;
    let previous = trajectory.get(t - 1)?.clone();
    let mut recorder = Recorder::new().with_maps();
    if keep_probs {
        recorder = recorder.with_probs();
    }
    recorder.begin_step(t);
    predictor.predict_noise(current, source_embedding, t, &mut recorder)?;
    Ok((previous, recorder.take_maps().expect("maps on"), recorder.take_probs()))
}

/// One reconstruction step: returns the cached `z_{t-1}` and the source
/// prompt's cross-attention maps from an evaluation at `(z_t, t)`.
pub fn reconstruction_step(
    trajectory: &LatentTrajectory,
    t: usize,
    predictor: &dyn NoisePredictor,
    source_embedding: &TextEmbedding,
) -> Result<(LatentState, CrossAttnRecord)> {
    let (latent, maps, _) = reconstruction_pass(trajectory, t, predictor, source_embedding, false)?;
    Ok((latent, maps))
}

/// Takes `z_edit` where `mask` is 1 and `z_recon` where it is 0, per pixel
/// and across all channels.
pub fn blend(z_edit: &LatentState, z_recon: &LatentState, mask: &Array2<f32>) -> Result<LatentState> {
    let (_, h, w) = z_edit.shape();
    if z_edit.shape() != z_recon.shape() {
        return Err(SpecRefError::shape(z_edit.shape(), z_recon.shape()));
    }
    if mask.dim() != (h, w) {
        return Err(SpecRefError::shape((h, w), mask.dim()));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(SpecRefError::NonBinaryMask);
    }
    let mut out = z_recon.data.clone();
    for ((c, y, x), v) in out.indexed_iter_mut() {
        if mask[[y, x]] == 1.0 {
            *v = z_edit.data[[c, y, x]];
        }
    }
    Ok(LatentState::new(out, z_edit.timestep))
}

struct EditHooks<'a> {
    step: usize,
    gating: Option<GatingPolicy>,
    cache: &'a ReferenceFeatureCache,
    source_mask: &'a SourceMask,
    target_mask: &'a TargetMask,
    inject: Option<&'a ProbStore>,
    maps: CrossAttnRecord,
}

impl AttentionHooks for EditHooks<'_> {
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
        let gated = self.gating.as_ref().is_some_and(|g| gate_active(g, self.step, site.layer_index));
        if !gated {
            return plain_attention(q, k, v, site.head_count);
        }
        let (k_ref, v_ref) = self.cache.lookup_kv(self.step, site.layer_index)?;
        let edit = AttentionTensors { q: q.clone(), k: k.clone(), v: v.clone() };
        sr_attn(
            &edit,
            k_ref,
            v_ref,
            self.source_mask.for_site(site)?.view(),
            self.target_mask.for_site(site)?.view(),
            site.head_count,
        )
    }

    fn cross_attention(&mut self, site: &AttentionSite, probs: &mut Array3<f32>) -> Result<()> {
        if let Some(store) = self.inject {
            let replacement = store
                .get(&(self.step, site.layer_index))
                .ok_or(SpecRefError::MissingRecords { t: self.step, token: 0 })?;
            if replacement.dim() != probs.dim() {
                return Err(SpecRefError::shape(probs.dim(), replacement.dim()));
            }
            probs.assign(replacement);
        }
        self.maps.record_all(self.step, site, probs)
    }
}

fn check_plan(predictor: &dyn NoisePredictor, schedule: &NoiseSchedule, plan: &EditPlan<'_>) -> Result<()> {
    let steps = schedule.steps();
    if plan.source_trajectory.steps() != steps {
        return Err(SpecRefError::Consistency(format!(
            "source trajectory has {} steps, schedule has {steps}",
            plan.source_trajectory.steps()
        )));
    }
    if plan.source_trajectory.latent_shape() != predictor.latent_shape() {
        return Err(SpecRefError::Consistency(format!(
            "trajectory latents are {:?}, backend expects {:?}",
            plan.source_trajectory.latent_shape(),
            predictor.latent_shape()
        )));
    }
    if plan.source_token >= plan.source_embedding.seq_len() {
        return Err(SpecRefError::InvalidRequest(format!("source token {} out of range", plan.source_token)));
    }
    if plan.edit_token >= plan.target_embedding.seq_len() {
        return Err(SpecRefError::InvalidRequest(format!("edit token {} out of range", plan.edit_token)));
    }
    let (_, h, w) = predictor.latent_shape();
    if plan.source_mask.full_res.dim() != (h, w) {
        return Err(SpecRefError::Consistency(format!(
            "source mask is {:?}, latent grid is {:?}",
            plan.source_mask.full_res.dim(),
            (h, w)
        )));
    }
    if let Some(g) = &plan.gating {
        g.validate(steps, predictor.sites().len())?;
    }
    if plan.gating.is_some() || !plan.reference.is_empty() {
        let recorded = plan.reference.steps();
        if !recorded.iter().copied().eq(1..=steps) {
            return Err(SpecRefError::Consistency(format!(
                "reference cache covers {} steps, schedule has {steps}",
                recorded.len()
            )));
        }
        plan.reference.validate_complete(predictor.sites()).map_err(|e| {
            SpecRefError::Consistency(format!("reference cache does not fit the backend: {e}"))
        })?;
    }
    Ok(())
}

/// Runs the editing stage over pre-computed inversion artifacts.
pub fn edit_latents(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    plan: &EditPlan<'_>,
) -> Result<EditOutcome> {
    check_plan(predictor, schedule, plan)?;
    let steps = schedule.steps();
    let sites = predictor.sites();
    let (_, h, w) = predictor.latent_shape();
    let opts = plan.options;

    let mut diagnostics = Diagnostics::default();
    let mut editing_maps = CrossAttnRecord::new();
    let mut current = plan.source_trajectory.last().clone();
    let mut latents = vec![current.clone()];

    for t in (1..=steps).rev() {
        let target_mask = match &opts.fixed_target_mask {
            Some(grid) => TargetMask::from_grid(grid.clone(), sites, t)?,
            None if t == steps => update_target_mask(
                plan.source_maps,
                plan.source_token,
                steps,
                opts.mt_threshold,
                opts.mt_soft,
                sites,
                t,
            )?,
            None => update_target_mask(
                &editing_maps,
                plan.edit_token,
                t + 1,
                opts.mt_threshold,
                opts.mt_soft,
                sites,
                t,
            )?,
        };

        let (recon_latent, recon_maps, recon_probs) = reconstruction_pass(
            plan.source_trajectory,
            t,
            predictor,
            plan.source_embedding,
            opts.p2p_inject,
        )?;
        diagnostics.reconstruction_evaluations += 1;

        let mut hooks = EditHooks {
            step: t,
            gating: plan.gating,
            cache: plan.reference,
            source_mask: plan.source_mask,
            target_mask: &target_mask,
            inject: recon_probs.as_ref(),
            maps: CrossAttnRecord::new(),
        };
        hooks.begin_step(t);
        let eps = predictor.predict_noise(&current, plan.target_embedding, t, &mut hooks)?;
        diagnostics.editing_evaluations += 1;
        let step_maps = std::mem::take(&mut hooks.maps);

        let unblended = prev_step(&current, &eps, schedule, t)?;

        let blend_mask = match &opts.blend {
            BlendMode::Local => union_masks(
                &compute_blend_mask(&recon_maps, &[plan.source_token], t, opts.blend_threshold, (h, w))?,
                &compute_blend_mask(&step_maps, &[plan.edit_token], t, opts.blend_threshold, (h, w))?,
            )?,
            BlendMode::Empty => Array2::zeros((h, w)),
            BlendMode::Full => Array2::ones((h, w)),
            BlendMode::Fixed(grid) => grid.clone(),
        };
        current = blend(&unblended, &recon_latent, &blend_mask)?;
        editing_maps.extend(step_maps)?;

        diagnostics.steps.push(StepDiagnostics {
            t,
            target_mask: target_mask.canonical.clone(),
            blend_mask,
            unblended,
        });
        latents.push(current.clone());
    }

    latents.reverse();
    diagnostics.editing_maps = editing_maps;
    Ok(EditOutcome { trajectory: LatentTrajectory::new(latents)?, diagnostics })
}

/// A complete editing task over the toy backend.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source_image: RgbImage,
    pub reference_image: RgbImage,
    pub source_prompt: String,
    /// Conditioning for the reference inversion; empty by default.
    pub reference_prompt: String,
    pub target_prompt: String,
    pub edit_token: usize,
    pub source_token: usize,
    pub source_mask: SourceMask,
    pub gating: Option<GatingPolicy>,
    pub options: EditOptions,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: RgbImage,
    pub outcome: EditOutcome,
    pub source_trajectory: LatentTrajectory,
    pub reference: ReferenceFeatureCache,
}

/// Runs both stages end to end and decodes the edited latent.
pub fn edit(backend: &ToyBackend, schedule: &NoiseSchedule, request: &EditRequest) -> Result<EditOutput> {
    let source_embedding = backend.embed_text(&request.source_prompt);
    let reference_embedding = backend.embed_text(&request.reference_prompt);
    let target_embedding = backend.embed_text(&request.target_prompt);

    let reference_latent = backend.encode_image(&request.reference_image)?;
    let reference = extract_reference(&reference_latent, &reference_embedding, schedule, backend)?;
    let source_latent = backend.encode_image(&request.source_image)?;
    let (source_trajectory, source_maps) =
        invert_source(&source_latent, &source_embedding, schedule, backend)?;

    let plan = EditPlan {
        source_trajectory: &source_trajectory,
        source_maps: &source_maps,
        reference: &reference,
        source_embedding: &source_embedding,
        target_embedding: &target_embedding,
        source_token: request.source_token,
        edit_token: request.edit_token,
        source_mask: &request.source_mask,
        gating: request.gating,
        options: &request.options,
    };
    let outcome = edit_latents(backend, schedule, &plan)?;
    let image = backend.decode_latent(outcome.trajectory.first())?;
    Ok(EditOutput { image, outcome, source_trajectory, reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn gate_boundaries_are_inclusive() {
        let g = GatingPolicy { step_range: (40, 10), layer_range: (2, 3) };
        assert!(gate_active(&g, 20, 2));
        assert!(gate_active(&g, 40, 3));
        assert!(gate_active(&g, 10, 2));
        assert!(!gate_active(&g, 41, 2));
        assert!(!gate_active(&g, 9, 3));
        assert!(!gate_active(&g, 20, 1));
        assert!(!gate_active(&g, 20, 4));
    }

    #[test]
    fn default_gating() {
        let g = GatingPolicy::default_for(50, 4);
        assert_eq!(g, GatingPolicy { step_range: (50, 10), layer_range: (3, 4) });
        g.validate(50, 4).unwrap();
        let g = GatingPolicy::default_for(1, 1);
        assert_eq!(g, GatingPolicy { step_range: (1, 1), layer_range: (1, 1) });
        g.validate(1, 1).unwrap();
        assert!(GatingPolicy { step_range: (10, 20), layer_range: (1, 1) }.validate(50, 4).is_err());
        assert!(GatingPolicy { step_range: (51, 20), layer_range: (1, 1) }.validate(50, 4).is_err());
        assert!(GatingPolicy { step_range: (5, 1), layer_range: (0, 1) }.validate(50, 4).is_err());
        assert!(GatingPolicy { step_range: (5, 1), layer_range: (3, 5) }.validate(50, 4).is_err());
    }

    fn latent(vals: &[f32]) -> LatentState {
        LatentState::new(Array3::from_shape_vec((1, 2, 2), vals.to_vec()).unwrap(), 3)
    }

    #[test]
    fn blend_extremes() {
        let a = latent(&[1.0, 2.0, 3.0, 4.0]);
        let b = latent(&[-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(blend(&a, &b, &Array2::ones((2, 2))).unwrap(), a);
        assert_eq!(blend(&a, &b, &Array2::zeros((2, 2))).unwrap(), b);
        assert!(blend(&a, &b, &Array2::ones((2, 3))).is_err());
        assert!(matches!(blend(&a, &b, &arr2(&[[0.5, 0.0], [0.0, 0.0]])), Err(SpecRefError::NonBinaryMask)));
    }

    #[test]
    fn blend_checkerboard_matches_scalar_loop() {
        let a =
            LatentState::new(Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 16 + y * 4 + x) as f32), 1);
        let b = LatentState::new(a.data.mapv(|v| -v - 0.5), 1);
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as f32);
        let out = blend(&a, &b, &mask).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = if (y + x) % 2 == 1 { a.data[[c, y, x]] } else { b.data[[c, y, x]] };
                    assert_eq!(out.data[[c, y, x]], expect);
                }
            }
        }
    }
}
