//! Noise schedule and the deterministic DDIM inversion / reverse updates.
//!
//! Both updates are the same affine map between two noise levels with the
//! roles of source and destination swapped, so they share [`ddim_transfer`].
//! Arithmetic is carried out in `f64` and rounded once to `f32` per element.

use ndarray::Array3;

use crate::error::{Result, SpecRefError};
use crate::hooks::AttentionHooks;
use crate::predictor::{NoisePredictor, TextEmbedding};

/// Cumulative signal coefficients `alpha_bar_t` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sample_steps: usize,
    train_steps: usize,
    beta_range: (f64, f64),
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit coefficients. `alpha_bars[0]` must be
    /// exactly 1 and the sequence strictly decreasing inside `(0, 1]`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(SpecRefError::InvalidScheduleConfig("need at least one sampling step".into()));
        }
        if alpha_bars[0] != 1.0 {
            return Err(SpecRefError::InvalidScheduleConfig(format!(
                "alpha_bar_0 must be 1.0, got {}",
                alpha_bars[0]
            )));
        }
        for w in alpha_bars.windows(2) {
            if w[1].is_nan() || w[1] >= w[0] || w[1] <= 0.0 {
                return Err(SpecRefError::InvalidScheduleConfig(format!(
                    "alpha_bars must be strictly decreasing in (0, 1], saw {} after {}",
                    w[1], w[0]
                )));
            }
        }
        let steps = alpha_bars.len() - 1;
        Ok(Self { sample_steps: steps, train_steps: steps, beta_range: (0.0, 0.0), alpha_bars })
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.sample_steps
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        self.beta_range
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar_t`; panics when `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.sample_steps {
            return Err(SpecRefError::InvalidScheduleConfig(format!(
                "step {t} outside 1..={}",
                self.sample_steps
            )));
        }
        Ok(())
    }
}

/// Linear beta ramp over `train_steps`, cumulative product of `1 - beta`,
/// subsampled uniformly to `sample_steps` entries with `alpha_bar_0 = 1`.
pub fn build_schedule(
    train_steps: usize,
    sample_steps: usize,
    beta_range: (f64, f64),
) -> Result<NoiseSchedule> {
    let (beta_min, beta_max) = beta_range;
    if sample_steps == 0 || train_steps < sample_steps {
        return Err(SpecRefError::InvalidScheduleConfig(format!(
            "need train_steps >= sample_steps >= 1, got {train_steps} and {sample_steps}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(SpecRefError::InvalidScheduleConfig(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }

    let mut cumulative = Vec::with_capacity(train_steps);
    let mut acc = 1.0f64;
    for i in 0..train_steps {
        let beta = if train_steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * i as f64 / (train_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        cumulative.push(acc);
    }

    let mut alpha_bars = Vec::with_capacity(sample_steps + 1);
    alpha_bars.push(1.0);
    for k in 1..=sample_steps {
        let idx = k * train_steps / sample_steps - 1;
        alpha_bars.push(cumulative[idx]);
    }

    let mut schedule = NoiseSchedule::from_alpha_bars(alpha_bars)?;
    schedule.train_steps = train_steps;
    schedule.beta_range = beta_range;
    Ok(schedule)
}

/// A latent tensor `[channels, height, width]` tagged with its step index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Array3<f32>,
    pub timestep: usize,
}

impl LatentState {
    pub fn new(data: Array3<f32>, timestep: usize) -> Self {
        Self { data, timestep }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Latents `z_0..z_T` of one inversion run, indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    states: Vec<LatentState>,
}

impl LatentTrajectory {
    pub fn new(states: Vec<LatentState>) -> Result<Self> {
        if states.is_empty() {
            return Err(SpecRefError::InvalidRequest("empty trajectory".into()));
        }
        let shape = states[0].shape();
        for (i, s) in states.iter().enumerate() {
            if s.timestep != i {
                return Err(SpecRefError::InvalidRequest(format!(
                    "trajectory entry {i} carries timestep {}",
                    s.timestep
                )));
            }
            if s.shape() != shape {
                return Err(SpecRefError::shape(shape, s.shape()));
            }
        }
        Ok(Self { states })
    }

    /// Number of steps `T` (one less than the number of latents).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn get(&self, t: usize) -> Result<&LatentState> {
        self.states.get(t).ok_or(SpecRefError::MissingTrajectoryEntry(t))
    }

    pub fn first(&self) -> &LatentState {
        &self.states[0]
    }

    pub fn last(&self) -> &LatentState {
        &self.states[self.states.len() - 1]
    }

    pub fn states(&self) -> &[LatentState] {
        &self.states
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.states[0].shape()
    }
}

fn check_operands(z: &Array3<f32>, eps: &Array3<f32>) -> Result<()> {
    if z.dim() != eps.dim() {
        return Err(SpecRefError::shape(z.dim(), eps.dim()));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(SpecRefError::NonFiniteInput("latent".into()));
    }
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(SpecRefError::NonFiniteInput("noise estimate".into()));
    }
    Ok(())
}

/// Moves `z` from noise level `alpha_from` to `alpha_to` along the
/// deterministic DDIM path defined by the noise estimate `eps`:
/// `sqrt(a_to) * (z - sqrt(1 - a_from) * eps) / sqrt(a_from) + sqrt(1 - a_to) * eps`.
pub fn ddim_transfer(
    z: &Array3<f32>,
    eps: &Array3<f32>,
    alpha_from: f64,
    alpha_to: f64,
) -> Result<Array3<f32>> {
    check_operands(z, eps)?;
    let sig_from = (1.0 - alpha_from).sqrt();
    let sig_to = (1.0 - alpha_to).sqrt();
    let ratio = (alpha_to / alpha_from).sqrt();
    let mut out = z.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        let zv = *o as f64;
        let e = e as f64;
        *o = (ratio * (zv - sig_from * e) + sig_to * e) as f32;
    });
    Ok(out)
}

/// One inversion step: `z_{t-1} -> z_t`.
pub fn invert_step(
    z_prev: &LatentState,
    eps: &Array3<f32>,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<LatentState> {
    schedule.check_step(t)?;
    let data = ddim_transfer(&z_prev.data, eps, schedule.alpha_bar(t - 1), schedule.alpha_bar(t))?;
    Ok(LatentState::new(data, t))
}

/// One reverse (sampling) step: `z_t -> z_{t-1}`.
pub fn prev_step(
    z_t: &LatentState,
    eps: &Array3<f32>,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<LatentState> {
    schedule.check_step(t)?;
    let data = ddim_transfer(&z_t.data, eps, schedule.alpha_bar(t), schedule.alpha_bar(t - 1))?;
    Ok(LatentState::new(data, t - 1))
}

/// Runs DDIM inversion from `z0` to `z_T`.
///
/// The noise estimate for step `t` is taken at `(z_{t-1}, t-1)`. Before each
/// predictor call `hooks.begin_step(t)` is invoked, so anything the hooks
/// record is keyed by the step index `t` in `1..=T`.
pub fn invert_trajectory(
    z0: &LatentState,
    predictor: &dyn NoisePredictor,
    embedding: &TextEmbedding,
    schedule: &NoiseSchedule,
    hooks: &mut dyn AttentionHooks,
) -> Result<LatentTrajectory> {
    if z0.timestep != 0 {
        return Err(SpecRefError::InvalidRequest(format!(
            "inversion must start at timestep 0, got {}",
            z0.timestep
        )));
    }
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    states.push(z0.clone());
    for t in 1..=schedule.steps() {
        let prev = &states[t - 1];
        hooks.begin_step(t);
        let eps = predictor.predict_noise(prev, embedding, t - 1, hooks)?;
        let next = invert_step(prev, &eps, schedule, t)?;
        states.push(next);
    }
    LatentTrajectory::new(states)
}
