//! Built-in property checks run by `specref selftest`.

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{mask_attn_with_sentinel, plain_attention, sr_attn, AttentionTensors, MASK_SENTINEL};
use crate::backend::{ToyBackend, ZeroNoise};
use crate::config::RunConfig;
use crate::controller::blend;
use crate::error::{Result, SpecRefError};
use crate::hooks::{AttentionHooks, PlainHooks, Recorder};
use crate::io::{kv_cache_from_bytes, kv_cache_to_bytes, tensor_from_bytes, tensor_to_bytes};
use crate::predictor::NoisePredictor;
use crate::schedule::{invert_step, invert_trajectory, prev_step, LatentState};

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTestOptions {
    /// Replaces [`MASK_SENTINEL`] in the masked-attention checks. Used to
    /// confirm that a broken sentinel is reported.
    pub sentinel: f32,
    pub trials: usize,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        Self { sentinel: MASK_SENTINEL, trials: 200 }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
}

/// Scalar triple-loop masked attention in `f64`; masked keys are skipped.
fn scalar_masked_attention(q: &Array2<f32>, k: &Array2<f32>, mask: &[f32]) -> Vec<Vec<f64>> {
    let d = q.ncols() as f64;
    (0..q.nrows())
        .map(|i| {
            let logits: Vec<Option<f64>> = (0..k.nrows())
                .map(|j| {
                    (mask[j] == 1.0).then(|| {
                        (0..q.ncols()).map(|c| q[[i, c]] as f64 * k[[j, c]] as f64).sum::<f64>() / d.sqrt()
                    })
                })
                .collect();
            let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |v| (v - max).exp())).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn check(name: &'static str, f: impl FnOnce() -> Result<std::result::Result<(), String>>) -> PropertyResult {
    match f() {
        Ok(Ok(())) => PropertyResult { name, passed: true, detail: String::new() },
        Ok(Err(detail)) => PropertyResult { name, passed: false, detail },
        Err(e) => PropertyResult { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Runs every property and returns one result per property.
pub fn run_selftest(config: &RunConfig, opts: SelfTestOptions) -> Result<Vec<PropertyResult>> {
    let schedule = config.schedule()?;
    let steps = schedule.steps();
    let backend = ToyBackend::new(config.backend_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut results = Vec::new();

    results.push(check("schedule_invariants", || {
        let a = schedule.alpha_bars();
        if a[0] != 1.0 {
            return Ok(Err(format!("alpha_bar_0 = {}", a[0])));
        }
        if let Some(w) = a.windows(2).find(|w| !(w[1] < w[0] && w[1] > 0.0)) {
            return Ok(Err(format!("not strictly decreasing: {} then {}", w[0], w[1])));
        }
        Ok(Ok(()))
    }));

    results.push(check("ddim_round_trip", || {
        for _ in 0..opts.trials {
            let t = rng.random_range(1..=steps);
            let z = Array3::from_shape_simple_fn((2, 3, 3), || rng.sample::<f32, _>(StandardNormal));
            let eps = Array3::from_shape_simple_fn((2, 3, 3), || rng.sample::<f32, _>(StandardNormal));
            let up = invert_step(&LatentState::new(z.clone(), t - 1), &eps, &schedule, t)?;
            let back = prev_step(&up, &eps, &schedule, t)?;
            // Rounding z_t to f32 is amplified by sqrt(a_{t-1} / a_t) on the way back down.
            let gain = (schedule.alpha_bar(t - 1) / schedule.alpha_bar(t)).sqrt().max(1.0) as f32;
            let scale = z.iter().fold(1.0f32, |m, v| m.max(v.abs()));
            let err = back.data.iter().zip(z.iter()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            if err > 1e-5 * scale * gain {
                return Ok(Err(format!("t = {t}: relative error {} (step gain {gain})", err / scale)));
            }
        }
        Ok(Ok(()))
    }));

    results.push(check("zero_noise_telescoping", || {
        let z0 = LatentState::new(
            Array3::from_shape_simple_fn(backend.latent_shape(), || rng.sample::<f32, _>(StandardNormal)),
            0,
        );
        let zero = ZeroNoise(backend.clone());
        let c = backend.embed_text("");
        let traj = invert_trajectory(&z0, &zero, &c, &schedule, &mut PlainHooks)?;
        let k = schedule.alpha_bar(steps).sqrt();
        let err = traj
            .last()
            .data
            .iter()
            .zip(z0.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - k * *b as f64).abs()));
        if err > 1e-6 {
            return Ok(Err(format!("max deviation {err}")));
        }
        Ok(Ok(()))
    }));

    // Random small masked-attention instances shared by the next checks.
    let instances: Vec<(Array2<f32>, Array2<f32>, Vec<f32>)> = (0..opts.trials)
        .map(|_| {
            let nq = rng.random_range(1..=4);
            let nkv = rng.random_range(1..=4);
            let d = rng.random_range(1..=3);
            let mut mask: Vec<f32> = (0..nkv).map(|_| rng.random_range(0..2) as f32).collect();
            let keep = rng.random_range(0..nkv);
            mask[keep] = 1.0;
            (randn(&mut rng, (nq, d)), randn(&mut rng, (nkv, d)), mask)
        })
        .collect();

    results.push(check("mask_attn_oracle_equivalence", || {
        for (q, k, mask) in &instances {
            let w = mask_attn_with_sentinel(q, k, Array1::from(mask.clone()).view(), 1, opts.sentinel)?;
            let expected = scalar_masked_attention(q, k, mask);
            for (i, row) in expected.iter().enumerate() {
                for (j, e) in row.iter().enumerate() {
                    if (w[[0, i, j]] as f64 - e).abs() > 1e-6 {
                        return Ok(Err(format!("weight ({i}, {j}) = {} vs oracle {e}", w[[0, i, j]])));
                    }
                }
            }
        }
        Ok(Ok(()))
    }));

    results.push(check("masked_key_nullity", || {
        for (q, k, mask) in &instances {
            let w = mask_attn_with_sentinel(q, k, Array1::from(mask.clone()).view(), 1, opts.sentinel)?;
            for i in 0..q.nrows() {
                for (j, &m) in mask.iter().enumerate() {
                    if m == 0.0 && w[[0, i, j]] != 0.0 {
                        return Ok(Err(format!("masked key {j} got weight {}", w[[0, i, j]])));
                    }
                }
            }
        }
        Ok(Ok(()))
    }));

    results.push(check("row_stochasticity", || {
        for (q, k, mask) in &instances {
            let w = mask_attn_with_sentinel(q, k, Array1::from(mask.clone()).view(), 1, opts.sentinel)?;
            for i in 0..q.nrows() {
                let s: f64 = (0..k.nrows()).map(|j| w[[0, i, j]] as f64).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Ok(Err(format!("row sum {s}")));
                }
            }
        }
        Ok(Ok(()))
    }));

    results.push(check("empty_source_mask_rejected", || {
        let q = randn(&mut rng, (2, 2));
        let k = randn(&mut rng, (3, 2));
        match mask_attn_with_sentinel(&q, &k, Array1::zeros(3).view(), 1, opts.sentinel) {
            Err(SpecRefError::EmptySourceMask) => Ok(Ok(())),
            other => Ok(Err(format!("expected EmptySourceMask, got {other:?}"))),
        }
    }));

    results.push(check("sr_attn_degenerate_mixing", || {
        let edit = AttentionTensors {
            q: randn(&mut rng, (4, 4)),
            k: randn(&mut rng, (4, 4)),
            v: randn(&mut rng, (4, 4)),
        };
        let (kr, vr) = (randn(&mut rng, (4, 4)), randn(&mut rng, (4, 4)));
        let ones = Array1::ones(4);
        let off = sr_attn(&edit, &kr, &vr, ones.view(), Array1::zeros(4).view(), 2)?;
        if off != plain_attention(&edit.q, &edit.k, &edit.v, 2)? {
            return Ok(Err("M_t = 0 differs from self-attention".into()));
        }
        let on = sr_attn(&edit, &kr, &vr, ones.view(), ones.view(), 2)?;
        let cross = plain_attention(&edit.q, &kr, &vr, 2)?;
        let err = on.iter().zip(cross.iter()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        if err > 1e-6 {
            return Ok(Err(format!("M_t = 1 deviates from cross-attention by {err}")));
        }
        Ok(Ok(()))
    }));

    results.push(check("blend_locality", || {
        let (c, h, w) = backend.latent_shape();
        let a = LatentState::new(Array3::from_shape_simple_fn((c, h, w), || rng.random()), 1);
        let b = LatentState::new(Array3::from_shape_simple_fn((c, h, w), || rng.random()), 1);
        let mask = Array2::from_shape_simple_fn((h, w), || rng.random_range(0..2) as f32);
        let out = blend(&a, &b, &mask)?;
        for ((ch, y, x), v) in out.data.indexed_iter() {
            let src = if mask[[y, x]] == 1.0 { &a } else { &b };
            if v.to_bits() != src.data[[ch, y, x]].to_bits() {
                return Ok(Err(format!("mismatch at ({ch}, {y}, {x})")));
            }
        }
        Ok(Ok(()))
    }));

    results.push(check("hook_neutrality", || {
        let z = LatentState::new(
            Array3::from_shape_simple_fn(backend.latent_shape(), || rng.sample::<f32, _>(StandardNormal)),
            0,
        );
        let c = backend.embed_text("a cat sitting next to a mirror");
        let plain = backend.predict_noise(&z, &c, steps, &mut PlainHooks)?;
        let mut recorder = Recorder::new().with_kv().with_maps();
        let recorded = backend.predict_noise(&z, &c, steps, &mut recorder)?;
        if plain != recorded {
            return Ok(Err("recording hooks changed the output".into()));
        }
        Ok(Ok(()))
    }));

    results.push(check("serialization_round_trip", || {
        let t: ArrayD<f32> =
            Array3::from_shape_simple_fn((2, 3, 4), || rng.sample::<f32, _>(StandardNormal)).into_dyn();
        let back = tensor_from_bytes(&tensor_to_bytes(&t)?)?;
        if back.iter().zip(t.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(Err("tensor round trip not bit-exact".into()));
        }
        let mut recorder = Recorder::new().with_kv();
        let z = LatentState::new(Array3::zeros(backend.latent_shape()), 0);
        recorder.begin_step(1);
        backend.predict_noise(&z, &backend.embed_text(""), 0, &mut recorder)?;
        let cache = recorder.take_kv().expect("kv on");
        if kv_cache_from_bytes(&kv_cache_to_bytes(&cache)?)? != cache {
            return Ok(Err("KV cache round trip not exact".into()));
        }
        Ok(Ok(()))
    }));

    Ok(results)
}
