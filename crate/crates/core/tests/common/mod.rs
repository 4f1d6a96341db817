//! Shared fixtures and an independent scalar re-implementation of the toy
//! pipeline used as an oracle.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use specref_core::controller::{edit_latents, extract_reference, invert_source, EditPlan};
use specref_core::{
    BackendConfig, BlendMode, EditOptions, GatingPolicy, LatentState, NoiseSchedule, RgbImage, SourceMask,
    ToyBackend,
};

pub type Mat = Vec<Vec<f64>>;
/// `[channel][y][x]`
pub type Lat = Vec<Vec<Vec<f64>>>;

pub fn to_lat(a: &Array3<f32>) -> Lat {
    let (c, h, w) = a.dim();
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| a[[ch, y, x]] as f64).collect()).collect()).collect()
}

pub fn max_abs_diff(a: &Array3<f32>, b: &Lat) -> f64 {
    let mut m = 0.0f64;
    for ((c, y, x), v) in a.indexed_iter() {
        m = m.max((*v as f64 - b[c][y][x]).abs());
    }
    m
}

fn mat(a: &Array2<f32>) -> Mat {
    a.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn matmul(a: &Mat, w: &Array2<f32>) -> Mat {
    let (k, n) = w.dim();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|i| row[i] * w[[i, j]] as f64).sum()).collect()
        })
        .collect()
}

fn add_in_place(a: &mut Mat, b: &Mat) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

/// Per-head attention: `out[i] = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j`,
/// restricted to keys with `active[j]`.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, active: &[bool]) -> Mat {
    let dm = q[0].len();
    let d = dm / heads;
    let mut out = vec![vec![0.0; dm]; q.len()];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max =
                logits.iter().zip(active).filter(|(_, &a)| a).fold(f64::NEG_INFINITY, |m, (l, _)| m.max(*l));
            let e: Vec<f64> =
                logits.iter().zip(active).map(|(l, &a)| if a { (l - max).exp() } else { 0.0 }).collect();
            let s: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| e[j] / s * v[j][c]).sum();
            }
        }
    }
    out
}

/// What the oracle does at each self-attention layer.
pub enum Mode<'a> {
    Plain,
    /// Plain attention, recording `(layer, K, V)`.
    Record(&'a mut Vec<(usize, Mat, Mat)>),
    /// Mixed attention at the listed layers with per-layer flattened masks.
    Mixed {
        layers: &'a [usize],
        reference: &'a BTreeMap<usize, (Mat, Mat)>,
        source_mask: &'a [f64],
        target_mask: &'a [f64],
    },
}

pub struct Oracle<'a> {
    pub backend: &'a ToyBackend,
}

impl Oracle<'_> {
    pub fn encode(&self, image: &RgbImage) -> Lat {
        let cfg = self.backend.config();
        let p = cfg.patch;
        let m = self.backend.mixing();
        let mut out = vec![vec![vec![0.0; cfg.latent_width]; cfg.latent_height]; cfg.channels];
        for i in 0..cfg.latent_height {
            for j in 0..cfg.latent_width {
                let mut rgb = [0.0f64; 3];
                for y in i * p..(i + 1) * p {
                    for x in j * p..(j + 1) * p {
                        for (k, s) in rgb.iter_mut().enumerate() {
                            *s += image.get(x, y)[k] as f64;
                        }
                    }
                }
                for ch in 0..cfg.channels {
                    out[ch][i][j] =
                        (0..3).map(|k| m[[ch, k]] * (rgb[k] / (p * p) as f64 / 127.5 - 1.0)).sum();
                }
            }
        }
        out
    }

    pub fn predict(&self, z: &Lat, text: &Array2<f32>, t: usize, mode: &mut Mode<'_>) -> Lat {
        let cfg = self.backend.config();
        let (c, hh, ww) = (cfg.channels, cfg.latent_height, cfg.latent_width);
        let dm = cfg.heads * cfg.head_dim;
        let half = dm / 2;
        let mut temb = vec![0.0; dm];
        for i in 0..half {
            let arg = t as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp();
            temb[i] = arg.sin() * 0.5;
            temb[i + half] = arg.cos() * 0.5;
        }
        let text = mat(text);
        let mut eps = vec![vec![vec![0.0; ww]; hh]; c];
        for (l0, &(rh, rw)) in cfg.block_resolutions.iter().enumerate() {
            let layer = l0 + 1;
            let wts = self.backend.block(layer);
            let (fy, fx) = (hh / rh, ww / rw);
            let x: Mat = (0..rh * rw)
                .map(|n| {
                    let (i, j) = (n / rw, n % rw);
                    (0..c)
                        .map(|ch| {
                            let mut s = 0.0;
                            for y in i * fy..(i + 1) * fy {
                                for xx in j * fx..(j + 1) * fx {
                                    s += z[ch][y][xx] + eps[ch][y][xx];
                                }
                            }
                            s / (fy * fx) as f64
                        })
                        .collect()
                })
                .collect();
            let mut h = matmul(&x, &wts.w_in);
            for row in h.iter_mut() {
                for (v, e) in row.iter_mut().zip(&temb) {
                    *v += e;
                }
            }
            let q = matmul(&h, &wts.w_q);
            let k = matmul(&h, &wts.w_k);
            let v = matmul(&h, &wts.w_v);
            let all = vec![true; k.len()];
            let attn = match mode {
                Mode::Plain => attend(&q, &k, &v, cfg.heads, &all),
                Mode::Record(store) => {
                    store.push((layer, k.clone(), v.clone()));
                    attend(&q, &k, &v, cfg.heads, &all)
                }
                Mode::Mixed { layers, reference, source_mask, target_mask } => {
                    let plain = attend(&q, &k, &v, cfg.heads, &all);
                    if layers.contains(&layer) {
                        let (kr, vr) = &reference[&layer];
                        let active: Vec<bool> = source_mask.iter().map(|&m| m == 1.0).collect();
                        let masked = attend(&q, kr, vr, cfg.heads, &active);
                        plain
                            .iter()
                            .zip(&masked)
                            .zip(target_mask.iter())
                            .map(|((p, m), &mt)| {
                                p.iter().zip(m).map(|(a, b)| mt * b + (1.0 - mt) * a).collect()
                            })
                            .collect()
                    } else {
                        plain
                    }
                }
            };
            add_in_place(&mut h, &matmul(&attn, &wts.w_o));
            let qc = matmul(&h, &wts.w_cross_q);
            let kc = matmul(&text, &wts.w_cross_k);
            let vc = matmul(&text, &wts.w_cross_v);
            let cross = attend(&qc, &kc, &vc, cfg.heads, &vec![true; kc.len()]);
            add_in_place(&mut h, &matmul(&cross, &wts.w_cross_o));
            let hidden: Mat =
                matmul(&h, &wts.w_ff1).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
            add_in_place(&mut h, &matmul(&hidden, &wts.w_ff2));
            let out = matmul(&h, &wts.w_out);
            for (ch, plane) in eps.iter_mut().enumerate() {
                for (y, row) in plane.iter_mut().enumerate() {
                    for (xx, val) in row.iter_mut().enumerate() {
                        *val += out[(y / fy) * rw + xx / fx][ch];
                    }
                }
            }
        }
        eps
    }
}

/// Linear betas, cumulative product and evenly spaced subsampling, in f64.
pub fn oracle_alphas(train: usize, steps: usize, beta: (f64, f64)) -> Vec<f64> {
    let mut cum = Vec::with_capacity(train);
    let mut prod = 1.0;
    for i in 0..train {
        let b = if train == 1 { beta.0 } else { beta.0 + (beta.1 - beta.0) * i as f64 / (train - 1) as f64 };
        prod *= 1.0 - b;
        cum.push(prod);
    }
    let mut out = vec![1.0];
    for k in 1..=steps {
        out.push(cum[k * train / steps - 1]);
    }
    out
}

/// `z_to = sqrt(a_to) * (z_from - sqrt(1 - a_from) eps) / sqrt(a_from) + sqrt(1 - a_to) eps`
pub fn oracle_transfer(z: &Lat, eps: &Lat, a_from: f64, a_to: f64) -> Lat {
    z.iter()
        .zip(eps)
        .map(|(pz, pe)| {
            pz.iter()
                .zip(pe)
                .map(|(rz, re)| {
                    rz.iter()
                        .zip(re)
                        .map(|(&zv, &ev)| {
                            a_to.sqrt() * (zv - (1.0 - a_from).sqrt() * ev) / a_from.sqrt()
                                + (1.0 - a_to).sqrt() * ev
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Miniature configuration: 3 channels on a 2x2 grid, two blocks at 2x2,
/// one head of width 2, two text tokens, one pixel per latent cell.
pub fn mini_backend(seed: u64) -> ToyBackend {
    ToyBackend::new(BackendConfig {
        channels: 3,
        latent_height: 2,
        latent_width: 2,
        block_resolutions: vec![(2, 2), (2, 2)],
        heads: 1,
        head_dim: 2,
        text_dim: 2,
        seq_len: 2,
        patch: 1,
        seed,
    })
    .unwrap()
}

pub const MINI_TRAIN: usize = 100;
pub const MINI_STEPS: usize = 2;
pub const MINI_BETA: (f64, f64) = (1e-4, 0.02);

pub fn mini_images() -> (RgbImage, RgbImage) {
    let src = RgbImage::new(2, 2, vec![200, 30, 60, 10, 240, 90, 120, 120, 20, 250, 5, 170]).unwrap();
    let reference = RgbImage::new(2, 2, vec![15, 90, 210, 180, 180, 30, 60, 220, 140, 40, 10, 5]).unwrap();
    (src, reference)
}

/// Result of comparing the library's miniature run with the oracle.
pub struct MiniReport {
    /// Largest absolute difference over every latent of both inversions and
    /// the editing path.
    pub max_error: f64,
    pub compared: usize,
}

/// Runs the miniature edit through the library and the scalar oracle.
pub fn run_mini_comparison(seed: u64) -> MiniReport {
    run_mini_comparison_with(seed, &[1, 2])
}

/// As [`run_mini_comparison`], with the oracle mixing only at `oracle_layers`
/// while the library gates both layers.
pub fn run_mini_comparison_with(seed: u64, oracle_layers: &[usize]) -> MiniReport {
    let backend = mini_backend(seed);
    let schedule: NoiseSchedule = specref_core::build_schedule(MINI_TRAIN, MINI_STEPS, MINI_BETA).unwrap();
    let (src_img, ref_img) = mini_images();
    let src_emb = backend.embed_text("cat");
    let tgt_emb = backend.embed_text("dog");
    let ref_emb = backend.embed_text("");

    let source_grid = ndarray::arr2(&[[0.0f32, 1.0], [0.0, 0.0]]);
    let target_grid = ndarray::arr2(&[[1.0f32, 0.0], [0.0, 0.0]]);
    let blend_grid = ndarray::arr2(&[[1.0f32, 1.0], [0.0, 0.0]]);

    // Library run.
    let z_ref = backend.encode_image(&ref_img).unwrap();
    let z_src = backend.encode_image(&src_img).unwrap();
    let cache = extract_reference(&z_ref, &ref_emb, &schedule, &backend).unwrap();
    let (traj, maps) = invert_source(&z_src, &src_emb, &schedule, &backend).unwrap();
    let source_mask =
        SourceMask::from_latent_grid(source_grid.clone(), specref_core::NoisePredictor::sites(&backend))
            .unwrap();
    let options = EditOptions {
        blend: BlendMode::Fixed(blend_grid.clone()),
        fixed_target_mask: Some(target_grid.clone()),
        ..EditOptions::default()
    };
    let plan = EditPlan {
        source_trajectory: &traj,
        source_maps: &maps,
        reference: &cache,
        source_embedding: &src_emb,
        target_embedding: &tgt_emb,
        source_token: 0,
        edit_token: 0,
        source_mask: &source_mask,
        gating: Some(GatingPolicy { step_range: (MINI_STEPS, 1), layer_range: (1, 2) }),
        options: &options,
    };
    let outcome = edit_latents(&backend, &schedule, &plan).unwrap();

    // Oracle run.
    let oracle = Oracle { backend: &backend };
    let alphas = oracle_alphas(MINI_TRAIN, MINI_STEPS, MINI_BETA);
    let mut max_error = 0.0f64;
    let mut compared = 0;
    let mut check = |lib: &LatentState, ora: &Lat| {
        max_error = max_error.max(max_abs_diff(&lib.data, ora));
        compared += 1;
    };

    let mut ref_kv: BTreeMap<usize, BTreeMap<usize, (Mat, Mat)>> = BTreeMap::new();
    let mut zr = oracle.encode(&ref_img);
    for t in 1..=MINI_STEPS {
        let mut rec = Vec::new();
        let eps = oracle.predict(&zr, &ref_emb.vectors, t - 1, &mut Mode::Record(&mut rec));
        ref_kv.insert(t, rec.into_iter().map(|(l, k, v)| (l, (k, v))).collect());
        zr = oracle_transfer(&zr, &eps, alphas[t - 1], alphas[t]);
    }

    let mut zs = vec![oracle.encode(&src_img)];
    for t in 1..=MINI_STEPS {
        let eps = oracle.predict(&zs[t - 1], &src_emb.vectors, t - 1, &mut Mode::Plain);
        zs.push(oracle_transfer(&zs[t - 1], &eps, alphas[t - 1], alphas[t]));
    }
    for t in 0..=MINI_STEPS {
        check(traj.get(t).unwrap(), &zs[t]);
    }

    let flat = |g: &Array2<f32>| g.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let (ms, mt, mb) = (flat(&source_grid), flat(&target_grid), flat(&blend_grid));
    let mut z = zs[MINI_STEPS].clone();
    for t in (1..=MINI_STEPS).rev() {
        let mut mode =
            Mode::Mixed { layers: oracle_layers, reference: &ref_kv[&t], source_mask: &ms, target_mask: &mt };
        let eps = oracle.predict(&z, &tgt_emb.vectors, t, &mut mode);
        let stepped = oracle_transfer(&z, &eps, alphas[t], alphas[t - 1]);
        check(&outcome.diagnostics.steps[MINI_STEPS - t].unblended, &stepped);
        z = stepped;
        for (ch, plane) in z.iter_mut().enumerate() {
            for (y, row) in plane.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    if mb[y * 2 + x] == 0.0 {
                        *v = zs[t - 1][ch][y][x];
                    }
                }
            }
        }
        check(outcome.trajectory.get(t - 1).unwrap(), &z);
    }

    // Reference features against the oracle's recorded K and V.
    for (t, layer, k, v) in cache.iter() {
        let (ok, ov) = &ref_kv[&t][&layer];
        for (lib, ora) in [(k, ok), (v, ov)] {
            for ((i, j), val) in lib.indexed_iter() {
                max_error = max_error.max((*val as f64 - ora[i][j]).abs());
            }
        }
    }

    MiniReport { max_error, compared }
}

/// Deterministic test image of the default toy size (64x64).
pub fn toy_image(seed: u8) -> RgbImage {
    let mut img = RgbImage::filled(64, 64, [20, 40 + seed, 90]);
    for y in 0..64usize {
        for x in 0..64usize {
            if (16..48).contains(&x) && (12..44).contains(&y) {
                img.put(x, y, [(x * 3 + seed as usize) as u8, (y * 5) as u8, 200 - (x + y) as u8]);
            }
        }
    }
    img
}
