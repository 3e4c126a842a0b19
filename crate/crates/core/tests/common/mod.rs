//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajformer::config::ModelConfig;
use trajformer::data::{batchify, generate_synthetic, Batch, SyntheticConfig};
use trajformer::geo::{compute_center, NormalizationParams, Trajectory};
use trajformer::params::AttentionParams;
use trajformer::tensor::{Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;

/// Pass iff `|a - n| <= tol * max(|a|, |n|)` or `|a - n| <= 1e-8`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-8 {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub rel: f64,
    pub abs: f64,
}

/// Worst errors between tape gradients and central differences of
/// `Σ w ⊙ f(inputs)` over every input element, with random fixed weights `w`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).expect("forward").shape()
    };
    let w = random_tensor(&mut rng, &shape);
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars).expect("forward").value();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&tape, &vars).expect("forward");
    let loss = y.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = GradCheck::default();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst.rel = worst.rel.max(rel_err(g.data()[i], numeric));
            worst.abs = worst.abs.max((g.data()[i] - numeric).abs());
        }
    }
    worst
}

fn linear(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|k| row[k] * w.get(&[k, j])).sum::<f64>())
                .collect()
        })
        .collect()
}

fn rotate(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let theta = pos as f64 / base.powf(2.0 * i as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
    }
    out
}

/// Straightforward per-head loop over plain vectors.
#[allow(clippy::needless_range_loop)]
pub fn naive_mha(
    x: &Tensor<f64>,
    p: &AttentionParams<Tensor<f64>>,
    cfg: &ModelConfig,
    causal: bool,
) -> Tensor<f64> {
    let s = x.shape()[0];
    let rows: Vec<Vec<f64>> = (0..s).map(|i| x.row(i).to_vec()).collect();
    let q = linear(&rows, &p.query.weight, &p.query.bias);
    let k = linear(&rows, &p.key.weight, &p.key.bias);
    let v = linear(&rows, &p.value.weight, &p.value.bias);
    let hd = cfg.head_dim();
    let mut concat = vec![vec![0.0; cfg.d_model]; s];
    for h in 0..cfg.n_heads {
        let cut = |m: &Vec<Vec<f64>>, i: usize| m[i][h * hd..(h + 1) * hd].to_vec();
        for i in 0..s {
            let mut qi = cut(&q, i);
            if cfg.rope {
                qi = rotate(&qi, i, cfg.rope_base);
            }
            let allowed: Vec<usize> = (0..s).filter(|&j| !causal || j <= i).collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| {
                    let mut kj = cut(&k, j);
                    if cfg.rope {
                        kj = rotate(&kj, j, cfg.rope_base);
                    }
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (e, &j) in exps.iter().zip(&allowed) {
                for c in 0..hd {
                    concat[i][h * hd + c] += e / z * v[j][h * hd + c];
                }
            }
        }
    }
    let out = linear(&concat, &p.output.weight, &p.output.bias);
    Tensor::from_rows(&out).unwrap()
}

/// Noise-free straight-line corpus.
pub fn straight_lines(n_traj: usize, points: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_traj,
        points_per_traj: points,
        n_waypoints: 2,
        noise_sigma: 0.0,
        interval_std_s: 0.0,
        seed,
        ..Default::default()
    }
}

pub fn corpus(cfg: &SyntheticConfig) -> (Vec<Trajectory>, NormalizationParams) {
    let trajs: Vec<_> = generate_synthetic(cfg).unwrap().collect();
    let norm = compute_center(&trajs).unwrap();
    (trajs, norm)
}

pub fn batches(
    trajs: &[Trajectory],
    batch_size: usize,
    s_max: usize,
    norm: NormalizationParams,
) -> Vec<Batch> {
    batchify(trajs.iter().cloned().map(Ok), batch_size, s_max, norm)
        .unwrap()
        .map(|b| b.unwrap())
        .collect()
}

/// Replaces the zero-initialized head so outputs depend on the input.
pub fn randomize_head(model: &mut trajformer::TrajectoryModel<f64>, rng: &mut impl Rng) {
    let head = &mut model.params_mut().head;
    head.weight = random_tensor(rng, head.weight.shape()).map(|x| x * 0.5);
    head.bias = random_tensor(rng, head.bias.shape());
}
