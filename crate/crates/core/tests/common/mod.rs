#![allow(dead_code)]

use ltlab::losses::{ClassCounts, LossKind, LossSpec, PreparedLoss};
use ltlab::numerics::{Matrix, Rng};
use ltlab::training::{loss_and_gradient, mean_loss, ModelParams};

pub const FD_STEP: f64 = 1e-6;
/// Below this gradient scale the error is effectively absolute: a saturated
/// softmax has entries near 1e-12 that central differences cannot resolve.
pub const NORM_FLOOR: f64 = 1e-2;

/// Central difference of `f` along every coordinate of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Normwise relative error `max|a - n| / max(max|a|, max|n|)`. Per-entry
/// ratios are dominated by cancellation noise on entries near zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(NORM_FLOOR)
}

pub fn random_counts(rng: &mut Rng, k: usize, max: usize) -> ClassCounts {
    ClassCounts::new((0..k).map(|_| 1 + rng.below(max) as u64).collect()).unwrap()
}

pub fn random_logits(rng: &mut Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.normal()).collect()
}

pub fn loss_spec(kind: LossKind, rng: &mut Rng, k: usize) -> LossSpec {
    match kind {
        LossKind::CbwSoftmaxCe => LossSpec::new(kind)
            .with_class_weights((0..k).map(|_| rng.uniform_range(0.2, 3.0)).collect()),
        LossKind::BalancedSoftmax => LossSpec::new(kind).with_tau(rng.uniform_range(0.25, 1.5)),
        _ => LossSpec::new(kind),
    }
}

/// Flattened parameter vector: layer weights, biases, then log LWS scales.
pub fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &p.layers {
        v.extend_from_slice(l.weights.data());
        v.extend_from_slice(&l.bias);
    }
    if let Some(s) = &p.lws_scales {
        v.extend(s.iter().map(|x| x.ln()));
    }
    v
}

pub fn unflatten(template: &ModelParams, v: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut at = 0;
    for l in &mut p.layers {
        let (r, c) = (l.weights.rows(), l.weights.cols());
        l.weights = Matrix::new(r, c, v[at..at + r * c].to_vec()).unwrap();
        at += r * c;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&v[at..at + nb]);
        at += nb;
    }
    if let Some(s) = &mut p.lws_scales {
        for x in s.iter_mut() {
            *x = v[at].exp();
            at += 1;
        }
    }
    p
}

pub fn flatten_grad(g: &ltlab::training::Gradients) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &g.layers {
        v.extend_from_slice(l.weights.data());
        v.extend_from_slice(&l.bias);
    }
    if let Some(s) = &g.log_scales {
        v.extend_from_slice(s);
    }
    v
}

/// Max relative error between backprop and central differences of the mean
/// loss over all parameters of `params`.
pub fn model_grad_check(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    loss: &PreparedLoss,
) -> f64 {
    let (_, g) = loss_and_gradient(params, features, labels, loss).unwrap();
    let analytic = flatten_grad(&g);
    let numeric = central_diff(&flatten(params), |v| {
        mean_loss(&unflatten(params, v), features, labels, loss).unwrap()
    });
    max_rel_err(&analytic, &numeric)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}
