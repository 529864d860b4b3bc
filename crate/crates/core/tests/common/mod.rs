//! Independent oracles shared by the integration tests and the acceptance
//! suite.

#![allow(dead_code)]

use dpft::nn::arch::{mlp, reference_cnn, CnnSpec};
use dpft::nn::Model;
use dpft::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale. Central-difference
/// round-off at `FD_STEP` is about `1e-10 * |loss|`.
pub const FD_FLOOR: f64 = 1e-2;

pub fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A random network with at most 500 parameters: an MLP or a small CNN
/// (optionally with weight standardization).
pub fn random_small_model(rng: &mut ChaCha8Rng) -> Model {
    let mut m = if rng.random::<bool>() {
        let input = rng.random_range(3..8);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..9)).collect();
        mlp(input, &hidden, rng.random_range(2..5), rng).unwrap()
    } else {
        let channels = [2, 4][rng.random_range(0..2)];
        let spec = CnnSpec {
            input: [rng.random_range(1..3), 6, 6],
            stem_channels: channels,
            kernel: 3,
            groups: [1, 2][rng.random_range(0..2)],
            pool: 2,
            hidden: rng.random_range(3..6),
            classes: rng.random_range(2..4),
            weight_standardization: rng.random::<bool>(),
        };
        reference_cnn(&spec, rng).unwrap()
    };
    // Zero biases behind a dead ReLU layer put later units exactly on the
    // kink, where finite differences see the one-sided slope.
    let p: Vec<f64> = m
        .params_flat()
        .iter()
        .map(|v| v + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    m.set_params_flat(&p).unwrap();
    m
}

pub fn random_batch(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let item: usize = model.input_shape().iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(model.input_shape());
    let x = Tensor::new(shape, normal_vec(n * item, rng)).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..model.num_classes())).collect();
    (x, labels)
}

/// Largest relative error between backprop and central differences of the
/// loss, over every example and parameter.
pub fn max_fd_error(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let grads = model.backward_per_example(x, labels).unwrap();
    let base = model.params_flat();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for j in 0..base.len() {
        let mut p = base.clone();
        p[j] = base[j] + FD_STEP;
        probe.set_params_flat(&p).unwrap();
        let plus: Vec<f64> = {
            let e = probe.evaluator();
            (0..labels.len()).map(|i| e.loss(x.item(i), labels[i]).unwrap()).collect()
        };
        p[j] = base[j] - FD_STEP;
        probe.set_params_flat(&p).unwrap();
        let e = probe.evaluator();
        for (i, &label) in labels.iter().enumerate() {
            let minus = e.loss(x.item(i), label).unwrap();
            let fd = (plus[i] - minus) / (2.0 * FD_STEP);
            let bp = grads.row(i)[j];
            let err = (fd - bp).abs() / fd.abs().max(bp.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    m + s.ln()
}

/// RDP of order `alpha` of the Poisson-subsampled Gaussian by numerical
/// integration:
/// `ln( integral N(z; 0, s^2) * (1 - q + q exp((2z - 1) / (2 s^2)))^alpha dz ) / (alpha - 1)`,
/// evaluated with the trapezoid rule in log space.
pub fn rdp_by_integration(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let lo = -(30.0 * sigma + 1.0);
    let hi = alpha + 30.0 * sigma + 1.0;
    let h = sigma / 200.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let terms: Vec<f64> = (0..=n)
        .map(|i| {
            let z = lo + i as f64 * h;
            let log_mu0 = log_norm - z * z / (2.0 * s2);
            let log_ratio = (q * ((2.0 * z - 1.0) / (2.0 * s2)).exp_m1()).ln_1p();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            log_mu0 + alpha * log_ratio + (w * h).ln()
        })
        .collect();
    log_sum_exp(&terms) / (alpha - 1.0)
}

/// Epsilon of one step of the plain Gaussian mechanism with `sigma = 1` at
/// the continuous optimum `alpha* = 1 + sqrt(2 ln(1/delta))`.
pub fn gaussian_closed_form_epsilon(delta: f64) -> f64 {
    let l = (1.0 / delta).ln();
    let a = 1.0 + (2.0 * l).sqrt();
    a / 2.0 + l / (a - 1.0)
}

/// Brute-force sensitivity: the largest L2 change of the clipped pre-noise
/// sum over every single-example replacement in a 3-example batch.
pub fn max_replacement_change(
    model: &Model,
    views: &[Tensor],
    labels: &[usize],
    replacement: (&Tensor, usize),
    clip_norm: f64,
) -> f64 {
    use dpft::optim::{clipped_example_grads, l2_norm, pre_noise_sum, ClipConfig, PrivateBatch};
    let mask = vec![true; model.num_params()];
    let clip = ClipConfig::new(clip_norm).unwrap();
    let sum_of = |views: Vec<Tensor>, labels: Vec<usize>| {
        let (g, _, _) = clipped_example_grads(model, &PrivateBatch { views, labels }, &mask, clip).unwrap();
        pre_noise_sum(&g)
    };
    let base = sum_of(views.to_vec(), labels.to_vec());
    let mut worst: f64 = 0.0;
    for i in 0..views.len() {
        let mut v = views.to_vec();
        let mut l = labels.to_vec();
        v[i] = replacement.0.clone();
        l[i] = replacement.1;
        let diff: Vec<f64> = sum_of(v, l).iter().zip(&base).map(|(a, b)| a - b).collect();
        worst = worst.max(l2_norm(&diff));
    }
    worst
}

/// `k` random views `[k, ...input]` of one example.
pub fn random_views(model: &Model, k: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let item: usize = model.input_shape().iter().product();
    let mut shape = vec![k];
    shape.extend_from_slice(model.input_shape());
    let data = normal_vec(k * item, rng).into_iter().map(|v| v * scale).collect();
    Tensor::new(shape, data).unwrap()
}
