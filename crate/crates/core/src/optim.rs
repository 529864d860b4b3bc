//! DP-SGD step machinery.
//!
//! The per-step gradient pipeline is fixed:
//! per-example backward -> average over augmented views -> per-example clip
//! -> sum + Gaussian noise -> divide by the expected batch size -> masked
//! update.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::nn::PerExampleGrads;
use crate::nn::{Model, NnError};
use crate::tensor::Tensor;

/// Default EMA decay applied after every step.
pub const DEFAULT_EMA_DECAY: f64 = 0.999;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient contains non-finite values")]
    NonFinite,
    #[error("noisy aggregation requires clipped per-example gradients")]
    Unclipped,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = OptimError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> OptimError {
    OptimError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub clip_norm: f64,
}

impl ClipConfig {
    pub fn new(clip_norm: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(invalid(format!("clip norm must be > 0, got {clip_norm}")));
        }
        Ok(Self { clip_norm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub noise_multiplier: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(noise_multiplier: f64, seed: u64) -> Result<Self> {
        if !(noise_multiplier >= 0.0) || noise_multiplier.is_infinite() {
            return Err(invalid(format!(
                "noise multiplier must be finite and >= 0, got {noise_multiplier}"
            )));
        }
        Ok(Self {
            noise_multiplier,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub learning_rate: f64,
    /// `q * N`; the noisy sum is divided by this, not by the realized size.
    pub expected_batch_size: f64,
    pub augment_multiplicity: usize,
}

impl StepConfig {
    pub fn new(learning_rate: f64, expected_batch_size: f64, augment_multiplicity: usize) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(invalid(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(expected_batch_size > 0.0) || !expected_batch_size.is_finite() {
            return Err(invalid(format!(
                "expected batch size must be > 0, got {expected_batch_size}"
            )));
        }
        if augment_multiplicity == 0 {
            return Err(invalid("augmentation multiplicity must be >= 1"));
        }
        Ok(Self {
            learning_rate,
            expected_batch_size,
            augment_multiplicity,
        })
    }
}

/// Include each of `0..dataset_size` independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(dataset_size: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("sampling rate must lie in [0, 1], got {q}")));
    }
    Ok((0..dataset_size).filter(|_| rng.random::<f64>() < q).collect())
}

/// Arithmetic mean of the gradients of one example's augmented views.
pub fn augmentation_average<T: AsRef<[f64]>>(grads_per_aug: &[T]) -> Result<Vec<f64>> {
    let Some(first) = grads_per_aug.first() else {
        return Err(invalid("augmentation multiplicity must be >= 1"));
    };
    let d = first.as_ref().len();
    let mut mean = vec![0.0; d];
    for row in grads_per_aug {
        let row = row.as_ref();
        if row.len() != d {
            return Err(OptimError::LengthMismatch {
                expected: d,
                actual: row.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let k = grads_per_aug.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    Ok(mean)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g * min(1, C / ||g||)`.
pub fn clip(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm)?;
    Ok(out)
}

pub fn clip_in_place(g: &mut [f64], clip_norm: f64) -> Result<()> {
    if !(clip_norm > 0.0) {
        return Err(invalid(format!("clip norm must be > 0, got {clip_norm}")));
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(OptimError::NonFinite);
    }
    let norm = l2_norm(g);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

/// Clip every row of `grads` and mark the result as clipped.
pub fn clip_rows(grads: &PerExampleGrads, clip_norm: f64) -> Result<PerExampleGrads> {
    let mut out = PerExampleGrads::new(grads.dim());
    for row in grads.rows() {
        out.push_row(&clip(row, clip_norm)?);
    }
    out.mark_clipped();
    Ok(out)
}

/// Ordered sum of the rows (the pre-noise query answer).
pub fn pre_noise_sum(grads: &PerExampleGrads) -> Vec<f64> {
    let mut sum = vec![0.0; grads.dim()];
    for row in grads.rows() {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    sum
}

/// `d` independent draws of `N(0, std^2)`.
fn gaussian_vector<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// `(sum_i g_i + N(0, sigma^2 C^2 I)) / B`.
pub fn noisy_aggregate<R: Rng + ?Sized>(
    clipped: &PerExampleGrads,
    clip_norm: f64,
    noise_multiplier: f64,
    expected_batch_size: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !clipped.is_clipped() {
        return Err(OptimError::Unclipped);
    }
    if !(expected_batch_size > 0.0) {
        return Err(invalid(format!(
            "expected batch size must be > 0, got {expected_batch_size}"
        )));
    }
    let noise = gaussian_vector(clipped.dim(), noise_multiplier * clip_norm, rng);
    let mut out = pre_noise_sum(clipped);
    for (o, z) in out.iter_mut().zip(&noise) {
        *o = (*o + z) / expected_batch_size;
    }
    Ok(out)
}

/// The dedicated Gaussian noise stream of a private run.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seeded from the operating system instead of a fixed seed.
    pub fn nondeterministic() -> Self {
        Self {
            rng: ChaCha8Rng::from_rng(&mut rand::rng()),
        }
    }

    pub fn draw(&mut self, d: usize, std: f64) -> Vec<f64> {
        gaussian_vector(d, std, &mut self.rng)
    }
}

/// A Poisson batch: one `[K, ...input]` tensor of augmented views per
/// example.
#[derive(Debug, Clone, Default)]
pub struct PrivateBatch {
    pub views: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl PrivateBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Diagnostics of one DP-SGD step. The loss is computed on private data and
/// is not itself privatized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub batch_size: usize,
    pub mean_loss: f64,
    /// L2 norm of the injected noise restricted to trainable coordinates.
    pub noise_norm: f64,
    pub clipped_fraction: f64,
}

fn layer_flags(model: &Model, mask: &[bool]) -> Vec<bool> {
    (0..model.layers().len())
        .map(|i| mask[model.param_range(i)].iter().any(|&m| m))
        .collect()
}

/// Augmentation-averaged, clipped gradients of every example in `batch`.
///
/// Coordinates outside `mask` are zero, so the clip bounds the norm of the
/// trainable part. Also returns the summed loss over all views and the
/// number of rows that were actually scaled down.
pub fn clipped_example_grads(
    model: &Model,
    batch: &PrivateBatch,
    mask: &[bool],
    clip_cfg: ClipConfig,
) -> Result<(PerExampleGrads, f64, usize)> {
    let d = model.num_params();
    if mask.len() != d {
        return Err(OptimError::LengthMismatch {
            expected: d,
            actual: mask.len(),
        });
    }
    if batch.views.len() != batch.labels.len() {
        return Err(OptimError::LengthMismatch {
            expected: batch.labels.len(),
            actual: batch.views.len(),
        });
    }
    let flags = layer_flags(model, mask);
    let eval = model.evaluator();
    let rows = batch
        .views
        .par_iter()
        .zip(batch.labels.par_iter())
        .map(|(views, &label)| {
            let k = views.batch_len();
            let mut mean = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            let mut loss = 0.0;
            for v in 0..k {
                loss += eval.gradient(views.item(v), label, Some(&flags), &mut scratch)?;
                for ((m, s), &on) in mean.iter_mut().zip(&scratch).zip(mask) {
                    if on {
                        *m += s;
                    }
                }
            }
            let inv_k = 1.0 / k as f64;
            for m in &mut mean {
                *m *= inv_k;
            }
            let scaled = l2_norm(&mean) > clip_cfg.clip_norm;
            clip_in_place(&mut mean, clip_cfg.clip_norm)?;
            Ok((mean, loss, scaled))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = PerExampleGrads::new(d);
    let mut loss = 0.0;
    let mut scaled = 0;
    for (row, l, s) in &rows {
        grads.push_row(row);
        loss += l;
        scaled += usize::from(*s);
    }
    grads.mark_clipped();
    Ok((grads, loss, scaled))
}

/// One DP-SGD step. Only coordinates where `mask` is true move; every other
/// parameter is left bitwise unchanged. An empty batch yields a noise-only
/// update. Exactly `d` Gaussian draws are taken from `noise` per call.
pub fn dp_sgd_step(
    model: &Model,
    batch: &PrivateBatch,
    mask: &[bool],
    clip_cfg: ClipConfig,
    noise_multiplier: f64,
    step_cfg: StepConfig,
    noise: &mut NoiseStream,
) -> Result<(Model, StepStats)> {
    for views in &batch.views {
        if views.batch_len() != step_cfg.augment_multiplicity {
            return Err(invalid(format!(
                "expected {} augmented views per example, got {}",
                step_cfg.augment_multiplicity,
                views.batch_len()
            )));
        }
    }
    let (grads, loss_sum, scaled) = clipped_example_grads(model, batch, mask, clip_cfg)?;
    let d = model.num_params();
    let sum = pre_noise_sum(&grads);
    let z = noise.draw(d, noise_multiplier * clip_cfg.clip_norm);

    let mut params = model.params_flat();
    let mut noise_sq = 0.0;
    for j in 0..d {
        if mask[j] {
            noise_sq += z[j] * z[j];
            let g = (sum[j] + z[j]) / step_cfg.expected_batch_size;
            params[j] -= step_cfg.learning_rate * g;
        }
    }
    if !params.iter().all(|v| v.is_finite()) {
        return Err(OptimError::NonFinite);
    }
    let mut next = model.clone();
    next.set_params_flat(&params)?;

    let n = batch.len();
    let views = (n * step_cfg.augment_multiplicity) as f64;
    Ok((
        next,
        StepStats {
            batch_size: n,
            mean_loss: if n == 0 { 0.0 } else { loss_sum / views },
            noise_norm: noise_sq.sqrt(),
            clipped_fraction: if n == 0 { 0.0 } else { scaled as f64 / n as f64 },
        },
    ))
}

/// Exponential moving average of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    decay: f64,
    shadow: Vec<f64>,
}

impl EmaState {
    pub fn new(decay: f64, initial: Vec<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: initial,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    /// `shadow <- mu * shadow + (1 - mu) * theta`.
    pub fn update(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.shadow.len() {
            return Err(OptimError::LengthMismatch {
                expected: self.shadow.len(),
                actual: theta.len(),
            });
        }
        let mu = self.decay;
        for (s, t) in self.shadow.iter_mut().zip(theta) {
            *s = mu * *s + (1.0 - mu) * t;
        }
        Ok(())
    }
}

pub fn ema_update(ema: &EmaState, theta: &[f64]) -> Result<EmaState> {
    let mut next = ema.clone();
    next.update(theta)?;
    Ok(next)
}
