//! Reference architectures and parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Layer, Model, Result};
use crate::tensor::Tensor;

/// The small reference CNN:
/// `conv -> groupnorm -> relu -> meanpool -> flatten -> dense -> relu -> dense`.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    /// Per-example input `[channels, height, width]`.
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub kernel: usize,
    pub groups: usize,
    pub pool: usize,
    pub hidden: usize,
    pub classes: usize,
    pub weight_standardization: bool,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            input: [1, 12, 12],
            stem_channels: 8,
            kernel: 3,
            groups: 4,
            pool: 2,
            hidden: 32,
            classes: 10,
            weight_standardization: false,
        }
    }
}

/// He-normal weight tensor of the given shape (fan-in is all but dim 0).
pub fn he_normal<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let fan_in = n / shape[0];
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn reference_cnn<R: Rng + ?Sized>(spec: &CnnSpec, rng: &mut R) -> Result<Model> {
    let [c, h, w] = spec.input;
    let k = spec.kernel;
    let pad = k / 2;
    let stem = Layer::conv2d(
        "stem",
        he_normal(vec![spec.stem_channels, c, k, k], rng),
        Tensor::zeros(vec![spec.stem_channels]),
        1,
        pad,
    )?
    .with_standardization(spec.weight_standardization)?;
    let conv_h = h + 2 * pad - k + 1;
    let conv_w = w + 2 * pad - k + 1;
    let flat = spec.stem_channels * (conv_h / spec.pool.max(1)) * (conv_w / spec.pool.max(1));
    let fc = Layer::dense(
        "fc",
        he_normal(vec![spec.hidden, flat], rng),
        Tensor::zeros(vec![spec.hidden]),
    )?
    .with_standardization(spec.weight_standardization)?;
    let head = Layer::dense(
        "head",
        he_normal(vec![spec.classes, spec.hidden], rng),
        Tensor::zeros(vec![spec.classes]),
    )?;
    Model::new(
        spec.input.to_vec(),
        vec![
            stem,
            Layer::group_norm("stem_norm", spec.stem_channels, spec.groups)?,
            Layer::relu("stem_act"),
            Layer::mean_pool("pool", spec.pool)?,
            Layer::flatten("flatten"),
            fc,
            Layer::relu("fc_act"),
            head,
        ],
    )
}

/// Fully-connected network `in -> hidden... -> classes` with ReLU between.
pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: &[usize], classes: usize, rng: &mut R) -> Result<Model> {
    let mut layers = Vec::new();
    let mut prev = input;
    for (i, &width) in hidden.iter().enumerate() {
        layers.push(Layer::dense(
            format!("fc{i}"),
            he_normal(vec![width, prev], rng),
            Tensor::zeros(vec![width]),
        )?);
        layers.push(Layer::relu(format!("act{i}")));
        prev = width;
    }
    layers.push(Layer::dense(
        "head",
        he_normal(vec![classes, prev], rng),
        Tensor::zeros(vec![classes]),
    )?);
    Model::new(vec![input], layers)
}
