//! Layer definitions and their single-example forward/backward kernels.

use super::norm::{check_groups, gn_backward, gn_forward};
use super::{NnError, Result};
use crate::tensor::Tensor;

/// What a layer computes, together with the parameters it owns.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `y = W x + b` with `W` of shape `[out, in]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
        standardize: bool,
    },
    /// 2-D cross-correlation, `W` of shape `[out, in, k, k]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        standardize: bool,
    },
    GroupNorm {
        groups: usize,
        scale: Tensor,
        shift: Tensor,
    },
    Relu,
    Flatten,
    /// Non-overlapping `size x size` average pooling.
    MeanPool { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn dense(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Result<Self> {
        let name = name.into();
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(NnError::InvalidHyper(format!(
                "{name}: dense weight {:?} / bias {:?} inconsistent",
                ws,
                bias.shape()
            )));
        }
        Ok(Self {
            name,
            kind: LayerKind::Dense {
                weight,
                bias,
                standardize: false,
            },
        })
    }

    pub fn conv2d(
        name: impl Into<String>,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let name = name.into();
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || bias.shape() != [ws[0]] || stride == 0 {
            return Err(NnError::InvalidHyper(format!(
                "{name}: conv weight {:?} / bias {:?} / stride {stride} inconsistent",
                ws,
                bias.shape()
            )));
        }
        Ok(Self {
            name,
            kind: LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
                standardize: false,
            },
        })
    }

    pub fn group_norm(name: impl Into<String>, channels: usize, groups: usize) -> Result<Self> {
        check_groups(channels, groups)?;
        Ok(Self {
            name: name.into(),
            kind: LayerKind::GroupNorm {
                groups,
                scale: Tensor::filled(vec![channels], 1.0),
                shift: Tensor::zeros(vec![channels]),
            },
        })
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Flatten,
        }
    }

    pub fn mean_pool(name: impl Into<String>, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(NnError::InvalidHyper("mean pool size must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            kind: LayerKind::MeanPool { size },
        })
    }

    /// Turn weight standardization on or off (dense and conv layers only).
    pub fn with_standardization(mut self, on: bool) -> Result<Self> {
        match &mut self.kind {
            LayerKind::Dense {
                weight, standardize, ..
            }
            | LayerKind::Conv2d {
                weight, standardize, ..
            } => {
                let fan_in = weight.len() / weight.shape()[0];
                if on && fan_in < 2 {
                    return Err(NnError::FanInTooSmall(fan_in));
                }
                *standardize = on;
                Ok(self)
            }
            _ => Err(NnError::InvalidHyper(format!(
                "{}: weight standardization needs a dense or conv layer",
                self.name
            ))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::GroupNorm { .. } => "groupnorm",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::MeanPool { .. } => "meanpool",
        }
    }

    /// Named parameter tensors in their canonical flattening order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.kind {
            LayerKind::Dense { weight, bias, .. } | LayerKind::Conv2d { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            LayerKind::GroupNorm { scale, shift, .. } => vec![("scale", scale), ("shift", shift)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.kind {
            LayerKind::Dense { weight, bias, .. } | LayerKind::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            LayerKind::GroupNorm { scale, shift, .. } => vec![scale, shift],
            _ => Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn has_params(&self) -> bool {
        self.num_params() > 0
    }

    pub(crate) fn standardized_weight(&self) -> Option<&Tensor> {
        match &self.kind {
            LayerKind::Dense {
                weight,
                standardize: true,
                ..
            }
            | LayerKind::Conv2d {
                weight,
                standardize: true,
                ..
            } => Some(weight),
            _ => None,
        }
    }

    /// Per-example output shape for a given per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: String| NnError::Shape {
            layer: self.name.clone(),
            expected,
            actual: input.to_vec(),
        };
        match &self.kind {
            LayerKind::Dense { weight, .. } => {
                let ws = weight.shape();
                if input != [ws[1]] {
                    return Err(mismatch(format!("[{}]", ws[1])));
                }
                Ok(vec![ws[0]])
            }
            LayerKind::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let ws = weight.shape();
                let k = ws[2];
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(mismatch(format!("[{}, H, W]", ws[1])));
                }
                if input[1] + 2 * padding < k || input[2] + 2 * padding < k {
                    return Err(mismatch(format!("spatial size >= {k} after padding")));
                }
                let out = |n: usize| (n + 2 * padding - k) / stride + 1;
                Ok(vec![ws[0], out(input[1]), out(input[2])])
            }
            LayerKind::GroupNorm { scale, .. } => {
                if input.is_empty() || input[0] != scale.len() {
                    return Err(mismatch(format!("[{}, ...]", scale.len())));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::MeanPool { size } => {
                if input.len() != 3 || input[1] < *size || input[2] < *size {
                    return Err(mismatch(format!("[C, H >= {size}, W >= {size}]")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
        }
    }
}

/// Auxiliary values a backward pass needs beyond the layer input.
#[derive(Debug, Clone, Default)]
pub(crate) struct Aux {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Forward one example. `weight` is the effective (possibly standardized)
/// weight buffer for dense/conv layers.
pub(crate) fn forward_example(
    layer: &Layer,
    weight: Option<&[f64]>,
    input: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    aux: &mut Aux,
) -> Vec<f64> {
    let out_len: usize = out_shape.iter().product();
    match &layer.kind {
        LayerKind::Dense { bias, .. } => {
            let w = weight.expect("dense weight");
            let n = input.len();
            bias.data()
                .iter()
                .enumerate()
                .map(|(o, b)| b + dot(&w[o * n..(o + 1) * n], input))
                .collect()
        }
        LayerKind::Conv2d {
            bias,
            stride,
            padding,
            ..
        } => {
            let w = weight.expect("conv weight");
            let mut out = vec![0.0; out_len];
            conv_forward(w, bias.data(), input, in_shape, out_shape, *stride, *padding, &mut out);
            out
        }
        LayerKind::GroupNorm { groups, scale, shift } => {
            let channels = in_shape[0];
            let mut out = vec![0.0; out_len];
            aux.xhat.resize(input.len(), 0.0);
            aux.inv_std.resize(*groups, 0.0);
            gn_forward(
                input,
                channels,
                *groups,
                scale.data(),
                shift.data(),
                &mut out,
                &mut aux.xhat,
                &mut aux.inv_std,
            );
            out
        }
        LayerKind::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::Flatten => input.to_vec(),
        LayerKind::MeanPool { size } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let norm = 1.0 / (size * size) as f64;
            let mut out = vec![0.0; out_len];
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for di in 0..*size {
                            let row = &input[(ch * h + i * size + di) * w..];
                            acc += row[j * size..(j + 1) * size].iter().sum::<f64>();
                        }
                        out[(ch * oh + i) * ow + j] = acc * norm;
                    }
                }
            }
            out
        }
    }
}

/// Backward one example.
///
/// Parameter gradients (w.r.t. the effective weight for standardized layers)
/// are accumulated into `param_grad` when it is given. Returns the gradient
/// w.r.t. the layer input when `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_example(
    layer: &Layer,
    weight: Option<&[f64]>,
    input: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    aux: &Aux,
    dy: &[f64],
    param_grad: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Vec<f64>> {
    match &layer.kind {
        LayerKind::Dense { .. } => {
            let w = weight.expect("dense weight");
            let n = input.len();
            if let Some(g) = param_grad {
                let (gw, gb) = g.split_at_mut(w.len());
                for (o, &d) in dy.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (gwi, xi) in gw[o * n..(o + 1) * n].iter_mut().zip(input) {
                        *gwi += d * xi;
                    }
                    gb[o] += d;
                }
            }
            need_dx.then(|| {
                let mut dx = vec![0.0; n];
                for (o, &d) in dy.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (dxi, wi) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                        *dxi += d * wi;
                    }
                }
                dx
            })
        }
        LayerKind::Conv2d { stride, padding, .. } => {
            let w = weight.expect("conv weight");
            let mut dx = need_dx.then(|| vec![0.0; input.len()]);
            conv_backward(
                w,
                input,
                in_shape,
                out_shape,
                *stride,
                *padding,
                dy,
                param_grad,
                dx.as_deref_mut(),
            );
            dx
        }
        LayerKind::GroupNorm { groups, scale, .. } => {
            let channels = in_shape[0];
            let affine = param_grad.map(|g| g.split_at_mut(channels));
            let mut dx = need_dx.then(|| vec![0.0; input.len()]);
            gn_backward(
                dy,
                &aux.xhat,
                &aux.inv_std,
                channels,
                *groups,
                scale.data(),
                affine,
                dx.as_deref_mut(),
            );
            dx
        }
        LayerKind::Relu => need_dx.then(|| {
            dy.iter()
                .zip(input)
                .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                .collect()
        }),
        LayerKind::Flatten => need_dx.then(|| dy.to_vec()),
        LayerKind::MeanPool { size } => need_dx.then(|| {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let norm = 1.0 / (size * size) as f64;
            let mut dx = vec![0.0; input.len()];
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = dy[(ch * oh + i) * ow + j] * norm;
                        for di in 0..*size {
                            let base = (ch * h + i * size + di) * w + j * size;
                            for v in &mut dx[base..base + size] {
                                *v = g;
                            }
                        }
                    }
                }
            }
            dx
        }),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Range of kernel offsets `k` with `0 <= o*stride + k - pad < n`.
#[inline]
fn kernel_span(o: usize, stride: usize, pad: usize, k: usize, n: usize) -> (usize, usize) {
    let start = o * stride;
    let lo = pad.saturating_sub(start);
    let hi = (n + pad).saturating_sub(start).min(k);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    w: &[f64],
    bias: &[f64],
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let (cin, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = (w.len() / (cout * cin)).isqrt();
    for o in 0..cout {
        let wo = &w[o * cin * k * k..(o + 1) * cin * k * k];
        for i in 0..oh {
            let (kh_lo, kh_hi) = kernel_span(i, stride, pad, k, h);
            for j in 0..ow {
                let (kw_lo, kw_hi) = kernel_span(j, stride, pad, k, wd);
                let mut acc = bias[o];
                for c in 0..cin {
                    for kh in kh_lo..kh_hi {
                        let row = (c * h + i * stride + kh - pad) * wd + j * stride;
                        let wrow = (c * k + kh) * k;
                        for kw in kw_lo..kw_hi {
                            acc += wo[wrow + kw] * x[row + kw - pad];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    dy: &[f64],
    param_grad: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let (cin, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = (w.len() / (cout * cin)).isqrt();
    let (mut gw, mut gb) = match param_grad {
        Some(g) => {
            let (a, b) = g.split_at_mut(w.len());
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    for o in 0..cout {
        let base = o * cin * k * k;
        for i in 0..oh {
            let (kh_lo, kh_hi) = kernel_span(i, stride, pad, k, h);
            for j in 0..ow {
                let d = dy[(o * oh + i) * ow + j];
                if d == 0.0 {
                    continue;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[o] += d;
                }
                let (kw_lo, kw_hi) = kernel_span(j, stride, pad, k, wd);
                for c in 0..cin {
                    for kh in kh_lo..kh_hi {
                        // `+ j*stride - pad` cannot underflow: kw_lo absorbs it.
                        let row = (c * h + i * stride + kh - pad) * wd + j * stride;
                        let wrow = base + (c * k + kh) * k;
                        for kw in kw_lo..kw_hi {
                            let xi = row + kw - pad;
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[wrow + kw] += d * x[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] += d * w[wrow + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}
