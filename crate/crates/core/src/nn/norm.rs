//! Group normalization and weight standardization kernels.

use super::{NnError, Result};
use crate::tensor::Tensor;

/// Variance epsilon inside the group-norm square root.
pub const GROUP_NORM_EPS: f64 = 1e-5;
/// Variance epsilon inside the weight-standardization square root.
pub const WEIGHT_STD_EPS: f64 = 1e-10;

/// Group-normalize a batch `x` of shape `[batch, channels, ...]`.
///
/// Each group of `channels / groups` consecutive channels (across all
/// trailing positions) is shifted to mean zero and scaled to unit variance,
/// then the per-channel affine `scale * x_hat + shift` is applied.
pub fn group_norm_forward(x: &Tensor, groups: usize, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(NnError::InvalidHyper(format!(
            "group norm expects [batch, channels, ...], got {shape:?}"
        )));
    }
    let channels = shape[1];
    check_groups(channels, groups)?;
    if scale.len() != channels || shift.len() != channels {
        return Err(NnError::InvalidHyper(format!(
            "group norm affine needs {channels} entries, got scale {} shift {}",
            scale.len(),
            shift.len()
        )));
    }
    let per_item = x.len() / shape[0];
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; per_item];
    let mut inv_std = vec![0.0; groups];
    for b in 0..shape[0] {
        gn_forward(
            x.item(b),
            channels,
            groups,
            scale,
            shift,
            &mut out[b * per_item..(b + 1) * per_item],
            &mut xhat,
            &mut inv_std,
        );
    }
    Ok(Tensor::new(shape.to_vec(), out).expect("shape preserved"))
}

pub(crate) fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels % groups != 0 {
        return Err(NnError::GroupsDoNotDivide { channels, groups });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gn_forward(
    x: &[f64],
    channels: usize,
    groups: usize,
    scale: &[f64],
    shift: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    let spatial = x.len() / channels;
    let group_len = (channels / groups) * spatial;
    for g in 0..groups {
        let span = g * group_len..(g + 1) * group_len;
        let xs = &x[span.clone()];
        let n = group_len as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        inv_std[g] = inv;
        for (i, idx) in span.enumerate() {
            let c = idx / spatial;
            let h = (xs[i] - mean) * inv;
            xhat[idx] = h;
            out[idx] = scale[c] * h + shift[c];
        }
    }
}

/// Backpropagate through group normalization.
///
/// `dscale`/`dshift` are accumulated into; `dx` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gn_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    channels: usize,
    groups: usize,
    scale: &[f64],
    mut affine_grad: Option<(&mut [f64], &mut [f64])>,
    dx: Option<&mut [f64]>,
) {
    let spatial = dy.len() / channels;
    if let Some((dscale, dshift)) = affine_grad.as_mut() {
        for c in 0..channels {
            let span = c * spatial..(c + 1) * spatial;
            let mut s = 0.0;
            let mut t = 0.0;
            for i in span {
                s += dy[i] * xhat[i];
                t += dy[i];
            }
            dscale[c] += s;
            dshift[c] += t;
        }
    }
    let Some(dx) = dx else { return };
    let group_len = (channels / groups) * spatial;
    let n = group_len as f64;
    for g in 0..groups {
        let span = g * group_len..(g + 1) * group_len;
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in span.clone() {
            let d = dy[i] * scale[i / spatial];
            mean_d += d;
            mean_dx += d * xhat[i];
        }
        mean_d /= n;
        mean_dx /= n;
        for i in span {
            let d = dy[i] * scale[i / spatial];
            dx[i] = inv_std[g] * (d - mean_d - xhat[i] * mean_dx);
        }
    }
}

/// Standardize each output row of `w` (shape `[out, fan_in...]`) to mean
/// zero and unit population standard deviation.
pub fn weight_standardize(w: &Tensor) -> Result<Tensor> {
    let rows = w.shape()[0];
    let fan_in = w.len() / rows;
    if fan_in < 2 {
        return Err(NnError::FanInTooSmall(fan_in));
    }
    let mut out = vec![0.0; w.len()];
    let mut inv = vec![0.0; rows];
    ws_forward(w.data(), rows, &mut out, &mut inv);
    Ok(Tensor::new(w.shape().to_vec(), out).expect("shape preserved"))
}

pub(crate) fn ws_forward(w: &[f64], rows: usize, out: &mut [f64], inv_std: &mut [f64]) {
    let fan_in = w.len() / rows;
    let n = fan_in as f64;
    for r in 0..rows {
        let row = &w[r * fan_in..(r + 1) * fan_in];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + WEIGHT_STD_EPS).sqrt();
        inv_std[r] = inv;
        for (o, v) in out[r * fan_in..(r + 1) * fan_in].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
}

/// Map a gradient w.r.t. standardized weights back to raw weights,
/// accumulating into `dw`.
pub(crate) fn ws_backward(dw_hat: &[f64], w_hat: &[f64], inv_std: &[f64], dw: &mut [f64]) {
    let rows = inv_std.len();
    let fan_in = w_hat.len() / rows;
    let n = fan_in as f64;
    for r in 0..rows {
        let span = r * fan_in..(r + 1) * fan_in;
        let g = &dw_hat[span.clone()];
        let h = &w_hat[span.clone()];
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gh = g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, gi), hi) in dw[span].iter_mut().zip(g).zip(h) {
            *d += inv_std[r] * (gi - mean_g - hi * mean_gh);
        }
    }
}
