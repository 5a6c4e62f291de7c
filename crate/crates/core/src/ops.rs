//! Forward and backward kernels for the fixed set of primitives the
//! auto-encoder is assembled from.
//!
//! Every convolution here is stride 1 with zero "same" padding: a filter of
//! length `a` is padded by `floor((a - 1) / 2)` zeros on the left and the rest
//! on the right, so output length equals input length.

use crate::error::{Error, Result};
use crate::real::{axpy, dot, Real};
use crate::tensor::{BatchNormParams, FilterSetParams, Tensor3};

/// Left padding for a "same" convolution with a filter of length `filter_len`.
#[inline]
pub fn left_pad(filter_len: usize) -> usize {
    (filter_len - 1) / 2
}

/// For tap `tau`, the range of output positions `t` whose input sample
/// `t + tau - pad` lies inside `[0, len)`, and the signed input shift.
#[inline]
fn tap_window(tau: usize, pad: usize, len: usize) -> Option<(usize, usize, isize)> {
    let shift = tau as isize - pad as isize;
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 { len.saturating_sub(shift as usize) } else { len };
    if lo >= hi {
        None
    } else {
        Some((lo, hi, shift))
    }
}

#[inline]
fn offset(i: usize, shift: isize) -> usize {
    (i as isize + shift) as usize
}

/// Gradients of a filter set.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> FilterGrad<T> {
    pub fn zeros_like(params: &FilterSetParams<T>) -> Self {
        FilterGrad {
            weights: vec![T::zero(); params.weights.len()],
            bias: vec![T::zero(); params.bias.len()],
        }
    }

    pub(crate) fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += *b;
        }
    }
}

/// Gradients of batch-norm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct NormGrad<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> NormGrad<T> {
    pub(crate) fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.gamma.iter_mut().zip(&other.gamma) {
            *a += *b;
        }
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            *a += *b;
        }
    }
}

/// Values a batch-norm backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor3<T>,
    pub inv_std: Vec<T>,
}

// ---------------------------------------------------------------------------
// convolution

pub fn conv1d<T: Real>(input: &Tensor3<T>, params: &FilterSetParams<T>) -> Result<Tensor3<T>> {
    if input.channels() != params.in_channels {
        return Err(Error::config(format!(
            "conv1d expects {} input channels, got {}",
            params.in_channels,
            input.channels()
        )));
    }
    if params.bias.len() != params.num_filters {
        return Err(Error::config(format!(
            "conv1d bias has {} entries for {} filters",
            params.bias.len(),
            params.num_filters
        )));
    }
    input.ensure_finite("conv1d input")?;

    let (batch, channels, len) = input.shape();
    let pad = left_pad(params.filter_len);
    let mut out = Tensor3::zeros(batch, params.num_filters, len);
    for b in 0..batch {
        for k in 0..params.num_filters {
            let row = out.row_mut(b, k);
            row.fill(params.bias[k]);
            for c in 0..channels {
                let x = input.row(b, c);
                let taps = params.taps(k, c);
                for (tau, &w) in taps.iter().enumerate() {
                    if let Some((lo, hi, shift)) = tap_window(tau, pad, len) {
                        axpy(w, &x[offset(lo, shift)..offset(hi, shift)], &mut row[lo..hi]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_params)` for [`conv1d`].
pub fn conv1d_backward<T: Real>(
    input: &Tensor3<T>,
    params: &FilterSetParams<T>,
    grad_out: &Tensor3<T>,
) -> (Tensor3<T>, FilterGrad<T>) {
    let (batch, channels, len) = input.shape();
    let pad = left_pad(params.filter_len);
    let mut grad_in = Tensor3::zeros(batch, channels, len);
    let mut grad = FilterGrad::zeros_like(params);
    let fl = params.filter_len;

    for b in 0..batch {
        for k in 0..params.num_filters {
            let gy = grad_out.row(b, k);
            grad.bias[k] += gy.iter().copied().sum::<T>();
            for c in 0..channels {
                let x = input.row(b, c);
                let taps = params.taps(k, c);
                let gw = &mut grad.weights[(k * channels + c) * fl..(k * channels + c + 1) * fl];
                let gx = grad_in.row_mut(b, c);
                for (tau, &w) in taps.iter().enumerate() {
                    if let Some((lo, hi, shift)) = tap_window(tau, pad, len) {
                        let xs = offset(lo, shift)..offset(hi, shift);
                        gw[tau] += dot(&gy[lo..hi], &x[xs.clone()]);
                        axpy(w, &gy[lo..hi], &mut gx[xs]);
                    }
                }
            }
        }
    }
    (grad_in, grad)
}

/// Transposed convolution: the linear adjoint of [`conv1d`] with the same
/// weights, mapping `num_filters` channels back to `in_channels`, plus a
/// per-output-channel bias.
pub fn conv_transpose1d<T: Real>(input: &Tensor3<T>, params: &FilterSetParams<T>) -> Result<Tensor3<T>> {
    if input.channels() != params.num_filters {
        return Err(Error::config(format!(
            "conv_transpose1d expects {} input channels, got {}",
            params.num_filters,
            input.channels()
        )));
    }
    if params.bias.len() != params.in_channels {
        return Err(Error::config(format!(
            "conv_transpose1d bias has {} entries for {} output channels",
            params.bias.len(),
            params.in_channels
        )));
    }
    input.ensure_finite("conv_transpose1d input")?;

    let (batch, _, len) = input.shape();
    let pad = left_pad(params.filter_len);
    let mut out = Tensor3::zeros(batch, params.in_channels, len);
    for b in 0..batch {
        for c in 0..params.in_channels {
            out.row_mut(b, c).fill(params.bias[c]);
        }
        for k in 0..params.num_filters {
            let u = input.row(b, k);
            for c in 0..params.in_channels {
                let taps = params.taps(k, c);
                let row = out.row_mut(b, c);
                for (tau, &w) in taps.iter().enumerate() {
                    if let Some((lo, hi, shift)) = tap_window(tau, pad, len) {
                        axpy(w, &u[lo..hi], &mut row[offset(lo, shift)..offset(hi, shift)]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_params)` for [`conv_transpose1d`].
pub fn conv_transpose1d_backward<T: Real>(
    input: &Tensor3<T>,
    params: &FilterSetParams<T>,
    grad_out: &Tensor3<T>,
) -> (Tensor3<T>, FilterGrad<T>) {
    let (batch, _, len) = input.shape();
    let pad = left_pad(params.filter_len);
    let mut grad_in = Tensor3::zeros(batch, params.num_filters, len);
    let mut grad = FilterGrad::zeros_like(params);
    let fl = params.filter_len;
    let cin = params.in_channels;

    for b in 0..batch {
        for c in 0..cin {
            grad.bias[c] += grad_out.row(b, c).iter().copied().sum::<T>();
        }
        for k in 0..params.num_filters {
            let u = input.row(b, k);
            let gu = grad_in.row_mut(b, k);
            for c in 0..cin {
                let gy = grad_out.row(b, c);
                let taps = params.taps(k, c);
                let gw = &mut grad.weights[(k * cin + c) * fl..(k * cin + c + 1) * fl];
                for (tau, &w) in taps.iter().enumerate() {
                    if let Some((lo, hi, shift)) = tap_window(tau, pad, len) {
                        let ys = offset(lo, shift)..offset(hi, shift);
                        gw[tau] += dot(&u[lo..hi], &gy[ys.clone()]);
                        axpy(w, &gy[ys], &mut gu[lo..hi]);
                    }
                }
            }
        }
    }
    (grad_in, grad)
}

// ---------------------------------------------------------------------------
// batch normalization

fn check_norm<T: Real>(input: &Tensor3<T>, params: &BatchNormParams<T>) -> Result<()> {
    if input.channels() == 0 {
        return Err(Error::config("batch norm input has zero channels"));
    }
    params.validate()?;
    if params.channels() != input.channels() {
        return Err(Error::config(format!(
            "batch norm sized for {} channels, input has {}",
            params.channels(),
            input.channels()
        )));
    }
    Ok(())
}

/// Training-mode batch norm: normalizes each channel with statistics over
/// batch and time, then updates the running statistics in place.
pub fn batchnorm_train<T: Real>(
    input: &Tensor3<T>,
    params: &mut BatchNormParams<T>,
) -> Result<(Tensor3<T>, BatchNormCache<T>)> {
    check_norm(input, params)?;
    let (batch, channels, len) = input.shape();
    let count = T::of((batch * len) as f64);
    let mut out = Tensor3::zeros(batch, channels, len);
    let mut normalized = Tensor3::zeros(batch, channels, len);
    let mut inv_std = vec![T::zero(); channels];

    for c in 0..channels {
        let mut sum = T::zero();
        for b in 0..batch {
            sum += input.row(b, c).iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for b in 0..batch {
            sq += input.row(b, c).iter().map(|&x| (x - mean) * (x - mean)).sum::<T>();
        }
        let var = sq / count;
        let istd = T::one() / (var + params.epsilon).sqrt();
        inv_std[c] = istd;
        let (g, be) = (params.gamma[c], params.beta[c]);
        for b in 0..batch {
            let x = input.row(b, c);
            let xh = normalized.row_mut(b, c);
            for (h, &v) in xh.iter_mut().zip(x) {
                *h = (v - mean) * istd;
            }
            let xh = normalized.row(b, c);
            for (y, &h) in out.row_mut(b, c).iter_mut().zip(xh) {
                *y = g * h + be;
            }
        }
        let m = params.momentum;
        params.running_mean[c] = m * params.running_mean[c] + (T::one() - m) * mean;
        params.running_var[c] = m * params.running_var[c] + (T::one() - m) * var;
    }
    Ok((out, BatchNormCache { normalized, inv_std }))
}

/// Inference-mode batch norm using the running statistics only.
pub fn batchnorm_infer<T: Real>(input: &Tensor3<T>, params: &BatchNormParams<T>) -> Result<Tensor3<T>> {
    check_norm(input, params)?;
    let (batch, channels, len) = input.shape();
    let mut out = Tensor3::zeros(batch, channels, len);
    for c in 0..channels {
        let scale = params.gamma[c] / (params.running_var[c] + params.epsilon).sqrt();
        let shift = params.beta[c] - scale * params.running_mean[c];
        for b in 0..batch {
            for (y, &x) in out.row_mut(b, c).iter_mut().zip(input.row(b, c)) {
                *y = scale * x + shift;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`batchnorm_train`].
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_out: &Tensor3<T>,
) -> (Tensor3<T>, NormGrad<T>) {
    let (batch, channels, len) = grad_out.shape();
    let count = T::of((batch * len) as f64);
    let mut grad_in = Tensor3::zeros(batch, channels, len);
    let mut grad = NormGrad {
        gamma: vec![T::zero(); channels],
        beta: vec![T::zero(); channels],
    };
    for c in 0..channels {
        let mut dgamma = T::zero();
        let mut dbeta = T::zero();
        for b in 0..batch {
            let gy = grad_out.row(b, c);
            dgamma += dot(gy, cache.normalized.row(b, c));
            dbeta += gy.iter().copied().sum::<T>();
        }
        grad.gamma[c] = dgamma;
        grad.beta[c] = dbeta;
        let k = params.gamma[c] * cache.inv_std[c] / count;
        for b in 0..batch {
            let gy = grad_out.row(b, c);
            let xh = cache.normalized.row(b, c);
            for ((gx, &g), &h) in grad_in.row_mut(b, c).iter_mut().zip(gy).zip(xh) {
                *gx = k * (count * g - dbeta - h * dgamma);
            }
        }
    }
    (grad_in, grad)
}

// ---------------------------------------------------------------------------
// activation, loss, concatenation

/// Exponential linear unit with alpha = 1.
#[inline]
pub fn elu_scalar<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu<T: Real>(input: &Tensor3<T>) -> Tensor3<T> {
    let (b, c, n) = input.shape();
    let data = input.data().iter().map(|&x| elu_scalar(x)).collect();
    Tensor3::from_vec(b, c, n, data).expect("shape preserved")
}

/// Backward of [`elu`] given the forward input and output.
pub fn elu_backward<T: Real>(input: &Tensor3<T>, output: &Tensor3<T>, grad_out: &Tensor3<T>) -> Tensor3<T> {
    let (b, c, n) = input.shape();
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| if x > T::zero() { g } else { g * (y + T::one()) })
        .collect();
    Tensor3::from_vec(b, c, n, data).expect("shape preserved")
}

fn check_same_shape<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{what}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Sum of absolute differences over every batch, channel and time entry.
pub fn l1_loss<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>) -> Result<T> {
    check_same_shape(pred, target, "l1_loss")?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum())
}

/// Subgradient of [`l1_loss`] scaled by `scale`; zero where `pred == target`.
pub fn l1_loss_backward<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>, scale: T) -> Tensor3<T> {
    let (b, c, n) = pred.shape();
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p > t {
                scale
            } else if p < t {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor3::from_vec(b, c, n, data).expect("shape preserved")
}

/// Stacks tensors along the channel axis, in list order.
pub fn concat_channels<T: Real>(parts: &[&Tensor3<T>]) -> Result<Tensor3<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat_channels needs at least one part"))?;
    let (batch, _, len) = first.shape();
    for p in parts {
        if p.batch() != batch || p.length() != len {
            return Err(Error::config(format!(
                "concat_channels: part shape {:?} incompatible with batch {batch}, length {len}",
                p.shape()
            )));
        }
    }
    let channels: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(batch * channels * len);
    for b in 0..batch {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor3::from_vec(batch, channels, len, data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Real>(grad: &Tensor3<T>, channels: &[usize]) -> Vec<Tensor3<T>> {
    let (batch, _, len) = grad.shape();
    let mut parts: Vec<Tensor3<T>> = channels.iter().map(|&c| Tensor3::zeros(batch, c, len)).collect();
    for b in 0..batch {
        let item = grad.item(b);
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            let n = c * len;
            part.data_mut()[b * n..(b + 1) * n].copy_from_slice(&item[start..start + n]);
            start += n;
        }
    }
    parts
}
