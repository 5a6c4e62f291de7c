//! Dense buffers: batched multi-channel signals and layer parameters.

use crate::error::{Error, Result};
use crate::real::Real;

/// A batch of multi-channel 1-D signals, stored batch-major, then
/// channel-major, then time.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    batch: usize,
    channels: usize,
    length: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Tensor3 {
            batch,
            channels,
            length,
            data: vec![T::zero(); batch * channels * length],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, length: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * channels * length {
            return Err(Error::config(format!(
                "tensor data has {} values, shape {}x{}x{} needs {}",
                data.len(),
                batch,
                channels,
                length,
                batch * channels * length
            )));
        }
        Ok(Tensor3 {
            batch,
            channels,
            length,
            data,
        })
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        length: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * channels * length);
        for b in 0..batch {
            for c in 0..channels {
                for t in 0..length {
                    data.push(f(b, c, t));
                }
            }
        }
        Tensor3 {
            batch,
            channels,
            length,
            data,
        }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn length(&self) -> usize {
        self.length
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.length)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, t: usize) -> T {
        self.data[(b * self.channels + c) * self.length + t]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, t: usize, value: T) {
        self.data[(b * self.channels + c) * self.length + t] = value;
    }

    /// One channel row of one batch element.
    #[inline]
    pub fn row(&self, b: usize, c: usize) -> &[T] {
        let start = (b * self.channels + c) * self.length;
        &self.data[start..start + self.length]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = (b * self.channels + c) * self.length;
        &mut self.data[start..start + self.length]
    }

    /// All channels of one batch element.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.channels * self.length;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("{what} contains non-finite values")))
        }
    }

    /// Euclidean inner product over every element.
    pub fn inner(&self, other: &Self) -> T {
        crate::real::dot(&self.data, &other.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            batch: self.batch,
            channels: self.channels,
            length: self.length,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// One set of `num_filters` filters of length `filter_len` spanning
/// `in_channels` input channels.
///
/// `weights` is laid out `[num_filters][in_channels][filter_len]`. A forward
/// convolution maps `in_channels -> num_filters`; a transposed convolution with
/// the same weights maps `num_filters -> in_channels`. `bias` is sized to the
/// output channels of whichever of the two the set is used with.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSetParams<T> {
    pub num_filters: usize,
    pub in_channels: usize,
    pub filter_len: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> FilterSetParams<T> {
    /// Zeroed parameters for a forward convolution (`in_channels -> num_filters`).
    pub fn conv(num_filters: usize, in_channels: usize, filter_len: usize) -> Result<Self> {
        Self::zeroed(num_filters, in_channels, filter_len, num_filters)
    }

    /// Zeroed parameters for a transposed convolution mapping
    /// `input_channels -> output_channels`.
    pub fn transpose(output_channels: usize, input_channels: usize, filter_len: usize) -> Result<Self> {
        Self::zeroed(input_channels, output_channels, filter_len, output_channels)
    }

    fn zeroed(num_filters: usize, in_channels: usize, filter_len: usize, bias_len: usize) -> Result<Self> {
        if num_filters == 0 || in_channels == 0 || filter_len == 0 {
            return Err(Error::config(format!(
                "filter set dimensions must be positive, got {num_filters}x{in_channels}x{filter_len}"
            )));
        }
        Ok(FilterSetParams {
            num_filters,
            in_channels,
            filter_len,
            weights: vec![T::zero(); num_filters * in_channels * filter_len],
            bias: vec![T::zero(); bias_len],
        })
    }

    #[inline]
    pub fn weight(&self, k: usize, c: usize, tau: usize) -> T {
        self.weights[(k * self.in_channels + c) * self.filter_len + tau]
    }

    /// The filter taps linking filter `k` to input channel `c`.
    #[inline]
    pub fn taps(&self, k: usize, c: usize) -> &[T] {
        let start = (k * self.in_channels + c) * self.filter_len;
        &self.weights[start..start + self.filter_len]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FilterSetParams<U> {
        FilterSetParams {
            num_filters: self.num_filters,
            in_channels: self.in_channels,
            filter_len: self.filter_len,
            weights: self.weights.iter().map(|x| U::of(x.as_f64())).collect(),
            bias: self.bias.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

pub const DEFAULT_BN_EPSILON: f64 = 1e-3;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch-normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("batch norm needs at least one channel"));
        }
        Ok(BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::of(DEFAULT_BN_EPSILON),
            momentum: T::of(DEFAULT_BN_MOMENTUM),
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if c == 0 {
            return Err(Error::config("batch norm needs at least one channel"));
        }
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::config("batch norm parameter arrays differ in length"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::config("batch norm epsilon must be positive"));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::config("batch norm momentum must lie in (0, 1)"));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::config("batch norm running variance is negative"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.running_mean)
            .chain(&self.running_var)
            .all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> BatchNormParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        BatchNormParams {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            epsilon: U::of(self.epsilon.as_f64()),
            momentum: U::of(self.momentum.as_f64()),
        }
    }
}
