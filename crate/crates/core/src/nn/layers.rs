use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

/// Serializable description of one layer; channel counts are inferred from
/// the input shape when a network is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize, stride: usize },
    MaxPool { pool: usize, stride: usize },
    Upsample { factor: usize },
    TransposedConv2d { filters: usize, kernel: usize },
    BatchNorm { momentum: f64, epsilon: f64 },
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize },
    Activation { function: Activation },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride: 1,
        }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm {
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn activation(function: Activation) -> Self {
        LayerSpec::Activation { function }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let hwc = || match input {
            [h, w, c] => Ok((*h, *w, *c)),
            _ => Err(Error::Shape(format!("{self:?} needs an [h, w, c] input, got {input:?}"))),
        };
        match *self {
            LayerSpec::Conv2d { filters, kernel, stride } => {
                let (h, w, _) = hwc()?;
                Ok(vec![window_out(h, kernel, stride)?, window_out(w, kernel, stride)?, filters])
            }
            LayerSpec::MaxPool { pool, stride } => {
                let (h, w, c) = hwc()?;
                Ok(vec![window_out(h, pool, stride)?, window_out(w, pool, stride)?, c])
            }
            LayerSpec::Upsample { factor } => {
                let (h, w, c) = hwc()?;
                if factor == 0 {
                    return Err(Error::Config("upsample factor must be at least 1".into()));
                }
                Ok(vec![h * factor, w * factor, c])
            }
            LayerSpec::TransposedConv2d { filters, kernel } => {
                let (h, w, _) = hwc()?;
                if kernel == 0 {
                    return Err(Error::Config("kernel must be at least 1".into()));
                }
                Ok(vec![h + kernel - 1, w + kernel - 1, filters])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { units } => match input {
                [_] => Ok(vec![units]),
                _ => Err(Error::Shape(format!("dense needs a flat input, got {input:?}"))),
            },
            LayerSpec::Dropout { rate } => {
                check_rate(rate)?;
                Ok(input.to_vec())
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Activation { .. } => Ok(input.to_vec()),
        }
    }
}

fn window_out(size: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be at least 1".into()));
    }
    if window > size {
        return Err(Error::Shape(format!("window {window} larger than input {size}")));
    }
    Ok((size - window) / stride + 1)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// A trainable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            grad: vec![T::zero(); value.len()],
            value,
            shape,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![T::zero(); n])
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![v; n])
    }

    /// He-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
    pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect();
        Param::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Patches of a `[n, h, w, c]` input laid out as rows of `k * k * c` values
/// in (di, dj, channel) order, one row per output position.
pub(crate) fn im2col<T: Scalar>(x: &[T], [n, h, w, c]: [usize; 4], k: usize, stride: usize) -> (Vec<T>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let row = k * k * c;
    let mut cols = vec![T::zero(); n * oh * ow * row];
    let mut dst = 0;
    for b in 0..n {
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..k {
                    let start = ((i * stride + di) * w + j * stride) * c;
                    cols[dst..dst + k * c].copy_from_slice(&img[start..start + k * c]);
                    dst += k * c;
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into image layout.
pub(crate) fn col2im<T: Scalar>(cols: &[T], [n, h, w, c]: [usize; 4], k: usize, stride: usize) -> Vec<T> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut x = vec![T::zero(); n * h * w * c];
    let mut src = 0;
    for b in 0..n {
        let img = &mut x[b * h * w * c..(b + 1) * h * w * c];
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..k {
                    let start = ((i * stride + di) * w + j * stride) * c;
                    for (d, s) in img[start..start + k * c].iter_mut().zip(&cols[src..src + k * c]) {
                        *d += *s;
                    }
                    src += k * c;
                }
            }
        }
    }
    x
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

fn column_sums<T: Scalar>(m: &[T], cols: usize, into: &mut [T]) {
    into.iter_mut().for_each(|v| *v = T::zero());
    for row in m.chunks_exact(cols) {
        for (s, v) in into.iter_mut().zip(row) {
            *s += *v;
        }
    }
}

/// Valid cross-correlation. Weights are `[filters][k][k][in_channels]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Vec<T>, [usize; 4])>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, filters: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Conv2d {
            in_channels,
            filters,
            kernel,
            stride,
            weight: Param::he_uniform(vec![filters, kernel, kernel, in_channels], fan_in, rng),
            bias: Param::zeros(vec![filters]),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let dims = x.dims4()?;
        let [n, h, w, c] = dims;
        if c != self.in_channels {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        window_out(h, self.kernel, self.stride)?;
        window_out(w, self.kernel, self.stride)?;
        let (cols, oh, ow) = im2col(x.data(), dims, self.kernel, self.stride);
        let rows = n * oh * ow;
        let kkc = self.kernel * self.kernel * c;
        let mut out = vec![T::zero(); rows * self.filters];
        gemm(false, true, rows, self.filters, kkc, &cols, &self.weight.value, T::zero(), &mut out);
        add_bias(&mut out, &self.bias.value);
        Ok((Tensor::new(vec![n, oh, ow, self.filters], out)?, cols))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (cols, dims) = self.cache.take().ok_or_else(no_forward)?;
        let rows = grad.len() / self.filters;
        let kkc = self.kernel * self.kernel * self.in_channels;
        gemm(true, false, self.filters, kkc, rows, grad.data(), &cols, T::zero(), &mut self.weight.grad);
        column_sums(grad.data(), self.filters, &mut self.bias.grad);
        let mut dcols = cols;
        gemm(false, false, rows, kkc, self.filters, grad.data(), &self.weight.value, T::zero(), &mut dcols);
        Tensor::new(dims.to_vec(), col2im(&dcols, dims, self.kernel, self.stride))
    }
}

/// Stride-1 transposed convolution; output side is `in + k - 1`.
/// Weights are `[in_channels][k][k][filters]`.
#[derive(Debug, Clone)]
pub struct TransposedConv2d<T> {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> TransposedConv2d<T> {
    pub fn new(in_channels: usize, filters: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        TransposedConv2d {
            in_channels,
            filters,
            kernel,
            weight: Param::he_uniform(vec![in_channels, kernel, kernel, filters], kernel * kernel * in_channels, rng),
            bias: Param::zeros(vec![filters]),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, h, w, c] = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "transposed conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let k = self.kernel;
        let kkf = k * k * self.filters;
        let mut ycols = vec![T::zero(); n * h * w * kkf];
        gemm(false, false, n * h * w, kkf, c, x.data(), &self.weight.value, T::zero(), &mut ycols);
        let out_dims = [n, h + k - 1, w + k - 1, self.filters];
        let mut out = col2im(&ycols, out_dims, k, 1);
        add_bias(&mut out, &self.bias.value);
        Tensor::new(out_dims.to_vec(), out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(no_forward)?;
        let [n, h, w, c] = x.dims4()?;
        let k = self.kernel;
        let kkf = k * k * self.filters;
        let (gcols, _, _) = im2col(grad.data(), grad.dims4()?, k, 1);
        gemm(true, false, c, kkf, n * h * w, x.data(), &gcols, T::zero(), &mut self.weight.grad);
        column_sums(grad.data(), self.filters, &mut self.bias.grad);
        let mut dx = vec![T::zero(); n * h * w * c];
        gemm(false, true, n * h * w, c, kkf, &gcols, &self.weight.value, T::zero(), &mut dx);
        Tensor::new(vec![n, h, w, c], dx)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub pool: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool {
    pub fn new(pool: usize, stride: usize) -> Self {
        MaxPool {
            pool,
            stride,
            cache: None,
        }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let dims = x.dims4()?;
        let [n, h, w, c] = dims;
        let oh = window_out(h, self.pool, self.stride)?;
        let ow = window_out(w, self.pool, self.stride)?;
        let data = x.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for di in 0..self.pool {
                            for dj in 0..self.pool {
                                let idx = ((b * h + i * self.stride + di) * w + j * self.stride + dj) * c + ch;
                                if best == usize::MAX || data[idx] > best_v {
                                    best = idx;
                                    best_v = data[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok((Tensor::new(vec![n, oh, ow, c], out)?, argmax))
    }

    /// Values only, vectorized across channels.
    fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, h, w, c] = x.dims4()?;
        let oh = window_out(h, self.pool, self.stride)?;
        let ow = window_out(w, self.pool, self.stride)?;
        let data = x.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let at = |di: usize, dj: usize| {
                        let idx = ((b * h + i * self.stride + di) * w + j * self.stride + dj) * c;
                        &data[idx..idx + c]
                    };
                    let start = out.len();
                    out.extend_from_slice(at(0, 0));
                    let acc = &mut out[start..];
                    for di in 0..self.pool {
                        for dj in 0..self.pool {
                            for (m, &v) in acc.iter_mut().zip(at(di, dj)) {
                                if v > *m {
                                    *m = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, oh, ow, c], out)
    }

    fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (argmax, dims) = self.cache.take().ok_or_else(no_forward)?;
        let mut dx = vec![T::zero(); dims.iter().product()];
        for (&idx, &g) in argmax.iter().zip(grad.data()) {
            dx[idx] += g;
        }
        Tensor::new(dims.to_vec(), dx)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub factor: usize,
    cache: Option<[usize; 4]>,
}

impl Upsample {
    pub fn new(factor: usize) -> Self {
        Upsample { factor, cache: None }
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, h, w, c] = x.dims4()?;
        let f = self.factor;
        if f == 0 {
            return Err(Error::Config("upsample factor must be at least 1".into()));
        }
        let (oh, ow) = (h * f, w * f);
        let data = x.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let src = ((b * h + i / f) * w + j / f) * c;
                    out.extend_from_slice(&data[src..src + c]);
                }
            }
        }
        Tensor::new(vec![n, oh, ow, c], out)
    }

    fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.cache.take().ok_or_else(no_forward)?;
        let [n, h, w, c] = dims;
        let f = self.factor;
        let g = grad.data();
        let mut dx = vec![T::zero(); n * h * w * c];
        for b in 0..n {
            for i in 0..h * f {
                for j in 0..w * f {
                    let src = ((b * h * f + i) * w * f + j) * c;
                    let dst = ((b * h + i / f) * w + j / f) * c;
                    for ch in 0..c {
                        dx[dst + ch] += g[src + ch];
                    }
                }
            }
        }
        Tensor::new(dims.to_vec(), dx)
    }
}

/// Per-channel batch normalization over every axis except the last.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

/// Output, backward cache, and per-channel batch mean and variance in train mode.
type BnRun<T> = (Tensor<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>);

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNorm {
            channels,
            momentum,
            epsilon,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    /// Returns the output, the cache, and (in train mode) the batch moments.
    fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<BnRun<T>> {
        let c = self.channels;
        if x.shape().last() != Some(&c) {
            return Err(Error::Shape(format!("batch norm expects {c} channels, got shape {:?}", x.shape())));
        }
        let m = x.len() / c;
        let data = x.data();
        let eps = T::of(self.epsilon);
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                if m == 0 || x.batch() == 0 {
                    return Err(Error::Validation("batch norm needs a non-empty batch in train mode".into()));
                }
                let mut mean = vec![T::zero(); c];
                for row in data.chunks_exact(c) {
                    for (s, v) in mean.iter_mut().zip(row) {
                        *s += *v;
                    }
                }
                let inv_m = T::one() / T::of(m as f64);
                mean.iter_mut().for_each(|v| *v *= inv_m);
                let mut var = vec![T::zero(); c];
                for row in data.chunks_exact(c) {
                    for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = *v - *mu;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_m);
                (mean, var, true)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks_exact(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(self.gamma.value[ch] * xh + self.beta.value[ch]);
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            batch_stats,
        };
        let moments = batch_stats.then_some((mean, var));
        Ok((Tensor::new(x.shape().to_vec(), out)?, cache, moments))
    }

    /// Running-statistics affine map `y = a * x + b` per channel.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels;
        if x.shape().last() != Some(&c) {
            return Err(Error::Shape(format!("batch norm expects {c} channels, got shape {:?}", x.shape())));
        }
        let eps = T::of(self.epsilon);
        let a: Vec<T> = (0..c)
            .map(|ch| self.gamma.value[ch] / (self.running_var[ch] + eps).sqrt())
            .collect();
        let b: Vec<T> = (0..c)
            .map(|ch| self.beta.value[ch] - a[ch] * self.running_mean[ch])
            .collect();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for ((v, &a), &b) in row.iter_mut().zip(&a).zip(&b) {
                *v = a * *v + b;
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn update_running(&mut self, mean: &[T], var: &[T]) {
        let mom = T::of(self.momentum);
        let rest = T::one() - mom;
        for ch in 0..self.channels {
            self.running_mean[ch] = mom * self.running_mean[ch] + rest * mean[ch];
            self.running_var[ch] = mom * self.running_var[ch] + rest * var[ch];
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(no_forward)?;
        let c = self.channels;
        let g = grad.data();
        let m = T::of((g.len() / c) as f64);
        let mut dbeta = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        for (grow, xrow) in g.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] += grow[ch];
                dgamma[ch] += grow[ch] * xrow[ch];
            }
        }
        let mut dx = Vec::with_capacity(g.len());
        for (grow, xrow) in g.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                let v = if cache.batch_stats {
                    scale / m * (m * grow[ch] - dbeta[ch] - xrow[ch] * dgamma[ch])
                } else {
                    scale * grow[ch]
                };
                dx.push(v);
            }
        }
        self.gamma.grad = dgamma;
        self.beta.grad = dbeta;
        Tensor::new(cache.shape, dx)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    /// Test hook: when set, this mask replaces the random draw in train mode.
    pub fixed_mask: Option<Vec<T>>,
    cache: Option<Option<Vec<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Dropout {
            rate,
            fixed_mask: None,
            cache: None,
        })
    }

    fn run(&self, x: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        check_rate(self.rate)?;
        if mode == Mode::Infer || (self.rate == 0.0 && self.fixed_mask.is_none()) {
            return Ok((x.clone(), None));
        }
        let mask = match (&self.fixed_mask, rng) {
            (Some(mask), _) => {
                if mask.len() != x.len() {
                    return Err(Error::Shape("fixed dropout mask has the wrong length".into()));
                }
                mask.clone()
            }
            (None, Some(rng)) => {
                let keep = T::of(1.0 / (1.0 - self.rate));
                (0..x.len())
                    .map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep })
                    .collect()
            }
            (None, None) => return Err(Error::State("dropout in train mode needs a random source".into())),
        };
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok((Tensor::new(x.shape().to_vec(), out)?, Some(mask)))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cache.take().ok_or_else(no_forward)? {
            None => Ok(grad.clone()),
            Some(mask) => {
                let dx = grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                Tensor::new(grad.shape().to_vec(), dx)
            }
        }
    }
}

/// Fully connected layer; weights are `[inputs][units]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub units: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            inputs,
            units,
            weight: Param::he_uniform(vec![inputs, units], inputs, rng),
            bias: Param::zeros(vec![units]),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects [batch, {}], got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut out = vec![T::zero(); n * self.units];
        gemm(false, false, n, self.units, self.inputs, x.data(), &self.weight.value, T::zero(), &mut out);
        add_bias(&mut out, &self.bias.value);
        Tensor::new(vec![n, self.units], out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(no_forward)?;
        let n = x.batch();
        gemm(true, false, self.inputs, self.units, n, x.data(), grad.data(), T::zero(), &mut self.weight.grad);
        column_sums(grad.data(), self.units, &mut self.bias.grad);
        let mut dx = vec![T::zero(); n * self.inputs];
        gemm(false, true, n, self.inputs, self.units, grad.data(), &self.weight.value, T::zero(), &mut dx);
        Tensor::new(vec![n, self.inputs], dx)
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn apply_activation<T: Scalar>(f: Activation, x: &Tensor<T>) -> Result<Tensor<T>> {
    match f {
        Activation::Identity => Ok(x.clone()),
        Activation::Relu => Ok(x.map(|v| v.max(T::zero()))),
        Activation::Sigmoid => Ok(x.map(|v| T::one() / (T::one() + (-v).exp()))),
        Activation::Softmax => {
            let width = *x.shape().last().unwrap_or(&0);
            if width == 0 {
                return Err(Error::Shape("softmax over an empty axis".into()));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(width) {
                softmax_in_place(row);
            }
            Ok(out)
        }
    }
}

/// Caches the layer input for ReLU and the output for sigmoid and softmax.
fn activation_backward<T: Scalar>(f: Activation, cached: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let g = grad.data();
    let c = cached.data();
    let dx: Vec<T> = match f {
        Activation::Identity => g.to_vec(),
        Activation::Relu => g.iter().zip(c).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
        Activation::Sigmoid => g.iter().zip(c).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
        Activation::Softmax => {
            let width = *cached.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks_exact(width).zip(c.chunks_exact(width)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| y * (gv - dot)));
            }
            dx
        }
    };
    Tensor::new(grad.shape().to_vec(), dx)
}

fn no_forward() -> Error {
    Error::State("backward called without a recorded forward pass".into())
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    TransposedConv2d(TransposedConv2d<T>),
    MaxPool(MaxPool),
    Upsample(Upsample),
    BatchNorm(BatchNorm<T>),
    Dropout(Dropout<T>),
    Flatten { cache: Option<Vec<usize>> },
    Dense(Dense<T>),
    Activation { function: Activation, cache: Option<Tensor<T>> },
}

impl<T: Scalar> Layer<T> {
    /// Instantiates a layer for the given per-sample input shape.
    pub fn from_spec(spec: &LayerSpec, input: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.output_shape(input)?;
        let channels = || *input.last().unwrap_or(&0);
        Ok(match *spec {
            LayerSpec::Conv2d { filters, kernel, stride } => {
                Layer::Conv2d(Conv2d::new(channels(), filters, kernel, stride, rng))
            }
            LayerSpec::TransposedConv2d { filters, kernel } => {
                Layer::TransposedConv2d(TransposedConv2d::new(channels(), filters, kernel, rng))
            }
            LayerSpec::MaxPool { pool, stride } => Layer::MaxPool(MaxPool::new(pool, stride)),
            LayerSpec::Upsample { factor } => Layer::Upsample(Upsample::new(factor)),
            LayerSpec::BatchNorm { momentum, epsilon } => Layer::BatchNorm(BatchNorm::new(channels(), momentum, epsilon)),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)?),
            LayerSpec::Flatten => Layer::Flatten { cache: None },
            LayerSpec::Dense { units } => Layer::Dense(Dense::new(input[0], units, rng)),
            LayerSpec::Activation { function } => Layer::Activation { function, cache: None },
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(l) => LayerSpec::Conv2d {
                filters: l.filters,
                kernel: l.kernel,
                stride: l.stride,
            },
            Layer::TransposedConv2d(l) => LayerSpec::TransposedConv2d {
                filters: l.filters,
                kernel: l.kernel,
            },
            Layer::MaxPool(l) => LayerSpec::MaxPool {
                pool: l.pool,
                stride: l.stride,
            },
            Layer::Upsample(l) => LayerSpec::Upsample { factor: l.factor },
            Layer::BatchNorm(l) => LayerSpec::BatchNorm {
                momentum: l.momentum,
                epsilon: l.epsilon,
            },
            Layer::Dropout(l) => LayerSpec::Dropout { rate: l.rate },
            Layer::Flatten { .. } => LayerSpec::Flatten,
            Layer::Dense(l) => LayerSpec::Dense { units: l.units },
            Layer::Activation { function, .. } => LayerSpec::Activation { function: *function },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::TransposedConv2d(_) => "transposed_conv2d",
            Layer::MaxPool(_) => "max_pool",
            Layer::Upsample(_) => "upsample",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dropout(_) => "dropout",
            Layer::Flatten { .. } => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Activation { .. } => "activation",
        }
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => {
                let (out, cols) = l.run(x)?;
                l.cache = Some((cols, x.dims4()?));
                Ok(out)
            }
            Layer::TransposedConv2d(l) => {
                let out = l.run(x)?;
                l.cache = Some(x.clone());
                Ok(out)
            }
            Layer::MaxPool(l) => {
                let (out, argmax) = l.run(x)?;
                l.cache = Some((argmax, x.dims4()?));
                Ok(out)
            }
            Layer::Upsample(l) => {
                let out = l.run(x)?;
                l.cache = Some(x.dims4()?);
                Ok(out)
            }
            Layer::BatchNorm(l) => {
                let (out, cache, moments) = l.run(x, mode)?;
                if let Some((mean, var)) = moments {
                    l.update_running(&mean, &var);
                }
                l.cache = Some(cache);
                Ok(out)
            }
            Layer::Dropout(l) => {
                let (out, mask) = l.run(x, mode, rng)?;
                l.cache = Some(mask);
                Ok(out)
            }
            Layer::Flatten { cache } => {
                *cache = Some(x.shape().to_vec());
                x.clone().reshape(vec![x.batch(), x.sample_len()])
            }
            Layer::Dense(l) => {
                let out = l.run(x)?;
                l.cache = Some(x.clone());
                Ok(out)
            }
            Layer::Activation { function, cache } => {
                let out = apply_activation(*function, x)?;
                *cache = Some(if *function == Activation::Relu { x.clone() } else { out.clone() });
                Ok(out)
            }
        }
    }

    /// Stateless inference pass (running statistics, no dropout).
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => Ok(l.run(x)?.0),
            Layer::TransposedConv2d(l) => l.run(x),
            Layer::MaxPool(l) => l.infer(x),
            Layer::Upsample(l) => l.run(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::Flatten { .. } => x.clone().reshape(vec![x.batch(), x.sample_len()]),
            Layer::Dense(l) => l.run(x),
            Layer::Activation { function, .. } => apply_activation(*function, x),
        }
    }

    /// Propagates `grad` (d loss / d output) to the input and stores
    /// parameter gradients.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::TransposedConv2d(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::Upsample(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Flatten { cache } => {
                let shape = cache.take().ok_or_else(no_forward)?;
                grad.clone().reshape(shape)
            }
            Layer::Dense(l) => l.backward(grad),
            Layer::Activation { function, cache } => {
                let cached = cache.take().ok_or_else(no_forward)?;
                activation_backward(*function, &cached, grad)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::TransposedConv2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::TransposedConv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    /// Every stored tensor (parameters and running statistics) in file order.
    pub fn state(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        match self {
            Layer::Conv2d(l) => vec![
                ("weight", l.weight.shape.clone(), &l.weight.value[..]),
                ("bias", l.bias.shape.clone(), &l.bias.value[..]),
            ],
            Layer::TransposedConv2d(l) => vec![
                ("weight", l.weight.shape.clone(), &l.weight.value[..]),
                ("bias", l.bias.shape.clone(), &l.bias.value[..]),
            ],
            Layer::BatchNorm(l) => vec![
                ("gamma", vec![l.channels], &l.gamma.value[..]),
                ("beta", vec![l.channels], &l.beta.value[..]),
                ("running_mean", vec![l.channels], &l.running_mean[..]),
                ("running_var", vec![l.channels], &l.running_var[..]),
            ],
            Layer::Dense(l) => vec![
                ("weight", l.weight.shape.clone(), &l.weight.value[..]),
                ("bias", l.bias.shape.clone(), &l.bias.value[..]),
            ],
            _ => vec![],
        }
    }

    /// Mutable view of the same tensors as [`Layer::state`], in the same order.
    pub fn state_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::TransposedConv2d(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::BatchNorm(l) => vec![&mut l.gamma.value, &mut l.beta.value, &mut l.running_mean, &mut l.running_var],
            Layer::Dense(l) => vec![&mut l.weight.value, &mut l.bias.value],
            _ => vec![],
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::TransposedConv2d(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Upsample(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Dropout(l) => l.cache = None,
            Layer::Flatten { cache } => *cache = None,
            Layer::Dense(l) => l.cache = None,
            Layer::Activation { cache, .. } => *cache = None,
        }
    }
}
