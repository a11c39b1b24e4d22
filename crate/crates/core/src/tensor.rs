//! Dense NCHW tensors and the forward kernels every layer of the network needs.
//!
//! Storage precision is a type parameter (`f32` for training and inference,
//! `f64` for gradient verification). Every reduction accumulates in `f64`.

use std::fmt::Debug;

use crate::error::{config_err, dim_err, Result};

/// Storage element of a [`Tensor`].
pub trait Scalar: Copy + Default + Debug + PartialEq + PartialOrd + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Rank-4 array in batch, channel, height, width order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("all dimensions must be >= 1, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return dim_err(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut i = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f([a, b, y, x]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    /// Elements in one `H x W` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// The `H x W` plane of sample `n`, channel `c`.
    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Change storage precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Copy of channels `start..start + count`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let c = self.channels();
        if count == 0 || start + count > c {
            return dim_err(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + count
            ));
        }
        let p = self.plane();
        let mut data = Vec::with_capacity(self.batch() * count * p);
        for n in 0..self.batch() {
            let base = (n * c + start) * p;
            data.extend_from_slice(&self.data[base..base + count * p]);
        }
        Self::new([self.batch(), count, self.height(), self.width()], data)
    }

    /// Output channel `i` is input channel `source[i]`.
    pub fn gather_channels(&self, source: &[usize]) -> Result<Self> {
        let c = self.channels();
        if let Some(&bad) = source.iter().find(|&&s| s >= c) {
            return dim_err(format!("channel index {bad} out of range for {c} channels"));
        }
        let p = self.plane();
        let mut data = Vec::with_capacity(self.batch() * source.len() * p);
        for n in 0..self.batch() {
            for &s in source {
                data.extend_from_slice(self.channel(n, s));
            }
        }
        Self::new(
            [self.batch(), source.len(), self.height(), self.width()],
            data,
        )
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = T::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Output length of a convolution along one axis, or `None` if the kernel
/// does not fit.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output positions `o` in `lo..hi` whose source `o * stride + offset - padding`
/// lands inside `0..input`.
#[inline]
pub(crate) fn valid_range(
    output: usize,
    input: usize,
    offset: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if offset >= padding {
        0
    } else {
        (padding - offset).div_ceil(stride)
    };
    if input + padding <= offset {
        return (0, 0);
    }
    let hi = ((input - 1 + padding - offset) / stride + 1).min(output);
    (lo.min(hi), hi)
}

/// Weights and geometry of a bias-free 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// Layer path, used as the parameter name in gradients and checkpoints.
    pub name: String,
    /// `(C_out, C_in / groups, K, K)`.
    pub weight: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        name: impl Into<String>,
        weight: Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [c_out, _, kh, kw] = weight.shape();
        if kh != kw {
            return config_err(format!("kernel must be square, got {kh}x{kw}"));
        }
        if stride == 0 || groups == 0 {
            return config_err("stride and groups must be positive");
        }
        if c_out % groups != 0 {
            return config_err(format!(
                "{c_out} output channels not divisible by {groups} groups"
            ));
        }
        Ok(Self {
            name: name.into(),
            weight,
            stride,
            padding,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.channels() * self.groups
    }
    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }
    pub fn kernel(&self) -> usize {
        self.weight.height()
    }
    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        match (
            conv_output_len(h, k, self.stride, self.padding),
            conv_output_len(w, k, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => dim_err(format!(
                "{h}x{w} input too small for {k}x{k} kernel with padding {}",
                self.padding
            )),
        }
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels() {
            return dim_err(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.in_channels(),
                x.channels()
            ));
        }
        self.output_hw(x.height(), x.width())
    }
}

/// `acc += a * x`.
#[inline]
pub(crate) fn axpy<T: Scalar>(acc: &mut [f64], a: f64, x: &[T]) {
    for (d, &v) in acc.iter_mut().zip(x) {
        *d += a * v.to_f64();
    }
}

/// Dot product with four interleaved partial sums, added in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l].to_f64() * y[l].to_f64();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.to_f64() * y.to_f64();
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Channel-major copy, `(C, N * H * W)`, so a 1x1 convolution runs over one
/// long row per channel.
pub(crate) fn pack_channels<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let [n, c, _, _] = x.shape();
    let p = x.plane();
    let mut out = vec![0.0; n * c * p];
    for ch in 0..c {
        for b in 0..n {
            for (d, &v) in out[(ch * n + b) * p..][..p]
                .iter_mut()
                .zip(x.channel(b, ch))
            {
                *d = v.to_f64();
            }
        }
    }
    out
}

/// `out[b, co] = sum_ci w[co, ci] x[b, ci]` over packed inputs, summing `ci`
/// in ascending order.
pub(crate) fn pointwise_into<T: Scalar>(
    packed: &[f64],
    weight: &[T],
    c_in: usize,
    out: &mut Tensor<T>,
) {
    let [n, c_out, _, _] = out.shape();
    let p = out.plane();
    let mut acc = vec![0.0f64; n * p];
    for co in 0..c_out {
        acc.fill(0.0);
        let len = n * p;
        let row = |ci: usize| &packed[ci * len..][..len];
        let wt = |ci: usize| weight[co * c_in + ci].to_f64();
        let mut ci = 0;
        // Four inputs per pass; the adds stay in ascending `ci` order.
        while ci + 4 <= c_in {
            let (w0, w1, w2, w3) = (wt(ci), wt(ci + 1), wt(ci + 2), wt(ci + 3));
            let (r0, r1, r2, r3) = (row(ci), row(ci + 1), row(ci + 2), row(ci + 3));
            for i in 0..len {
                acc[i] = acc[i] + w0 * r0[i] + w1 * r1[i] + w2 * r2[i] + w3 * r3[i];
            }
            ci += 4;
        }
        for ci in ci..c_in {
            let wv = wt(ci);
            for (d, &v) in acc.iter_mut().zip(row(ci)) {
                *d += wv * v;
            }
        }
        for b in 0..n {
            for (d, &a) in out.channel_mut(b, co).iter_mut().zip(&acc[b * p..][..p]) {
                *d = T::from_f64(a);
            }
        }
    }
}

/// Cross-correlation with zero padding, grouped channels and no bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (oh, ow) = p.check_input(x)?;
    let [n, _, h, w] = x.shape();
    let c_out = p.out_channels();
    let cin_g = p.weight.channels();
    let cout_g = c_out / p.groups;
    let k = p.kernel();
    let (s, pad) = (p.stride, p.padding);
    let wd = p.weight.data();
    let pointwise = k == 1 && s == 1 && pad == 0;

    let mut out = Tensor::zeros([n, c_out, oh, ow]);
    if pointwise && p.groups == 1 {
        pointwise_into(&pack_channels(x), wd, cin_g, &mut out);
        return Ok(out);
    }
    let mut acc = vec![0.0f64; oh * ow];
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cout_g;
            acc.fill(0.0);
            for cig in 0..cin_g {
                let src = x.channel(b, g * cin_g + cig);
                if pointwise {
                    axpy(&mut acc, wd[co * cin_g + cig].to_f64(), src);
                    continue;
                }
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(oh, h, ky, s, pad);
                    for kx in 0..k {
                        let wv = wd[((co * cin_g + cig) * k + ky) * k + kx].to_f64();
                        let (xlo, xhi) = valid_range(ow, w, kx, s, pad);
                        for oy in ylo..yhi {
                            let row = &src[(oy * s + ky - pad) * w..][..w];
                            let dst = &mut acc[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let off = kx as isize - pad as isize;
                                let from = (xlo as isize + off) as usize;
                                let to = (xhi as isize + off) as usize;
                                axpy(&mut dst[xlo..xhi], wv, &row[from..to]);
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate().take(xhi).skip(xlo) {
                                    *d += wv * row[ox * s + kx - pad].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            for (d, &a) in out.channel_mut(b, co).iter_mut().zip(&acc) {
                *d = T::from_f64(a);
            }
        }
    }
    Ok(out)
}

/// Per-channel affine normalisation with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = f32> {
    pub name: String,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_NORM_MOMENTUM: f64 = 0.1;

impl<T: Scalar> NormParams<T> {
    /// Scale 1, shift 0, mean 0, variance 1.
    pub fn identity(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: vec![T::from_f64(1.0); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::from_f64(1.0); channels],
            eps: DEFAULT_NORM_EPS,
            momentum: DEFAULT_NORM_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return dim_err(format!(
                "{}: normalisation over {} channels applied to {} channels",
                self.name,
                self.channels(),
                x.channels()
            ));
        }
        Ok(())
    }

    /// Blend batch statistics into the running estimates. `var` is the biased
    /// batch variance; the running variance receives the unbiased estimate.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            let rm = self.running_mean[c].to_f64();
            let rv = self.running_var[c].to_f64();
            self.running_mean[c] = T::from_f64((1.0 - m) * rm + m * mean[c]);
            self.running_var[c] = T::from_f64((1.0 - m) * rv + m * var[c] * correction);
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn batch_statistics<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let count = (x.batch() * x.plane()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for n in 0..x.batch() {
            sum += x.channel(n, ch).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for n in 0..x.batch() {
            sq += x
                .channel(n, ch)
                .iter()
                .map(|v| (v.to_f64() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    (mean, var)
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per channel.
pub(crate) fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Tensor<T> {
    let mut out = x.clone();
    for ch in 0..x.channels() {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (g, b) = (gamma[ch].to_f64(), beta[ch].to_f64());
        for n in 0..x.batch() {
            for v in out.channel_mut(n, ch) {
                *v = T::from_f64((v.to_f64() - mean[ch]) * inv * g + b);
            }
        }
    }
    out
}

/// Batch normalisation. Training mode normalises with batch statistics and
/// updates the running estimates in `p`; inference mode uses the running
/// estimates and leaves `p` untouched.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    p: &mut NormParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    p.check(x)?;
    if training {
        let (mean, var) = batch_statistics(x);
        let out = normalize(x, &mean, &var, &p.gamma, &p.beta, p.eps);
        p.update_running(&mean, &var, x.batch() * x.plane());
        Ok(out)
    } else {
        Ok(batch_norm_inference(x, p))
    }
}

pub(crate) fn batch_norm_inference<T: Scalar>(x: &Tensor<T>, p: &NormParams<T>) -> Tensor<T> {
    let mean: Vec<f64> = p.running_mean.iter().map(|v| v.to_f64()).collect();
    let var: Vec<f64> = p.running_var.iter().map(|v| v.to_f64()).collect();
    normalize(x, &mean, &var, &p.gamma, &p.beta, p.eps)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Spatial mean per channel, output `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let p = x.plane() as f64;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let s: f64 = x.channel(b, ch).iter().map(|v| v.to_f64()).sum();
            out.data[b * c + ch] = T::from_f64(s / p);
        }
    }
    out
}

/// Fully connected layer. `weight` is `(in_features, out_features)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = f32> {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if weight.len() != in_features * out_features || bias.len() != out_features {
            return dim_err(format!(
                "linear {in_features}->{out_features} needs {} weights and {out_features} biases",
                in_features * out_features
            ));
        }
        Ok(Self {
            name: name.into(),
            in_features,
            out_features,
            weight,
            bias,
        })
    }
}

/// `x (N, F)` times `W (F, O)` plus `b`. Inputs of shape `(N, C, H, W)` are
/// flattened to `F = C * H * W`; the result is `(N, O, 1, 1)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let f = x.channels() * x.plane();
    if f != p.in_features {
        return dim_err(format!(
            "{}: expected {} features, got {f}",
            p.name, p.in_features
        ));
    }
    let (n, o) = (x.batch(), p.out_features);
    let mut out = Tensor::zeros([n, o, 1, 1]);
    let mut acc = vec![0.0f64; o];
    for b in 0..n {
        for (j, a) in acc.iter_mut().enumerate() {
            *a = p.bias[j].to_f64();
        }
        let row = &x.data[b * f..(b + 1) * f];
        for (i, &xi) in row.iter().enumerate() {
            let xv = xi.to_f64();
            for (a, &wv) in acc.iter_mut().zip(&p.weight[i * o..(i + 1) * o]) {
                *a += xv * wv.to_f64();
            }
        }
        for (d, &a) in out.data[b * o..(b + 1) * o].iter_mut().zip(&acc) {
            *d = T::from_f64(a);
        }
    }
    Ok(out)
}

/// Channel-wise concatenation; `a`'s channels come first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return dim_err(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let p = a.plane();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data[n * ca * p..(n + 1) * ca * p]);
        data.extend_from_slice(&b.data[n * cb * p..(n + 1) * cb * p]);
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}
