//! Differentiable building blocks with hand-written backward passes.
//!
//! Each layer's `forward` returns its output together with a cache, and
//! `backward` consumes that cache, accumulates parameter gradients into a
//! gradient container of the same type, and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{MapShape, Real, Tensor};

/// Visits the named parameter tensors of a model in a fixed order.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn tensor_refs(&self) -> Vec<&Tensor<T>> {
        let mut refs = Vec::new();
        self.visit("", &mut |_, t| refs.push(t));
        refs
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.zero_grads();
        z
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = (gain / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// 2-D convolution over `[C, N, H, W]` activations via im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in * k * k]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    input: MapShape,
    out_h: usize,
    out_w: usize,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-normal weights with variance `gain / fan_in`; zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: he_normal(&[out_channels, fan_in], fan_in, gain, rng),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Output columns `xo` whose input column `xo * stride + kj - padding`
    /// lies inside `0..width`, as `(first, count, first input column)`.
    fn valid_columns(&self, kj: usize, width: usize, ow: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let first = p.saturating_sub(kj).div_ceil(s);
        // largest xo with xo * s + kj < width + p
        let end = if width + p > kj {
            ((width + p - kj - 1) / s + 1).min(ow)
        } else {
            0
        };
        let count = end.saturating_sub(first);
        (first, count, (first * s + kj).saturating_sub(p))
    }

    fn im2col(&self, x: &Tensor<T>, ms: MapShape, oh: usize, ow: usize) -> Vec<T> {
        let (k, s) = (self.kernel, self.stride);
        let ncols = ms.batch * oh * ow;
        let mut cols = vec![T::zero(); ms.channels * k * k * ncols];
        let src = x.data();
        for ci in 0..ms.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (x0, count, ix0) = self.valid_columns(kj, ms.width, ow);
                    if count == 0 {
                        continue;
                    }
                    for n in 0..ms.batch {
                        let plane = &src[(ci * ms.batch + n) * ms.plane()..][..ms.plane()];
                        for y in 0..oh {
                            let iy = (y * s + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= ms.height as isize {
                                continue;
                            }
                            let in_row = &plane[iy as usize * ms.width..][..ms.width];
                            let out_row = &mut dst[(n * oh + y) * ow..][x0..x0 + count];
                            if s == 1 {
                                out_row.copy_from_slice(&in_row[ix0..ix0 + count]);
                            } else {
                                for (o, &v) in out_row.iter_mut().zip(in_row[ix0..].iter().step_by(s)) {
                                    *o = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], ms: MapShape, oh: usize, ow: usize) -> Tensor<T> {
        let (k, s) = (self.kernel, self.stride);
        let ncols = ms.batch * oh * ow;
        let mut dx = Tensor::zeros(&ms.dims());
        let plane_len = ms.plane();
        let out = dx.data_mut();
        for ci in 0..ms.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &dcols[row * ncols..(row + 1) * ncols];
                    let (x0, count, ix0) = self.valid_columns(kj, ms.width, ow);
                    if count == 0 {
                        continue;
                    }
                    for n in 0..ms.batch {
                        let plane = &mut out[(ci * ms.batch + n) * plane_len..][..plane_len];
                        for y in 0..oh {
                            let iy = (y * s + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= ms.height as isize {
                                continue;
                            }
                            let in_row = &mut plane[iy as usize * ms.width..][..ms.width];
                            let g_row = &src[(n * oh + y) * ow..][x0..x0 + count];
                            if s == 1 {
                                for (d, &g) in in_row[ix0..ix0 + count].iter_mut().zip(g_row) {
                                    *d += g;
                                }
                            } else {
                                for (d, &g) in in_row[ix0..].iter_mut().step_by(s).zip(g_row) {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let ms = MapShape::of(x);
        assert_eq!(ms.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(ms.height, ms.width);
        let cols = self.im2col(x, ms, oh, ow);
        let ncols = ms.batch * oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[self.out_channels, ms.batch, oh, ow]);
        if let Some(b) = &self.bias {
            for (o, row) in out.data_mut().chunks_mut(ncols).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        T::gemm(
            self.out_channels,
            kk,
            ncols,
            T::one(),
            self.weight.data(),
            (kk as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::one(),
            out.data_mut(),
            (ncols as isize, 1),
        );
        (
            out,
            ConvCache {
                cols,
                input: ms,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let ms = cache.input;
        let ncols = ms.batch * cache.out_h * cache.out_w;
        let kk = self.in_channels * self.kernel * self.kernel;
        debug_assert_eq!(dy.len(), self.out_channels * ncols);
        // dW += dY · colsᵀ
        T::gemm(
            self.out_channels,
            ncols,
            kk,
            T::one(),
            dy.data(),
            (ncols as isize, 1),
            &cache.cols,
            (1, ncols as isize),
            T::one(),
            grad.weight.data_mut(),
            (kk as isize, 1),
        );
        if let Some(gb) = &mut grad.bias {
            for (o, row) in dy.data().chunks(ncols).enumerate() {
                gb.data_mut()[o] += row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * ncols];
        // dcols = Wᵀ · dY
        T::gemm(
            kk,
            self.out_channels,
            ncols,
            T::one(),
            self.weight.data(),
            (1, kk as isize),
            dy.data(),
            (ncols as isize, 1),
            T::zero(),
            &mut dcols,
            (ncols as isize, 1),
        );
        Some(self.col2im(&dcols, ms, cache.out_h, cache.out_w))
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }
}

/// Per-sample, per-channel normalization with a learned scale and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm<T> {
    pub scale: Tensor<T>,
    pub offset: Tensor<T>,
    pub eps: f64,
}

pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            offset: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let ms = MapShape::of(x);
        let plane = ms.plane();
        let m = T::from_usize(plane).unwrap();
        let eps = T::lit(self.eps);
        let mut normalized = x.clone();
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(ms.channels * ms.batch);
        for (seg, (xh, y)) in normalized
            .data_mut()
            .chunks_mut(plane)
            .zip(out.data_mut().chunks_mut(plane))
            .enumerate()
        {
            let c = seg / ms.batch;
            let mean = xh.iter().fold(T::zero(), |a, &v| a + v) / m;
            let var = xh.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / m;
            let is = T::one() / (var + eps).sqrt();
            let (g, b) = (self.scale.data()[c], self.offset.data()[c]);
            for (v, o) in xh.iter_mut().zip(y.iter_mut()) {
                *v = (*v - mean) * is;
                *o = g * *v + b;
            }
            inv_std.push(is);
        }
        (out, NormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let ms = MapShape::of(dy);
        let plane = ms.plane();
        let m = T::from_usize(plane).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for (seg, ((xh, g), d)) in cache
            .normalized
            .data()
            .chunks(plane)
            .zip(dy.data().chunks(plane))
            .zip(dx.data_mut().chunks_mut(plane))
            .enumerate()
        {
            let c = seg / ms.batch;
            let gamma = self.scale.data()[c];
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for (&x, &gv) in xh.iter().zip(g) {
                sum_g += gv;
                sum_gx += gv * x;
            }
            grad.scale.data_mut()[c] += sum_gx;
            grad.offset.data_mut()[c] += sum_g;
            // dx = γ·σ⁻¹/M · (M·g − Σg − x̂·Σ(g·x̂))
            let k = gamma * cache.inv_std[seg] / m;
            for ((o, &x), &gv) in d.iter_mut().zip(xh).zip(g) {
                *o = k * (m * gv - sum_g - x * sum_gx);
            }
        }
        dx
    }
}

impl<T: Real> Parameters<T> for InstanceNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&format!("{prefix}scale"), &self.scale);
        f(&format!("{prefix}offset"), &self.offset);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}scale"), &mut self.scale);
        f(&format!("{prefix}offset"), &mut self.offset);
    }
}

/// Fully connected layer on `[F, N]` feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: he_normal(&[output, input], input, gain, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (fin, n) = (x.shape()[0], x.shape()[1]);
        assert_eq!(fin, self.in_features(), "linear input features");
        let fout = self.out_features();
        let mut out = Tensor::zeros(&[fout, n]);
        for (o, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            row.fill(self.bias.data()[o]);
        }
        T::gemm(
            fout,
            fin,
            n,
            T::one(),
            self.weight.data(),
            (fin as isize, 1),
            x.data(),
            (n as isize, 1),
            T::one(),
            out.data_mut(),
            (n as isize, 1),
        );
        out
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let (fin, n) = (x.shape()[0], x.shape()[1]);
        let fout = self.out_features();
        T::gemm(
            fout,
            n,
            fin,
            T::one(),
            dy.data(),
            (n as isize, 1),
            x.data(),
            (1, n as isize),
            T::one(),
            grad.weight.data_mut(),
            (fin as isize, 1),
        );
        for (o, row) in dy.data().chunks(n.max(1)).enumerate() {
            grad.bias.data_mut()[o] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
        let mut dx = Tensor::zeros(&[fin, n]);
        T::gemm(
            fin,
            fout,
            n,
            T::one(),
            self.weight.data(),
            (1, fin as isize),
            dy.data(),
            (n as isize, 1),
            T::zero(),
            dx.data_mut(),
            (n as isize, 1),
        );
        dx
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&format!("{prefix}weight"), &self.weight);
        f(&format!("{prefix}bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Backward of [`relu`] given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |y, g| if y > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Backward of [`leaky_relu`] given its output (sign is preserved for positive slopes).
pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    zip_map(y, dy, |y, g| if y > T::zero() { g } else { g * s })
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |y, g| g * (T::one() - y * y))
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |y, g| g * y * (T::one() - y))
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let ms = MapShape::of(x);
    let (h2, w2) = (ms.height * 2, ms.width * 2);
    let mut out = Tensor::zeros(&[ms.channels, ms.batch, h2, w2]);
    for (src, dst) in x.data().chunks(ms.plane()).zip(out.data_mut().chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let s = &src[(y / 2) * ms.width..][..ms.width];
            for (xo, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = s[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let ms = MapShape::of(dy);
    let (h, w) = (ms.height / 2, ms.width / 2);
    let mut dx = Tensor::zeros(&[ms.channels, ms.batch, h, w]);
    for (src, dst) in dy.data().chunks(ms.plane()).zip(dx.data_mut().chunks_mut(h * w)) {
        for y in 0..ms.height {
            for xo in 0..ms.width {
                dst[(y / 2) * w + xo / 2] += src[y * ms.width + xo];
            }
        }
    }
    dx
}

/// Spatial mean of each `(channel, sample)` plane: `[C, N, H, W]` → `[C, N]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let ms = MapShape::of(x);
    let m = T::from_usize(ms.plane()).unwrap();
    let data = x
        .data()
        .chunks(ms.plane())
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / m)
        .collect();
    Tensor::from_vec(&[ms.channels, ms.batch], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, input: MapShape) -> Tensor<T> {
    let m = T::from_usize(input.plane()).unwrap();
    let mut dx = Tensor::zeros(&input.dims());
    for (p, &g) in dx.data_mut().chunks_mut(input.plane()).zip(dy.data()) {
        p.fill(g / m);
    }
    dx
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_map(a, b, |x, y| x + y)
}

/// Inverted dropout mask: zero with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Numerically stable softmax cross-entropy over `[C, N]` logits.
///
/// Returns the batch-mean loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (c, n) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(&[c, n]);
    let mut loss = T::zero();
    let nf = T::from_usize(n).unwrap();
    let x = logits.data();
    for (j, &label) in labels.iter().enumerate() {
        let max = (0..c).map(|i| x[i * n + j]).fold(T::neg_infinity(), T::max);
        let sum = (0..c).fold(T::zero(), |a, i| a + (x[i * n + j] - max).exp());
        let log_z = max + sum.ln();
        loss += log_z - x[label * n + j];
        for i in 0..c {
            let p = (x[i * n + j] - log_z).exp();
            let target = if i == label { T::one() } else { T::zero() };
            grad.data_mut()[i * n + j] = (p - target) / nf;
        }
    }
    (loss / nf, grad)
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Parameters<T>>(params: &P, learning_rate: f64, beta1: f64) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self {
            learning_rate,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second_moment: m.clone(),
            first_moment: m,
        }
    }

    pub fn update<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let grads = grads.tensor_refs();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::lit(self.learning_rate / c1);
        let c2 = T::lit(c2);
        let (tb1, tb2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.eps));
        let mut idx = 0;
        let (ms, vs) = (&mut self.first_moment, &mut self.second_moment);
        params.visit_mut("", &mut |_, p| {
            let g = grads[idx].data();
            let m = ms[idx].data_mut();
            let v = vs[idx].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = tb1 * *m + (T::one() - tb1) * g;
                *v = tb2 * *v + (T::one() - tb2) * g * g;
                *p -= step_size * *m / ((*v / c2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}
