//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are `NCHW` (or `N x features`) slices. A layer struct doubles
//! as its own gradient container: `backward` accumulates into a second
//! instance of the same type.

use rand::Rng;

use super::{gemm, Scalar, Tensor};

/// Output extent of a convolution over one spatial axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by output index `o` at kernel offset `k`.
    fn source(o: usize, k: usize, stride: usize, padding: usize, limit: usize) -> Option<usize> {
        (o * stride + k).checked_sub(padding).filter(|&i| i < limit)
    }

    /// `cols[(c*k + ky)*k + kx, oy*out_w + ox] = x[c, oy*s + ky - p, ox*s + kx - p]`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let out = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match Self::source(oy, ky, self.stride, self.padding, self.h) {
                            None => out.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in out.iter_mut().enumerate() {
                                    *v = match Self::source(ox, kx, self.stride, self.padding, self.w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patch::im2col`]: scatters-adds columns back into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let k = self.kernel;
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let Some(iy) = Self::source(oy, ky, self.stride, self.padding, self.h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in 0..self.out_w {
                            if let Some(ix) = Self::source(ox, kx, self.stride, self.padding, self.w) {
                                dst[ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[outputs, inputs], bound, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Tensor::zeros(&self.weight.shape),
            bias: Tensor::zeros(&self.bias.shape),
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let out = self.outputs();
        let mut y: Vec<T> = self.bias.data.iter().copied().cycle().take(n * out).collect();
        gemm(false, true, n, out, self.inputs(), x, &self.weight.data, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dy: &[T], n: usize, grad: &mut Self, need_dx: bool) -> Option<Vec<T>> {
        let (inp, out) = (self.inputs(), self.outputs());
        gemm(true, false, out, inp, n, dy, x, T::one(), &mut grad.weight.data);
        for row in dy.chunks_exact(out) {
            for (g, &d) in grad.bias.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); n * inp];
            gemm(false, false, n, inp, out, dy, &self.weight.data, T::zero(), &mut dx);
            dx
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 2-D convolution, weight laid out `[out, in * k * k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Per-sample im2col buffers kept for the backward pass.
pub struct ConvCache<T> {
    cols: Vec<T>,
    h: usize,
    w: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Tensor::uniform(&[out_ch, fan_in], (6.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out_ch]),
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.padding),
            conv_out(w, self.kernel, self.stride, self.padding),
        )
    }

    fn patch(&self, h: usize, w: usize) -> Patch {
        let (out_h, out_w) = self.out_size(h, w);
        Patch {
            channels: self.in_channels(),
            h,
            w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Tensor::zeros(&self.weight.shape),
            bias: Tensor::zeros(&self.bias.shape),
            ..*self
        }
    }

    fn run(&self, x: &[T], n: usize, h: usize, w: usize, keep: bool) -> (Vec<T>, Option<ConvCache<T>>) {
        let patch = self.patch(h, w);
        let (rows, ncols) = (patch.rows(), patch.cols());
        let out_ch = self.out_channels();
        let in_len = patch.channels * h * w;
        let mut y = vec![T::zero(); n * out_ch * ncols];
        let mut cols = vec![T::zero(); if keep { n * rows * ncols } else { rows * ncols }];
        for s in 0..n {
            let buf = if keep {
                &mut cols[s * rows * ncols..(s + 1) * rows * ncols]
            } else {
                &mut cols[..]
            };
            patch.im2col(&x[s * in_len..(s + 1) * in_len], buf);
            let ys = &mut y[s * out_ch * ncols..(s + 1) * out_ch * ncols];
            for (c, plane) in ys.chunks_exact_mut(ncols).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.data[c]);
            }
            gemm(false, false, out_ch, ncols, rows, &self.weight.data, buf, T::one(), ys);
        }
        (y, keep.then_some(ConvCache { cols, h, w }))
    }

    pub fn forward(&self, x: &[T], n: usize, h: usize, w: usize) -> (Vec<T>, ConvCache<T>) {
        let (y, cache) = self.run(x, n, h, w, true);
        (y, cache.unwrap())
    }

    pub fn infer(&self, x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        self.run(x, n, h, w, false).0
    }

    pub fn backward(&self, cache: &ConvCache<T>, dy: &[T], n: usize, grad: &mut Self, need_dx: bool) -> Option<Vec<T>> {
        let patch = self.patch(cache.h, cache.w);
        let (rows, ncols) = (patch.rows(), patch.cols());
        let out_ch = self.out_channels();
        let in_len = patch.channels * cache.h * cache.w;
        let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
        let mut dcols = vec![T::zero(); rows * ncols];
        for s in 0..n {
            let cols = &cache.cols[s * rows * ncols..(s + 1) * rows * ncols];
            let dys = &dy[s * out_ch * ncols..(s + 1) * out_ch * ncols];
            gemm(false, true, out_ch, rows, ncols, dys, cols, T::one(), &mut grad.weight.data);
            for (g, plane) in grad.bias.data.iter_mut().zip(dys.chunks_exact(ncols)) {
                *g += plane.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, rows, ncols, out_ch, &self.weight.data, dys, T::zero(), &mut dcols);
                patch.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed 2-D convolution, weight laid out `[in, out * k * k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

pub struct ConvTransposeCache<T> {
    x: Vec<T>,
    h: usize,
    w: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            weight: Tensor::uniform(&[in_ch, out_ch * kernel * kernel], (6.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out_ch]),
            kernel,
            stride,
            padding,
            output_padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_channels(&self) -> usize {
        self.bias.shape[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s - 1) * self.stride + self.kernel + self.output_padding - 2 * self.padding;
        (f(h), f(w))
    }

    /// The equivalent forward convolution maps the output grid back onto the input grid.
    fn patch(&self, h: usize, w: usize) -> Patch {
        let (out_h, out_w) = self.out_size(h, w);
        Patch {
            channels: self.out_channels(),
            h: out_h,
            w: out_w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h: h,
            out_w: w,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvTranspose2d {
            weight: Tensor::zeros(&self.weight.shape),
            bias: Tensor::zeros(&self.bias.shape),
            ..*self
        }
    }

    pub fn infer(&self, x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let patch = self.patch(h, w);
        let (rows, ncols) = (patch.rows(), patch.cols());
        let in_ch = self.in_channels();
        let out_len = patch.channels * patch.h * patch.w;
        let plane = patch.h * patch.w;
        let mut y = vec![T::zero(); n * out_len];
        let mut cols = vec![T::zero(); rows * ncols];
        for s in 0..n {
            let xs = &x[s * in_ch * ncols..(s + 1) * in_ch * ncols];
            gemm(true, false, rows, ncols, in_ch, &self.weight.data, xs, T::zero(), &mut cols);
            let ys = &mut y[s * out_len..(s + 1) * out_len];
            patch.col2im(&cols, ys);
            for (c, p) in ys.chunks_exact_mut(plane).enumerate() {
                let b = self.bias.data[c];
                p.iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }

    pub fn forward(&self, x: &[T], n: usize, h: usize, w: usize) -> (Vec<T>, ConvTransposeCache<T>) {
        (self.infer(x, n, h, w), ConvTransposeCache { x: x.to_vec(), h, w })
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache<T>,
        dy: &[T],
        n: usize,
        grad: &mut Self,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let patch = self.patch(cache.h, cache.w);
        let (rows, ncols) = (patch.rows(), patch.cols());
        let in_ch = self.in_channels();
        let out_len = patch.channels * patch.h * patch.w;
        let plane = patch.h * patch.w;
        let mut dx = need_dx.then(|| vec![T::zero(); n * in_ch * ncols]);
        let mut dcols = vec![T::zero(); rows * ncols];
        for s in 0..n {
            let dys = &dy[s * out_len..(s + 1) * out_len];
            patch.im2col(dys, &mut dcols);
            let xs = &cache.x[s * in_ch * ncols..(s + 1) * in_ch * ncols];
            gemm(false, true, in_ch, rows, ncols, xs, &dcols, T::one(), &mut grad.weight.data);
            for (g, p) in grad.bias.data.iter_mut().zip(dys.chunks_exact(plane)) {
                *g += p.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * in_ch * ncols..(s + 1) * in_ch * ncols];
                gemm(false, false, in_ch, ncols, rows, &self.weight.data, &dcols, T::zero(), dxs);
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(output: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2 over `n * channels` planes. Returns outputs and argmax offsets.
pub fn max_pool2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<T: Scalar>(argmax: &[u32], dy: &[T], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}
