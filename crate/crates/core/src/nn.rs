//! Minimal convolutional layers with hand-written backward passes.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`ParamLayout`];
//! layers only remember offsets into it. That keeps SGD, EMA, checkpoints
//! and finite-difference probes as plain slice arithmetic.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        self.total += len;
        offset
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Square convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w_off: usize,
    b_off: usize,
}

pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w_off = layout.push(format!("{name}.weight"), &[cout, cin, k, k]);
        let b_off = layout.push(format!("{name}.bias"), &[cout]);
        Self {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            w_off,
            b_off,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.cin * self.k * self.k;
        ArrayView2::from_shape((self.cout, n), &params[self.w_off..self.w_off + self.cout * n])
            .expect("weight slice")
    }

    /// Kaiming-normal weights (fan-in), zero bias.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = self.cout * self.cin * self.k * self.k;
        for p in &mut params[self.w_off..self.w_off + n] {
            *p = normal.sample(rng);
        }
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    pub fn zero(&self, params: &mut [f64]) {
        let n = self.cout * self.cin * self.k * self.k;
        params[self.w_off..self.w_off + n].fill(0.0);
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    fn im2col(&self, x: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (cin, h, w) = x.dim();
        let k = self.k;
        let mut cols = Array2::<f64>::zeros((cin * k * k, oh * ow));
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut out = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: ArrayView2<f64>, mut dx: ArrayViewMut3<'_, f64>, oh: usize, ow: usize) {
        let (cin, h, w) = dx.dim();
        let k = self.k;
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((c * k + ky) * k + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[c, iy as usize, ix as usize]] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &Array4<f64>, keep_cache: bool) -> (Array4<f64>, Option<ConvCache>) {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let weight = self.weight(params);
        let bias = &params[self.b_off..self.b_off + self.cout];
        let mut out = Array4::<f64>::zeros((n, self.cout, oh, ow));
        let mut caches = Vec::new();
        for i in 0..n {
            let cols = self.im2col(x.index_axis(Axis(0), i), oh, ow);
            let mut y = weight.dot(&cols);
            for (mut row, &b) in y.outer_iter_mut().zip(bias) {
                row += b;
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((self.cout, oh, ow)).expect("conv output"));
            if keep_cache {
                caches.push(cols);
            }
        }
        let cache = keep_cache.then_some(ConvCache {
            cols: caches,
            in_h: h,
            in_w: w,
        });
        (out, cache)
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, params: &[f64], cache: &ConvCache, dout: &Array4<f64>, grad: &mut [f64], need_dx: bool) -> Option<Array4<f64>> {
        let (n, cout, oh, ow) = dout.dim();
        let weight = self.weight(params);
        let kk = self.cin * self.k * self.k;
        let mut dw = Array2::<f64>::zeros((cout, kk));
        let mut db = Array1::<f64>::zeros(cout);
        let mut dx = need_dx.then(|| Array4::<f64>::zeros((n, self.cin, cache.in_h, cache.in_w)));
        for i in 0..n {
            let d = dout.index_axis(Axis(0), i);
            let d2 = d.to_shape((cout, oh * ow)).expect("contiguous grad");
            dw += &d2.dot(&cache.cols[i].t());
            db += &d2.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                let dcols = weight.t().dot(&d2);
                self.col2im(dcols.view(), dx.index_axis_mut(Axis(0), i), oh, ow);
            }
        }
        for (g, v) in grad[self.w_off..self.w_off + cout * kk].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grad[self.b_off..self.b_off + cout].iter_mut().zip(db.iter()) {
            *g += v;
        }
        dx
    }
}


/// Per-channel batch normalisation. Running statistics live in a separate
/// buffer vector (`buf_off` = running mean, `buf_off + c` = running var).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub c: usize,
    gamma_off: usize,
    beta_off: usize,
    buf_off: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(layout: &mut ParamLayout, buffers: &mut ParamLayout, name: &str, c: usize) -> Self {
        let gamma_off = layout.push(format!("{name}.weight"), &[c]);
        let beta_off = layout.push(format!("{name}.bias"), &[c]);
        let buf_off = buffers.push(format!("{name}.running_mean"), &[c]);
        buffers.push(format!("{name}.running_var"), &[c]);
        Self {
            c,
            gamma_off,
            beta_off,
            buf_off,
        }
    }

    pub fn init(&self, params: &mut [f64], buffers: &mut [f64]) {
        params[self.gamma_off..self.gamma_off + self.c].fill(1.0);
        params[self.beta_off..self.beta_off + self.c].fill(0.0);
        buffers[self.buf_off..self.buf_off + self.c].fill(0.0);
        buffers[self.buf_off + self.c..self.buf_off + 2 * self.c].fill(1.0);
    }

    fn affine(&self, params: &[f64], x: &mut Array4<f64>, mean: &[f64], inv_std: &[f64]) {
        let gamma = &params[self.gamma_off..self.gamma_off + self.c];
        let beta = &params[self.beta_off..self.beta_off + self.c];
        for mut img in x.outer_iter_mut() {
            for (ch, mut plane) in img.outer_iter_mut().enumerate() {
                let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                plane.mapv_inplace(|v| (v - m) * s * g + b);
            }
        }
    }

    pub fn forward_eval(&self, params: &[f64], buffers: &[f64], x: &Array4<f64>) -> Array4<f64> {
        let mean = &buffers[self.buf_off..self.buf_off + self.c];
        let inv_std: Vec<f64> = buffers[self.buf_off + self.c..self.buf_off + 2 * self.c]
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let mut y = x.clone();
        self.affine(params, &mut y, mean, &inv_std);
        y
    }

    /// Normalises with batch statistics and updates the running buffers.
    pub fn forward_train(&self, params: &[f64], buffers: &mut [f64], x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let plane = x.slice(s![.., ch, .., ..]);
            let mu = plane.sum() / m;
            let v = plane.fold(0.0, |acc, &e| acc + (e - mu) * (e - mu)) / m;
            mean[ch] = mu;
            var[ch] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        for mut img in xhat.outer_iter_mut() {
            for (ch, mut plane) in img.outer_iter_mut().enumerate() {
                let (mu, s) = (mean[ch], inv_std[ch]);
                plane.mapv_inplace(|v| (v - mu) * s);
            }
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut buffers[self.buf_off + ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
            let rv = &mut buffers[self.buf_off + c + ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
        }
        let gamma = &params[self.gamma_off..self.gamma_off + c];
        let beta = &params[self.beta_off..self.beta_off + c];
        let mut y = xhat.clone();
        for mut img in y.outer_iter_mut() {
            for (ch, mut plane) in img.outer_iter_mut().enumerate() {
                let (g, b) = (gamma[ch], beta[ch]);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std: Array1::from(inv_std),
            },
        )
    }

    pub fn backward(&self, params: &[f64], cache: &BnCache, dy: &Array4<f64>, grad: &mut [f64]) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let gamma = &params[self.gamma_off..self.gamma_off + c];
        let mut dx = Array4::<f64>::zeros(dy.dim());
        for ch in 0..c {
            let dyc = dy.slice(s![.., ch, .., ..]);
            let xh = cache.xhat.slice(s![.., ch, .., ..]);
            let sum_dy = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            grad[self.gamma_off + ch] += sum_dy_xh;
            grad[self.beta_off + ch] += sum_dy;
            let g = gamma[ch];
            let k = g * cache.inv_std[ch] / m;
            let mut dxc = dx.slice_mut(s![.., ch, .., ..]);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &dyv, &xhv| {
                    *d = k * (m * dyv - sum_dy - xhv * sum_dy_xh);
                });
        }
        dx
    }
}

pub fn relu_forward(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes the gradient where the (post-ReLU) activation is not positive.
pub fn relu_backward(activation: &Array4<f64>, dy: &mut Array4<f64>) {
    ndarray::Zip::from(dy).and(activation).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn first_non_finite(x: &Array4<f64>) -> bool {
    x.iter().any(|v| !v.is_finite())
}
