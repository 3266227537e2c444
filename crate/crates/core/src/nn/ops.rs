//! Layer kernels: convolution, batch normalization, activations, linear.
//!
//! Parameters live in one flat `f32` vector owned by the network; each layer
//! stores offsets into it. Gradients use the same layout.

use std::cell::Cell;

use super::ImageBatch;

/// `c = alpha * a · b + beta * c` on row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose sizes match the (m, k, n) shapes and
    // strides; matrixmultiply never reads or writes outside those bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weight offset; the weight is `[k*k*cin, cout]` with rows ordered (ky, kx, ci).
    pub w_off: usize,
}

impl Conv {
    pub fn num_params(&self) -> usize {
        self.k * self.k * self.cin * self.cout
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid kernel-column range `[lo, hi)` for output column `ox`.
    fn kx_range(&self, ox: usize, w: usize) -> (usize, usize) {
        let start = (ox * self.stride) as isize - self.pad as isize;
        let lo = (-start).max(0) as usize;
        let hi = (w as isize - start).clamp(0, self.k as isize) as usize;
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &ImageBatch, ho: usize, wo: usize) -> Vec<f32> {
        let kk = self.k * self.k * self.cin;
        let mut cols = vec![0.0f32; x.n * ho * wo * kk];
        let cin = self.cin;
        for n in 0..x.n {
            for oy in 0..ho {
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let line = (n * x.h + iy as usize) * x.w;
                    for ox in 0..wo {
                        let (lo, hi) = self.kx_range(ox, x.w);
                        if lo == hi {
                            continue;
                        }
                        let ix = ox * self.stride + lo - self.pad;
                        let len = (hi - lo) * cin;
                        let src = (line + ix) * cin;
                        let dst = ((n * ho + oy) * wo + ox) * kk + (ky * self.k + lo) * cin;
                        cols[dst..dst + len].copy_from_slice(&x.data[src..src + len]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], dx: &mut ImageBatch, ho: usize, wo: usize) {
        let kk = self.k * self.k * self.cin;
        let cin = self.cin;
        for n in 0..dx.n {
            for oy in 0..ho {
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= dx.h as isize {
                        continue;
                    }
                    let line = (n * dx.h + iy as usize) * dx.w;
                    for ox in 0..wo {
                        let (lo, hi) = self.kx_range(ox, dx.w);
                        if lo == hi {
                            continue;
                        }
                        let ix = ox * self.stride + lo - self.pad;
                        let len = (hi - lo) * cin;
                        let dst = (line + ix) * cin;
                        let src = ((n * ho + oy) * wo + ox) * kk + (ky * self.k + lo) * cin;
                        for (d, s) in dx.data[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f32], x: &ImageBatch, macs: Option<&Cell<u64>>) -> ImageBatch {
        debug_assert_eq!(x.c, self.cin);
        let ho = self.out_side(x.h);
        let wo = self.out_side(x.w);
        let rows = x.n * ho * wo;
        let kk = self.k * self.k * self.cin;
        let w = &params[self.w_off..self.w_off + self.num_params()];
        let mut y = ImageBatch::zeros(x.n, ho, wo, self.cout);
        if self.is_pointwise() {
            gemm(rows, kk, self.cout, &x.data, (kk as isize, 1), w, (self.cout as isize, 1), 0.0, &mut y.data);
        } else {
            let cols = self.im2col(x, ho, wo);
            gemm(rows, kk, self.cout, &cols, (kk as isize, 1), w, (self.cout as isize, 1), 0.0, &mut y.data);
        }
        if let Some(counter) = macs {
            counter.set(counter.get() + (ho * wo * kk * self.cout) as u64 * x.n as u64);
        }
        y
    }

    /// Accumulates dW into `grads` (when given) and returns dX (when asked).
    pub fn backward(
        &self,
        params: &[f32],
        x: &ImageBatch,
        dy: &ImageBatch,
        grads: Option<&mut [f32]>,
        want_dx: bool,
    ) -> Option<ImageBatch> {
        let ho = dy.h;
        let wo = dy.w;
        let rows = x.n * ho * wo;
        let kk = self.k * self.k * self.cin;
        let cols_owned;
        let cols: &[f32] = if self.is_pointwise() {
            &x.data
        } else if grads.is_some() {
            cols_owned = self.im2col(x, ho, wo);
            &cols_owned
        } else {
            &[]
        };
        if let Some(g) = grads {
            let gw = &mut g[self.w_off..self.w_off + self.num_params()];
            // dW[kk, cout] += cols^T · dY
            gemm(kk, rows, self.cout, cols, (1, kk as isize), &dy.data, (self.cout as isize, 1), 1.0, gw);
        }
        if !want_dx {
            return None;
        }
        let w = &params[self.w_off..self.w_off + self.num_params()];
        let mut dx = ImageBatch::zeros(x.n, x.h, x.w, x.c);
        if self.is_pointwise() {
            gemm(rows, self.cout, kk, &dy.data, (self.cout as isize, 1), w, (1, self.cout as isize), 0.0, &mut dx.data);
        } else {
            let mut dcols = vec![0.0f32; rows * kk];
            gemm(rows, self.cout, kk, &dy.data, (self.cout as isize, 1), w, (1, self.cout as isize), 0.0, &mut dcols);
            self.col2im(&dcols, &mut dx, ho, wo);
        }
        Some(dx)
    }
}

pub(crate) const BN_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub c: usize,
    /// gamma at `p_off`, beta at `p_off + c`.
    pub p_off: usize,
    /// running mean at `b_off`, running variance at `b_off + c`.
    pub b_off: usize,
}

pub(crate) struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm {
    /// Normalizes `x`; with `running` given, uses batch statistics and updates
    /// the running estimates, otherwise uses the stored running estimates.
    pub fn forward(
        &self,
        params: &[f32],
        buffers: &[f32],
        running: Option<&mut [f32]>,
        x: &ImageBatch,
    ) -> (ImageBatch, BnCache) {
        let c = self.c;
        let rows = x.data.len() / c;
        let gamma = &params[self.p_off..self.p_off + c];
        let beta = &params[self.p_off + c..self.p_off + 2 * c];
        let (mean, var, batch_stats) = match running {
            Some(run) => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for r in x.data.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(r) {
                        *m += v as f64;
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                for r in x.data.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                        let d = v as f64 - m;
                        *s += d * d;
                    }
                }
                for s in &mut var {
                    *s /= rows as f64;
                }
                let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
                for j in 0..c {
                    let rm = &mut run[self.b_off + j];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j] as f32;
                    let rv = &mut run[self.b_off + c + j];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * (var[j] * unbias) as f32;
                }
                (
                    mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                    var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                    true,
                )
            }
            None => (
                buffers[self.b_off..self.b_off + c].to_vec(),
                buffers[self.b_off + c..self.b_off + 2 * c].to_vec(),
                false,
            ),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut y = ImageBatch::zeros(x.n, x.h, x.w, c);
        for ((xr, hr), yr) in x.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.data.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                yr[j] = gamma[j] * h + beta[j];
            }
        }
        (y, BnCache { xhat, inv_std, batch_stats })
    }

    pub fn backward(
        &self,
        params: &[f32],
        cache: &BnCache,
        dy: &ImageBatch,
        grads: Option<&mut [f32]>,
    ) -> ImageBatch {
        let c = self.c;
        let rows = dy.data.len() / c;
        let gamma = &params[self.p_off..self.p_off + c];
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (dr, hr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] += dr[j] as f64;
                sum_dy_xhat[j] += (dr[j] * hr[j]) as f64;
            }
        }
        if let Some(g) = grads {
            for j in 0..c {
                g[self.p_off + j] += sum_dy_xhat[j] as f32;
                g[self.p_off + c + j] += sum_dy[j] as f32;
            }
        }
        let mut dx = ImageBatch::zeros(dy.n, dy.h, dy.w, c);
        if cache.batch_stats {
            let inv_rows = 1.0 / rows as f64;
            let mean_dy: Vec<f32> = sum_dy.iter().map(|v| (v * inv_rows) as f32).collect();
            let mean_dy_xhat: Vec<f32> = sum_dy_xhat.iter().map(|v| (v * inv_rows) as f32).collect();
            for ((dr, hr), xr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)).zip(dx.data.chunks_exact_mut(c)) {
                for j in 0..c {
                    xr[j] = gamma[j] * cache.inv_std[j] * (dr[j] - mean_dy[j] - hr[j] * mean_dy_xhat[j]);
                }
            }
        } else {
            for (dr, xr) in dy.data.chunks_exact(c).zip(dx.data.chunks_exact_mut(c)) {
                for j in 0..c {
                    xr[j] = gamma[j] * cache.inv_std[j] * dr[j];
                }
            }
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Activation {
    Relu,
    /// `x · sigmoid(x)`
    Silu,
}

/// `e^x` via `2^t = 2^round(t) · 2^frac` with a degree-6 polynomial for the
/// fractional part; relative error below 5e-6 and branch-free so it vectorizes.
#[inline]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
    let t = (x * std::f32::consts::LOG2_E).clamp(-126.0, 126.0);
    let r = (t + ROUND) - ROUND;
    let f = t - r;
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5 + f * (0.055_504_11 + f * (0.009_618_129 + f * (0.001_333_355 + f * 0.000_154_035_3)))));
    let bits = ((r as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

impl Activation {
    pub fn forward(self, x: &ImageBatch) -> ImageBatch {
        let mut y = x.clone();
        match self {
            Activation::Relu => y.data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Silu => y.data.iter_mut().for_each(|v| *v *= sigmoid(*v)),
        }
        y
    }

    /// `x` is the pre-activation input.
    pub fn backward(self, x: &ImageBatch, dy: &ImageBatch) -> ImageBatch {
        let mut dx = dy.clone();
        match self {
            Activation::Relu => {
                for (d, &v) in dx.data.iter_mut().zip(&x.data) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Silu => {
                for (d, &v) in dx.data.iter_mut().zip(&x.data) {
                    let s = sigmoid(v);
                    *d *= s * (1.0 + v * (1.0 - s));
                }
            }
        }
        dx
    }
}

/// Fully connected layer on pooled features: weight `[cin, cout]`, bias `[cout]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Linear {
    pub fn forward(&self, params: &[f32], x: &[f32], n: usize, macs: Option<&Cell<u64>>) -> Vec<f32> {
        let w = &params[self.w_off..self.w_off + self.cin * self.cout];
        let b = &params[self.b_off..self.b_off + self.cout];
        let mut y = vec![0.0f32; n * self.cout];
        for r in y.chunks_exact_mut(self.cout) {
            r.copy_from_slice(b);
        }
        gemm(n, self.cin, self.cout, x, (self.cin as isize, 1), w, (self.cout as isize, 1), 1.0, &mut y);
        if let Some(counter) = macs {
            counter.set(counter.get() + (self.cin * self.cout * n) as u64);
        }
        y
    }

    pub fn backward(&self, params: &[f32], x: &[f32], dy: &[f32], n: usize, grads: Option<&mut [f32]>) -> Vec<f32> {
        if let Some(g) = grads {
            debug_assert_eq!(self.b_off, self.w_off + self.cin * self.cout);
            let (gw, gb) = g[self.w_off..self.b_off + self.cout].split_at_mut(self.cin * self.cout);
            gemm(self.cin, n, self.cout, x, (1, self.cin as isize), dy, (self.cout as isize, 1), 1.0, gw);
            for r in dy.chunks_exact(self.cout) {
                for (b, &d) in gb.iter_mut().zip(r) {
                    *b += d;
                }
            }
        }
        let w = &params[self.w_off..self.w_off + self.cin * self.cout];
        let mut dx = vec![0.0f32; n * self.cin];
        gemm(n, self.cout, self.cin, dy, (self.cout as isize, 1), w, (1, self.cout as isize), 0.0, &mut dx);
        dx
    }
}

pub(crate) fn global_avg_pool(x: &ImageBatch) -> Vec<f32> {
    let hw = x.h * x.w;
    let mut out = vec![0.0f32; x.n * x.c];
    for n in 0..x.n {
        let o = &mut out[n * x.c..(n + 1) * x.c];
        for p in 0..hw {
            let r = &x.data[(n * hw + p) * x.c..(n * hw + p + 1) * x.c];
            for (a, &v) in o.iter_mut().zip(r) {
                *a += v;
            }
        }
        let inv = 1.0 / hw as f32;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub(crate) fn global_avg_pool_backward(dy: &[f32], n: usize, h: usize, w: usize, c: usize) -> ImageBatch {
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut dx = ImageBatch::zeros(n, h, w, c);
    for i in 0..n {
        let g = &dy[i * c..(i + 1) * c];
        for p in 0..hw {
            let r = &mut dx.data[(i * hw + p) * c..(i * hw + p + 1) * c];
            for (d, &v) in r.iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    dx
}
