//! Small f64 building blocks with hand-written backward passes: affine
//! layers, an LSTM cell unrolled over short sequences, and Adam.
//!
//! Parameters live in one flat vector; layers hold offsets into it and
//! gradients share the layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hands out offsets into a flat parameter vector.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    pub len: usize,
}

impl ParamLayout {
    fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn dense(&mut self, inp: usize, out: usize) -> Dense {
        let w_off = self.take(inp * out);
        let b_off = self.take(out);
        Dense { inp, out, w_off, b_off }
    }

    pub fn lstm(&mut self, inp: usize, hid: usize) -> Lstm {
        let w_off = self.take(4 * hid * (inp + hid));
        let b_off = self.take(4 * hid);
        Lstm { inp, hid, w_off, b_off }
    }
}

/// `y = W x + b` with `W` stored row-major as `[out][inp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        let a = (6.0 / (self.inp + self.out) as f64).sqrt();
        for w in &mut p[self.w_off..self.w_off + self.inp * self.out] {
            *w = rng.gen_range(-a..a);
        }
        p[self.b_off..self.b_off + self.out].iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let w = &p[self.w_off..self.w_off + self.inp * self.out];
        (0..self.out)
            .map(|o| {
                let row = &w[o * self.inp..(o + 1) * self.inp];
                p[self.b_off + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = self.w_off + o * self.inp;
            for i in 0..self.inp {
                g[row + i] += d * x[i];
                dx[i] += d * p[row + i];
            }
            g[self.b_off + o] += d;
        }
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect()
}

/// LSTM with gates ordered (input, forget, cell, output); the gate
/// pre-activations are `W [x; h] + b` with `W` of shape `[4·hid][inp + hid]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm {
    pub inp: usize,
    pub hid: usize,
    pub w_off: usize,
    pub b_off: usize,
}

/// Per-step values kept for backpropagation through time.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    inputs: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl Lstm {
    /// Glorot-uniform weights, forget-gate bias 1.
    pub fn init(&self, p: &mut [f64], rng: &mut ChaCha8Rng) {
        let cols = self.inp + self.hid;
        let a = (6.0 / (cols + self.hid) as f64).sqrt();
        for w in &mut p[self.w_off..self.w_off + 4 * self.hid * cols] {
            *w = rng.gen_range(-a..a);
        }
        for j in 0..4 * self.hid {
            p[self.b_off + j] = if (self.hid..2 * self.hid).contains(&j) { 1.0 } else { 0.0 };
        }
    }

    /// Runs from zero state over `xs` in order.
    pub fn forward(&self, p: &[f64], xs: &[Vec<f64>]) -> LstmTrace {
        let hid = self.hid;
        let cols = self.inp + hid;
        let mut tr = LstmTrace {
            inputs: xs.to_vec(),
            h_prev: Vec::new(),
            c_prev: Vec::new(),
            gates: Vec::new(),
            c: Vec::new(),
            h: Vec::new(),
        };
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        for x in xs {
            let mut z = p[self.b_off..self.b_off + 4 * hid].to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &p[self.w_off + r * cols..self.w_off + (r + 1) * cols];
                *zr += row[..self.inp].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    + row[self.inp..].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut gates = vec![0.0; 4 * hid];
            for j in 0..hid {
                gates[j] = sigmoid(z[j]);
                gates[hid + j] = sigmoid(z[hid + j]);
                gates[2 * hid + j] = z[2 * hid + j].tanh();
                gates[3 * hid + j] = sigmoid(z[3 * hid + j]);
            }
            let c_new: Vec<f64> = (0..hid).map(|j| gates[hid + j] * c[j] + gates[j] * gates[2 * hid + j]).collect();
            let h_new: Vec<f64> = (0..hid).map(|j| gates[3 * hid + j] * c_new[j].tanh()).collect();
            tr.h_prev.push(std::mem::replace(&mut h, h_new.clone()));
            tr.c_prev.push(std::mem::replace(&mut c, c_new.clone()));
            tr.gates.push(gates);
            tr.c.push(c_new);
            tr.h.push(h_new);
        }
        tr
    }

    /// Backpropagation through time given `∂L/∂h_t` for every step;
    /// accumulates parameter gradients only.
    pub fn backward(&self, p: &[f64], tr: &LstmTrace, dh_out: &[Vec<f64>], g: &mut [f64]) {
        let hid = self.hid;
        let cols = self.inp + hid;
        let mut dh_next = vec![0.0; hid];
        let mut dc_next = vec![0.0; hid];
        for t in (0..tr.h.len()).rev() {
            let gates = &tr.gates[t];
            let mut dz = vec![0.0; 4 * hid];
            for j in 0..hid {
                let dh = dh_out[t][j] + dh_next[j];
                let tc = tr.c[t][j].tanh();
                let (i, f, gg, o) = (gates[j], gates[hid + j], gates[2 * hid + j], gates[3 * hid + j]);
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * gg * i * (1.0 - i);
                dz[hid + j] = dc * tr.c_prev[t][j] * f * (1.0 - f);
                dz[2 * hid + j] = dc * i * (1.0 - gg * gg);
                dz[3 * hid + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let x = &tr.inputs[t];
            let hp = &tr.h_prev[t];
            let mut dh_prev = vec![0.0; hid];
            for (r, &d) in dz.iter().enumerate() {
                let row = self.w_off + r * cols;
                for k in 0..self.inp {
                    g[row + k] += d * x[k];
                }
                for k in 0..hid {
                    g[row + self.inp + k] += d * hp[k];
                    dh_prev[k] += d * p[row + self.inp + k];
                }
                g[self.b_off + r] += d;
            }
            dh_next = dh_prev;
        }
    }
}

/// Adam for gradient descent on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64]) {
        if self.m.len() != p.len() {
            self.m = vec![0.0; p.len()];
            self.v = vec![0.0; p.len()];
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}
