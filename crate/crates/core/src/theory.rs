//! Sparse-coding sandbox for the purification argument: data `x = Mz + noise`
//! with an orthonormal dictionary, a two-layer symmetric ReLU network, and a
//! comparison of dense-mixture growth with and without pruning before
//! adversarial training.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseCodingConfig {
    pub dim: usize,
    pub sparsity: usize,
    /// Standard deviation of the additive Gaussian input noise.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SparseCodingConfig {
    fn default() -> Self {
        Self { dim: 64, sparsity: 3, noise: 0.05, samples: 512, seed: 0 }
    }
}

/// Column-orthonormal `D×D` dictionary stored column by column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub dim: usize,
    pub cols: Vec<f64>,
}

impl Dictionary {
    pub fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.dim..(j + 1) * self.dim]
    }

    /// Modified Gram-Schmidt on a Gaussian matrix.
    pub fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut cols: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..dim {
            for _ in 0..2 {
                for i in 0..j {
                    let (prev, cur) = cols.split_at_mut(j * dim);
                    let q = &prev[i * dim..(i + 1) * dim];
                    let c = &mut cur[..dim];
                    let d: f64 = q.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                    c.iter_mut().zip(q).for_each(|(c, q)| *c -= d * q);
                }
            }
            let c = &mut cols[j * dim..(j + 1) * dim];
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.iter_mut().for_each(|v| *v /= n);
        }
        Self { dim, cols }
    }

    /// Largest deviation of `MᵀM` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.dim {
            for b in 0..self.dim {
                let d: f64 = self.col(a).iter().zip(self.col(b)).map(|(x, y)| x * y).sum();
                worst = worst.max((d - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseData {
    pub dictionary: Dictionary,
    /// `n × D`, row-major.
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// ±1 labels.
    pub y: Vec<f64>,
    pub n: usize,
}

impl SparseData {
    pub fn row(&self, s: usize) -> &[f64] {
        let d = self.dictionary.dim;
        &self.x[s * d..(s + 1) * d]
    }
}

/// `z` has exactly `k` nonzero entries of random sign; labels are the sign of
/// a planted Gaussian functional of `z`.
pub fn generate(cfg: &SparseCodingConfig) -> Result<SparseData> {
    let d = cfg.dim;
    if cfg.sparsity == 0 || cfg.sparsity > d || cfg.samples == 0 || !(cfg.noise >= 0.0) {
        return Err(Error::Config("need 1 <= sparsity <= dim, samples >= 1 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dictionary = Dictionary::random(d, &mut rng);
    let planted: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = vec![0.0; cfg.samples * d];
    let mut z = vec![0.0; cfg.samples * d];
    let mut y = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        let zs = &mut z[s * d..(s + 1) * d];
        for j in sample(&mut rng, d, cfg.sparsity) {
            zs[j] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let xs = &mut x[s * d..(s + 1) * d];
        for j in 0..d {
            if zs[j] != 0.0 {
                xs.iter_mut().zip(dictionary.col(j)).for_each(|(x, m)| *x += zs[j] * m);
            }
        }
        if cfg.noise > 0.0 {
            for v in xs.iter_mut() {
                *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let f: f64 = zs.iter().zip(&planted).map(|(a, b)| a * b).sum();
        y.push(if f >= 0.0 { 1.0 } else { -1.0 });
    }
    Ok(SparseData { dictionary, x, z, y, n: cfg.samples })
}

/// Per-neuron split of the weights into a pure feature and a dense mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub pure: Vec<Vec<f64>>,
    pub mixture: Vec<Vec<f64>>,
    pub dominant: Vec<usize>,
    /// Projection coefficient onto the dominant column.
    pub coefficient: Vec<f64>,
}

impl Decomposition {
    pub fn max_mixture_norm(&self) -> f64 {
        self.mixture.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).fold(0.0, f64::max)
    }
}

/// `j* = argmax_j |⟨Θ_i, M_j⟩|`, `g_i = ⟨Θ_i, M_j*⟩ M_j*`, `v_i = Θ_i − g_i`.
pub fn decompose(theta: &[f64], width: usize, m: &Dictionary) -> Decomposition {
    let d = m.dim;
    let mut out = Decomposition { pure: vec![], mixture: vec![], dominant: vec![], coefficient: vec![] };
    for i in 0..width {
        let w = &theta[i * d..(i + 1) * d];
        let (j, c) = (0..d)
            .map(|j| (j, w.iter().zip(m.col(j)).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, 0.0f64), |best, cur| if cur.1.abs() > best.1.abs() { cur } else { best });
        let g: Vec<f64> = m.col(j).iter().map(|v| c * v).collect();
        let v: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - b).collect();
        out.pure.push(g);
        out.mixture.push(v);
        out.dominant.push(j);
        out.coefficient.push(c);
    }
    out
}

/// Largest `|‖g‖² + ‖v‖² − ‖Θ‖²|` over neurons.
pub fn pythagorean_error(theta: &[f64], dec: &Decomposition) -> f64 {
    let d = dec.pure.first().map_or(0, Vec::len);
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    (0..dec.pure.len())
        .map(|i| (sq(&dec.pure[i]) + sq(&dec.mixture[i]) - sq(&theta[i * d..(i + 1) * d])).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyNetConfig {
    pub width: usize,
    /// Standard deviation of the smoothing offsets `ρ`.
    pub smoothing: f64,
    pub bias: f64,
    /// Initial weights are `N(0, init_scale² / D)`.
    pub init_scale: f64,
    pub learning_rate: f64,
    /// Inner ascent steps of the ℓ2 adversary.
    pub adv_steps: usize,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self { width: 128, smoothing: 0.05, bias: 0.1, init_scale: 1.0, learning_rate: 0.5, adv_steps: 5 }
    }
}

/// `f(x) = Σ_i ReLU(⟨Θ_i,x⟩ + ρ_i − b) − ReLU(−⟨Θ_i,x⟩ + ρ_i − b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNetState {
    pub theta: Vec<f64>,
    pub bias: f64,
    pub smoothing: f64,
    pub width: usize,
    pub dim: usize,
    pub frozen: Vec<bool>,
}

impl ToyNetState {
    pub fn init(cfg: &ToyNetConfig, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::Config("toy network width must be at least 1".into()));
        }
        let normal = Normal::new(0.0, cfg.init_scale / (dim as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            theta: (0..cfg.width * dim).map(|_| normal.sample(rng)).collect(),
            bias: cfg.bias,
            smoothing: cfg.smoothing,
            width: cfg.width,
            dim,
            frozen: vec![false; cfg.width],
        })
    }

    fn pre(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (d, w) = (self.dim, self.width);
        let mut out = vec![0.0; n * w];
        unsafe {
            matrixmultiply::dgemm(
                n, d, w, 1.0, x.as_ptr(), d as isize, 1, self.theta.as_ptr(), 1, d as isize, 0.0, out.as_mut_ptr(), w as isize, 1,
            );
        }
        out
    }

    /// Logistic loss, `∂L/∂Θ`, and `∂L/∂x` per sample.
    fn loss_grad(&self, x: &[f64], y: &[f64], rho: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (n, d, w) = (y.len(), self.dim, self.width);
        let pre = self.pre(x, n);
        let mut act = vec![0.0; n * w];
        let mut loss = 0.0;
        for s in 0..n {
            let mut f = 0.0;
            for i in 0..w {
                let (u, r) = (pre[s * w + i], rho[s * w + i]);
                let (a, b) = (u + r - self.bias, -u + r - self.bias);
                f += a.max(0.0) - b.max(0.0);
                act[s * w + i] = (a > 0.0) as u8 as f64 + (b > 0.0) as u8 as f64;
            }
            let m = y[s] * f;
            loss += if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
            let dl = -y[s] / (1.0 + m.exp()) / n as f64;
            act[s * w..(s + 1) * w].iter_mut().for_each(|a| *a *= dl);
        }
        let mut g_theta = vec![0.0; w * d];
        let mut g_x = vec![0.0; n * d];
        unsafe {
            matrixmultiply::dgemm(
                w, n, d, 1.0, act.as_ptr(), 1, w as isize, x.as_ptr(), d as isize, 1, 0.0, g_theta.as_mut_ptr(), d as isize, 1,
            );
            matrixmultiply::dgemm(
                n, w, d, 1.0, act.as_ptr(), w as isize, 1, self.theta.as_ptr(), d as isize, 1, 0.0, g_x.as_mut_ptr(), d as isize, 1,
            );
        }
        (loss / n as f64, g_theta, g_x)
    }

    /// Zeroes and freezes the given neurons.
    pub fn prune(&mut self, neurons: &[usize]) {
        for &i in neurons {
            self.frozen[i] = true;
            self.theta[i * self.dim..(i + 1) * self.dim].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Per-sample ℓ2 ascent on the loss, projected onto the ball of radius `tau`.
fn adversarial_inputs(net: &ToyNetState, data: &SparseData, rho: &[f64], tau: f64, steps: usize) -> Vec<f64> {
    if tau == 0.0 || steps == 0 {
        return data.x.clone();
    }
    let d = net.dim;
    let mut delta = vec![0.0; data.x.len()];
    let step = 2.5 * tau / steps as f64;
    for _ in 0..steps {
        let xa: Vec<f64> = data.x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let (_, _, gx) = net.loss_grad(&xa, &data.y, rho);
        for s in 0..data.n {
            let g = &gx[s * d..(s + 1) * d];
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dl = &mut delta[s * d..(s + 1) * d];
            if gn > 0.0 {
                dl.iter_mut().zip(g).for_each(|(a, b)| *a += step * b / gn);
            }
            let nn = dl.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nn > tau {
                dl.iter_mut().for_each(|v| *v *= tau / nn);
            }
        }
    }
    data.x.iter().zip(&delta).map(|(a, b)| a + b).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTrace {
    /// `max_i ‖v_i‖₂` after every step (index 0 is the initialization).
    pub max_mixture: Vec<f64>,
    pub losses: Vec<f64>,
    pub final_theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub seed: u64,
    pub uncompressed: ArmTrace,
    pub compressed: ArmTrace,
    pub t_clean: usize,
    pub t_adv: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub compression: f64,
    pub pruned: Vec<usize>,
    /// Worst Pythagorean residual over every logged decomposition.
    pub max_identity_error: f64,
}

impl MixtureReport {
    pub fn final_max_v(&self) -> (f64, f64) {
        let last = |a: &ArmTrace| *a.max_mixture.last().expect("trace holds the initial point");
        (last(&self.uncompressed), last(&self.compressed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub data: SparseCodingConfig,
    pub net: ToyNetConfig,
    pub t_clean: usize,
    pub t_adv: usize,
    pub tau: f64,
    pub compression: f64,
    pub seeds: Vec<u64>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            data: SparseCodingConfig::default(),
            net: ToyNetConfig::default(),
            t_clean: 200,
            t_adv: 200,
            tau: 0.5,
            compression: 0.5,
            seeds: (0..11).collect(),
        }
    }
}

struct Arm {
    net: ToyNetState,
    trace: ArmTrace,
}

impl Arm {
    fn log(&mut self, m: &Dictionary, worst: &mut f64) {
        let dec = decompose(&self.net.theta, self.net.width, m);
        *worst = worst.max(pythagorean_error(&self.net.theta, &dec));
        self.trace.max_mixture.push(dec.max_mixture_norm());
    }

    fn step(&mut self, x: &[f64], y: &[f64], rho: &[f64], lr: f64) -> Result<()> {
        let (loss, g, _) = self.net.loss_grad(x, y, rho);
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch: self.trace.losses.len(), loss });
        }
        let d = self.net.dim;
        for i in 0..self.net.width {
            if self.net.frozen[i] {
                continue;
            }
            for k in 0..d {
                self.net.theta[i * d + k] -= lr * g[i * d + k];
            }
        }
        self.trace.losses.push(loss);
        Ok(())
    }
}

/// Two arms from one initialization and one noise stream: `T` clean steps,
/// then `T′` adversarial steps. The compressed arm zeroes and freezes the
/// `⌈compression·N⌉` neurons with the weakest dominant projection at step `T`.
pub fn train_arms(data: &SparseData, net_cfg: &ToyNetConfig, t_clean: usize, t_adv: usize, tau: f64, compression: f64, seed: u64) -> Result<MixtureReport> {
    if !(0.0..1.0).contains(&compression) || !(tau >= 0.0) {
        return Err(Error::Config("compression must lie in [0, 1) and tau must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ToyNetState::init(net_cfg, data.dictionary.dim, &mut rng)?;
    let empty = ArmTrace { max_mixture: vec![], losses: vec![], final_theta: vec![] };
    let mut u = Arm { net: net.clone(), trace: empty.clone() };
    let mut c = Arm { net, trace: empty };
    let m = &data.dictionary;
    let mut worst = 0.0;
    u.log(m, &mut worst);
    c.log(m, &mut worst);
    let w = net_cfg.width;
    let smoothing = Normal::new(0.0, net_cfg.smoothing.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut pruned = Vec::new();
    for t in 0..t_clean + t_adv {
        if t == t_clean {
            let k = (compression * w as f64).ceil() as usize;
            if k > 0 {
                let dec = decompose(&c.net.theta, w, m);
                let mut order: Vec<usize> = (0..w).collect();
                order.sort_by(|&a, &b| dec.coefficient[a].abs().total_cmp(&dec.coefficient[b].abs()).then(a.cmp(&b)));
                pruned = order[..k].to_vec();
                pruned.sort_unstable();
                c.net.prune(&pruned);
            }
        }
        let rho: Vec<f64> = (0..data.n * w).map(|_| smoothing.sample(&mut rng)).collect();
        for arm in [&mut u, &mut c] {
            let x = if t < t_clean { data.x.clone() } else { adversarial_inputs(&arm.net, data, &rho, tau, net_cfg.adv_steps) };
            arm.step(&x, &data.y, &rho, net_cfg.learning_rate)?;
            arm.log(m, &mut worst);
        }
    }
    u.trace.final_theta = u.net.theta;
    c.trace.final_theta = c.net.theta;
    Ok(MixtureReport {
        seed,
        uncompressed: u.trace,
        compressed: c.trace,
        t_clean,
        t_adv,
        tau,
        learning_rate: net_cfg.learning_rate,
        compression,
        pruned,
        max_identity_error: worst,
    })
}

/// One report per seed; the data seed follows the run seed.
pub fn run_theory(cfg: &TheoryConfig) -> Result<Vec<MixtureReport>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let data = generate(&SparseCodingConfig { seed, ..cfg.data.clone() })?;
            train_arms(&data, &cfg.net, cfg.t_clean, cfg.t_adv, cfg.tau, cfg.compression, seed)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub arm: String,
    pub final_max_v: f64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "T_prime")]
    pub t_prime: usize,
    pub tau: f64,
    pub compression: f64,
}

pub fn summary_rows(reports: &[MixtureReport]) -> Vec<SummaryRow> {
    reports
        .iter()
        .flat_map(|r| {
            let (u, c) = r.final_max_v();
            [("uncompressed", u), ("compressed", c)].map(|(arm, v)| SummaryRow {
                seed: r.seed,
                arm: arm.into(),
                final_max_v: v,
                t: r.t_clean,
                t_prime: r.t_adv,
                tau: r.tau,
                compression: r.compression,
            })
        })
        .collect()
}

/// Writes `<dir>/<seed>.json` per report and `<dir>/summary.csv`.
pub fn write_reports(dir: &Path, reports: &[MixtureReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in reports {
        std::fs::write(dir.join(format!("{}.json", r.seed)), serde_json::to_vec_pretty(r)?)?;
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in summary_rows(reports) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
