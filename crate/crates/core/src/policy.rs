//! The actor. Every stage state passes through a shared extractor and two
//! heads: a diagonal Gaussian over the pre-sigmoid keep fractions and a pair
//! of Bernoulli bits (downsample, robust block).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{CompressionAction, StageAction};
use crate::dense::{sigmoid, softplus, tanh_backward, Dense, ParamLayout};
use crate::encoder::{read_container, StateEmbedding};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RCNASPOL";
const VERSION: u32 = 1;

pub const VAR_FLOOR: f64 = 1e-4;
pub const PROB_CLAMP: f64 = 1e-6;
/// Smallest keep fraction an action can carry; a saturated sigmoid would
/// otherwise produce an invalid zero.
pub const KEEP_FLOOR: f64 = 1e-6;

/// What the policy-gradient step differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgObjective {
    /// `r · ∇ log π(a|s)`.
    #[default]
    Reinforce,
    /// `r · ∇ Σ_i (N(α_i) + Ber(β_i))`, the density sum taken literally.
    /// Kept for ablation only.
    DensitySum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_s: usize,
    pub hidden: usize,
    pub objective: PgObjective,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_s: 64, hidden: 64, objective: PgObjective::Reinforce, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub mu: [f64; 2],
    pub var: [f64; 2],
    pub p: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub stages: Vec<StageOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub action: CompressionAction,
    /// Pre-sigmoid `(width, depth)` draws per stage.
    pub raw_gauss: Vec<[f64; 2]>,
    /// `(downsample, robust_block)` per stage.
    pub bits: Vec<[bool; 2]>,
    pub log_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layout {
    extractor: Dense,
    gauss: Dense,
    bern: Dense,
    len: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Self {
        let mut l = ParamLayout::default();
        let extractor = l.dense(cfg.d_s, cfg.hidden);
        let gauss = l.dense(cfg.hidden, 4);
        let bern = l.dense(cfg.hidden, 2);
        Self { extractor, gauss, bern, len: l.len }
    }
}

struct StageTrace {
    h: Vec<f64>,
    g: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    params: usize,
}

#[derive(Clone, Debug)]
pub struct Policy {
    cfg: PolicyConfig,
    layout: Layout,
    params: Vec<f64>,
}

fn gauss_log_density(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mu) * (x - mu) / (2.0 * var)
}

fn stage_output(tr: &StageTrace) -> StageOutput {
    let var = |v: f64| softplus(v) + VAR_FLOOR;
    let prob = |z: f64| sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    StageOutput { mu: [tr.g[0], tr.g[1]], var: [var(tr.g[2]), var(tr.g[3])], p: [prob(tr.z[0]), prob(tr.z[1])] }
}

/// Per-stage `(log N(α|μ,Σ), log Ber(β|p))`.
fn stage_log_terms(o: &StageOutput, alpha: &[f64; 2], bits: &[bool; 2]) -> Result<(f64, f64)> {
    let mut ln = 0.0;
    let mut lb = 0.0;
    for j in 0..2 {
        if !(o.p[j] > 0.0 && o.p[j] < 1.0) {
            return Err(Error::InvalidProbability(o.p[j]));
        }
        ln += gauss_log_density(alpha[j], o.mu[j], o.var[j]);
        lb += if bits[j] { o.p[j].ln() } else { (1.0 - o.p[j]).ln() };
    }
    Ok((ln, lb))
}

impl Policy {
    pub fn new(cfg: &PolicyConfig) -> Result<Self> {
        if cfg.d_s == 0 || cfg.hidden == 0 {
            return Err(Error::Config("policy widths must be positive".into()));
        }
        let layout = Layout::new(cfg);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        layout.extractor.init(&mut params, &mut rng);
        layout.gauss.init(&mut params, &mut rng);
        layout.bern.init(&mut params, &mut rng);
        Ok(Self { cfg: cfg.clone(), layout, params })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_hash(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        hex::encode(Sha256::digest(&bytes))
    }

    fn trace(&self, s: &[f64]) -> StageTrace {
        let p = &self.params;
        let h: Vec<f64> = self.layout.extractor.forward(p, s).into_iter().map(f64::tanh).collect();
        let g = self.layout.gauss.forward(p, &h);
        let z = self.layout.bern.forward(p, &h);
        StageTrace { h, g, z }
    }

    fn traces(&self, state: &StateEmbedding) -> Result<Vec<StageTrace>> {
        if state.per_stage.is_empty() {
            return Err(Error::Shape("state has no stages".into()));
        }
        state
            .per_stage
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() != self.cfg.d_s {
                    return Err(Error::Shape(format!("stage {i} state has width {}; policy expects {}", s.len(), self.cfg.d_s)));
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteStage(i));
                }
                let tr = self.trace(s);
                if tr.g.iter().chain(&tr.z).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinitePolicy(i));
                }
                Ok(tr)
            })
            .collect()
    }

    pub fn forward(&self, state: &StateEmbedding) -> Result<PolicyOutput> {
        Ok(PolicyOutput { stages: self.traces(state)?.iter().map(stage_output).collect() })
    }

    /// Joint log-density of a stored sample, evaluated in α-space.
    pub fn log_prob(out: &PolicyOutput, sample: &ActionSample) -> Result<f64> {
        if sample.raw_gauss.len() != out.stages.len() || sample.bits.len() != out.stages.len() {
            return Err(Error::Shape("sample and policy output disagree on stage count".into()));
        }
        let mut total = 0.0;
        for (i, o) in out.stages.iter().enumerate() {
            let (ln, lb) = stage_log_terms(o, &sample.raw_gauss[i], &sample.bits[i])?;
            total += ln + lb;
        }
        Ok(total)
    }

    /// Builds the sample for given standard-normal draws `xi` and uniforms `u`.
    pub fn sample_with(out: &PolicyOutput, xi: &[[f64; 2]], u: &[[f64; 2]]) -> Result<ActionSample> {
        let mut raw_gauss = Vec::with_capacity(out.stages.len());
        let mut bits = Vec::with_capacity(out.stages.len());
        let mut per_stage = Vec::with_capacity(out.stages.len());
        for (i, o) in out.stages.iter().enumerate() {
            let a = [o.mu[0] + o.var[0].sqrt() * xi[i][0], o.mu[1] + o.var[1].sqrt() * xi[i][1]];
            let b = [u[i][0] < o.p[0], u[i][1] < o.p[1]];
            per_stage.push(StageAction {
                width_keep: sigmoid(a[0]).max(KEEP_FLOOR),
                depth_keep: sigmoid(a[1]).max(KEEP_FLOOR),
                downsample: b[0],
                robust_block: b[1],
            });
            raw_gauss.push(a);
            bits.push(b);
        }
        let mut s = ActionSample { action: CompressionAction { per_stage }, raw_gauss, bits, log_prob: 0.0 };
        s.log_prob = Self::log_prob(out, &s)?;
        Ok(s)
    }

    pub fn sample(out: &PolicyOutput, rng: &mut ChaCha8Rng) -> Result<ActionSample> {
        let n = out.stages.len();
        let mut xi = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        for _ in 0..n {
            xi.push([rng.sample(StandardNormal), rng.sample(StandardNormal)]);
            u.push([rng.gen::<f64>(), rng.gen::<f64>()]);
        }
        Self::sample_with(out, &xi, &u)
    }

    /// Value and parameter gradient of the per-sample objective: the joint
    /// log-density for REINFORCE, or `Σ_i (N_i + Ber_i)` for the literal form.
    pub fn objective_grad(&self, state: &StateEmbedding, sample: &ActionSample, objective: PgObjective) -> Result<(f64, Vec<f64>)> {
        let traces = self.traces(state)?;
        if sample.raw_gauss.len() != traces.len() || sample.bits.len() != traces.len() {
            return Err(Error::Shape("sample and state disagree on stage count".into()));
        }
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut value = 0.0;
        for (i, tr) in traces.iter().enumerate() {
            let o = stage_output(tr);
            let (ln, lb) = stage_log_terms(&o, &sample.raw_gauss[i], &sample.bits[i])?;
            let (wn, wb) = match objective {
                PgObjective::Reinforce => {
                    value += ln + lb;
                    (1.0, 1.0)
                }
                PgObjective::DensitySum => {
                    let (n, b) = (ln.exp(), lb.exp());
                    value += n + b;
                    (n, b)
                }
            };
            let mut dg = [0.0; 4];
            for j in 0..2 {
                let d = sample.raw_gauss[i][j] - o.mu[j];
                let var = o.var[j];
                dg[j] = wn * d / var;
                dg[2 + j] = wn * (-0.5 / var + d * d / (2.0 * var * var)) * sigmoid(tr.g[2 + j]);
            }
            let mut dz = [0.0; 2];
            for j in 0..2 {
                let raw = sigmoid(tr.z[j]);
                if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
                    dz[j] = wb * (sample.bits[i][j] as u8 as f64 - raw);
                }
            }
            let mut dh = self.layout.gauss.backward(p, &tr.h, &dg, &mut grad);
            for (a, b) in dh.iter_mut().zip(self.layout.bern.backward(p, &tr.h, &dz, &mut grad)) {
                *a += b;
            }
            self.layout.extractor.backward(p, &state.per_stage[i], &tanh_backward(&tr.h, &dh), &mut grad);
        }
        Ok((value, grad))
    }

    /// `θ += step`, refusing non-finite steps.
    pub fn apply_step(&mut self, step: &[f64]) -> Result<()> {
        if step.len() != self.params.len() {
            return Err(Error::Shape("gradient length differs from parameter count".into()));
        }
        for (p, s) in self.params.iter_mut().zip(step) {
            *p += s;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header { config: self.cfg.clone(), params: self.params.len() })?;
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (header, payload): (Header, &[u8]) = read_container(&bytes, MAGIC)?;
        let layout = Layout::new(&header.config);
        if layout.len != header.params || payload.len() != 8 * layout.len {
            return Err(Error::Checkpoint("policy payload does not match its configuration".into()));
        }
        let params: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("policy checkpoint holds non-finite parameters".into()));
        }
        Ok(Self { cfg: header.config, layout, params })
    }
}
