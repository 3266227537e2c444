//! RL state construction: stage encodings run through a bidirectional LSTM,
//! fused per stage with the LIPS and CT profiles. The encoder is pre-trained
//! as an autoencoder and frozen afterwards.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::NetworkDescriptor;
use crate::dense::{tanh_backward, Adam, Dense, Lstm, LstmTrace, ParamLayout};
use crate::error::{Error, Result};
use crate::task::{mean_std, standardize, CtScale, TaskEmbeddings};

const MAGIC: &[u8; 8] = b"RCNASENC";
const VERSION: u32 = 1;

/// How the LIPS and CT profiles enter each fusion perceptron.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipsMode {
    /// The full standardized per-instance vectors.
    #[default]
    Full,
    /// Summary statistics: mean, std, min and max of `ln(1 + lips)`, and the
    /// scaled mean CT.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of each per-stage state vector.
    pub d_s: usize,
    /// LSTM hidden width per direction.
    pub hidden: usize,
    pub fusion_hidden: usize,
    pub eval_size: usize,
    pub num_stages: usize,
    pub lips_mode: LipsMode,
    pub width_norm: f64,
    pub depth_norm: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_s: 64,
            hidden: 32,
            fusion_hidden: 64,
            eval_size: crate::data::DEFAULT_EVAL_SIZE,
            num_stages: 3,
            lips_mode: LipsMode::Full,
            width_norm: 1024.0,
            depth_norm: 16.0,
            learning_rate: 1e-3,
            epochs: 1500,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn profile_widths(&self) -> (usize, usize) {
        match self.lips_mode {
            LipsMode::Full => (self.eval_size, self.eval_size),
            LipsMode::Pooled => (4, 1),
        }
    }
}

/// `(depth, width, downsample, robust_block)` per stage, unnormalized.
pub fn raw_stage_encodings(desc: &NetworkDescriptor) -> Vec<[f64; 4]> {
    desc.stages()
        .iter()
        .map(|s| [s.depth as f64, s.width as f64, s.downsample as u8 as f64, s.robust_block as u8 as f64])
        .collect()
}

pub fn stage_encodings(desc: &NetworkDescriptor, cfg: &EncoderConfig) -> Vec<[f64; 4]> {
    raw_stage_encodings(desc)
        .into_iter()
        .map(|[d, w, ds, rb]| [d / cfg.depth_norm, w / cfg.width_norm, ds, rb])
        .collect()
}

/// Encoder-ready features for one (architecture, task) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderInput {
    pub stages: Vec<[f64; 4]>,
    pub lips: Vec<f64>,
    pub ct: Vec<f64>,
}

impl EncoderInput {
    pub fn new(desc: &NetworkDescriptor, emb: &TaskEmbeddings, ct_scale: &CtScale, cfg: &EncoderConfig) -> Result<Self> {
        if emb.lips.len() != cfg.eval_size || emb.ct.len() != cfg.eval_size {
            return Err(Error::Shape(format!(
                "profiles have {} / {} entries; encoder expects eval_size {}",
                emb.lips.len(),
                emb.ct.len(),
                cfg.eval_size
            )));
        }
        let (lips, ct) = match cfg.lips_mode {
            LipsMode::Full => (standardize(&emb.lips), ct_scale.apply(&emb.ct)),
            LipsMode::Pooled => {
                let logs: Vec<f64> = emb.lips.iter().map(|v| v.ln_1p()).collect();
                let (m, s) = mean_std(&logs);
                let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (ct_mean, _) = mean_std(&emb.ct);
                (vec![m, s, lo, hi], ct_scale.apply(&[ct_mean]))
            }
        };
        Ok(Self { stages: stage_encodings(desc, cfg), lips, ct })
    }

    fn target(&self, stage: usize) -> Vec<f64> {
        let mut t = self.lips.clone();
        t.extend_from_slice(&self.stages[stage]);
        t.extend_from_slice(&self.ct);
        t
    }
}

/// Identifies what a state embedding was computed from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_hash: String,
    pub teacher_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEmbedding {
    pub per_stage: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layout {
    fwd: Lstm,
    bwd: Lstm,
    fusion: Vec<(Dense, Dense)>,
    decoder: (Dense, Dense),
    len: usize,
}

impl Layout {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut l = ParamLayout::default();
        let fwd = l.lstm(4, cfg.hidden);
        let bwd = l.lstm(4, cfg.hidden);
        let (lw, cw) = cfg.profile_widths();
        let fusion_in = lw + 2 * cfg.hidden + cw;
        let fusion = (0..cfg.num_stages)
            .map(|_| (l.dense(fusion_in, cfg.fusion_hidden), l.dense(cfg.fusion_hidden, cfg.d_s)))
            .collect();
        let decoder = (l.dense(cfg.d_s, cfg.fusion_hidden), l.dense(cfg.fusion_hidden, lw + 4 + cw));
        Self { fwd, bwd, fusion, decoder, len: l.len }
    }
}

struct Trace {
    fwd: LstmTrace,
    bwd: LstmTrace,
    fusion_in: Vec<Vec<f64>>,
    fusion_hidden: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
}

/// Bidirectional LSTM over stage encodings plus one fusion perceptron per
/// stage index; the decoder is only used during pre-training.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    cfg: EncoderConfig,
    layout: Layout,
    params: Vec<f64>,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Reconstruction loss before each optimizer step.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    frozen: bool,
    params: usize,
}

impl StateEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.d_s == 0 || cfg.hidden == 0 || cfg.fusion_hidden == 0 || cfg.num_stages == 0 || cfg.eval_size == 0 {
            return Err(Error::Config("encoder widths, stage count and eval_size must be positive".into()));
        }
        let layout = Layout::new(cfg);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        layout.fwd.init(&mut params, &mut rng);
        layout.bwd.init(&mut params, &mut rng);
        for (a, b) in &layout.fusion {
            a.init(&mut params, &mut rng);
            b.init(&mut params, &mut rng);
        }
        layout.decoder.0.init(&mut params, &mut rng);
        layout.decoder.1.init(&mut params, &mut rng);
        Ok(Self { cfg: cfg.clone(), layout, params, frozen: false })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// SHA-256 over every parameter, decoder included.
    pub fn param_hash(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        hex::encode(Sha256::digest(&bytes))
    }

    fn check(&self, input: &EncoderInput) -> Result<()> {
        let (lw, cw) = self.cfg.profile_widths();
        if input.stages.is_empty() || input.stages.len() > self.cfg.num_stages {
            return Err(Error::Shape(format!(
                "{} stages; encoder supports 1..={}",
                input.stages.len(),
                self.cfg.num_stages
            )));
        }
        if input.lips.len() != lw || input.ct.len() != cw {
            return Err(Error::Shape(format!("profile widths {}/{}; expected {lw}/{cw}", input.lips.len(), input.ct.len())));
        }
        Ok(())
    }

    fn run(&self, input: &EncoderInput) -> Trace {
        let p = &self.params;
        let xs: Vec<Vec<f64>> = input.stages.iter().map(|s| s.to_vec()).collect();
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let fwd = self.layout.fwd.forward(p, &xs);
        let bwd = self.layout.bwd.forward(p, &rev);
        let n = xs.len();
        let mut tr = Trace { fwd, bwd, fusion_in: Vec::new(), fusion_hidden: Vec::new(), states: Vec::new() };
        for i in 0..n {
            let mut u = input.lips.clone();
            u.extend_from_slice(&tr.fwd.h[i]);
            u.extend_from_slice(&tr.bwd.h[n - 1 - i]);
            u.extend_from_slice(&input.ct);
            let (d1, d2) = &self.layout.fusion[i];
            let a: Vec<f64> = d1.forward(p, &u).into_iter().map(f64::tanh).collect();
            let s = d2.forward(p, &a);
            tr.fusion_in.push(u);
            tr.fusion_hidden.push(a);
            tr.states.push(s);
        }
        tr
    }

    /// Forward and backward hidden states per stage, `(H^F_i, H^B_i)`.
    pub fn recurrent_states(&self, input: &EncoderInput) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.check(input)?;
        let tr = self.run(input);
        let n = input.stages.len();
        Ok((0..n).map(|i| (tr.fwd.h[i].clone(), tr.bwd.h[n - 1 - i].clone())).collect())
    }

    /// `s^i = MLP_i(concat(LIPS, H^F_i, H^B_i, CT))` for every stage.
    pub fn encode_state(&self, input: &EncoderInput, provenance: Provenance) -> Result<StateEmbedding> {
        self.check(input)?;
        let tr = self.run(input);
        for (i, s) in tr.states.iter().enumerate() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteStage(i));
            }
        }
        Ok(StateEmbedding { per_stage: tr.states, provenance })
    }

    /// Mean squared reconstruction error of `concat(LIPS, ST_i, CT)`, and
    /// optionally its gradient.
    fn loss_and_grad(&self, samples: &[EncoderInput], grad: Option<&mut [f64]>) -> f64 {
        let p = &self.params;
        let (e1, e2) = &self.layout.decoder;
        let mut total = 0.0;
        let mut grad = grad;
        for x in samples {
            let tr = self.run(x);
            let n = x.stages.len();
            let scale = 1.0 / (samples.len() * n) as f64;
            let mut dh_f = vec![vec![0.0; self.cfg.hidden]; n];
            let mut dh_b = vec![vec![0.0; self.cfg.hidden]; n];
            for i in 0..n {
                let s = &tr.states[i];
                let r: Vec<f64> = e1.forward(p, s).into_iter().map(f64::tanh).collect();
                let y = e2.forward(p, &r);
                let t = x.target(i);
                let dim = t.len() as f64;
                total += scale * y.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / dim;
                let Some(g) = grad.as_deref_mut() else { continue };
                let dy: Vec<f64> = y.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) * scale / dim).collect();
                let dr = e2.backward(p, &r, &dy, g);
                let ds = e1.backward(p, s, &tanh_backward(&r, &dr), g);
                let (d1, d2) = &self.layout.fusion[i];
                let a = &tr.fusion_hidden[i];
                let da = d2.backward(p, a, &ds, g);
                let du = d1.backward(p, &tr.fusion_in[i], &tanh_backward(a, &da), g);
                let off = x.lips.len();
                let h = self.cfg.hidden;
                dh_f[i].copy_from_slice(&du[off..off + h]);
                dh_b[n - 1 - i].copy_from_slice(&du[off + h..off + 2 * h]);
            }
            if let Some(g) = grad.as_deref_mut() {
                self.layout.fwd.backward(p, &tr.fwd, &dh_f, g);
                self.layout.bwd.backward(p, &tr.bwd, &dh_b, g);
            }
        }
        total
    }

    pub fn reconstruction_loss(&self, samples: &[EncoderInput]) -> Result<f64> {
        for s in samples {
            self.check(s)?;
        }
        Ok(self.loss_and_grad(samples, None))
    }

    /// Full-batch Adam on the reconstruction loss; freezes the encoder.
    pub fn pretrain(&mut self, samples: &[EncoderInput]) -> Result<PretrainReport> {
        if self.frozen {
            return Err(Error::Config("encoder is frozen".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyBuffer("pre-training sample"));
        }
        for s in samples {
            self.check(s)?;
        }
        let mut opt = Adam::new(self.cfg.learning_rate);
        let mut losses = Vec::with_capacity(self.cfg.epochs);
        let mut grad = vec![0.0; self.params.len()];
        for epoch in 0..self.cfg.epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = self.loss_and_grad(samples, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            losses.push(loss);
            opt.step(&mut self.params, &grad);
        }
        let final_loss = self.loss_and_grad(samples, None);
        if !final_loss.is_finite() {
            return Err(Error::Diverged { epoch: self.cfg.epochs, loss: final_loss });
        }
        self.frozen = true;
        let initial_loss = losses.first().copied().unwrap_or(final_loss);
        Ok(PretrainReport { losses, initial_loss, final_loss })
    }

    /// Marks the encoder frozen without training it.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header { config: self.cfg.clone(), frozen: self.frozen, params: self.params.len() })?;
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
            return Err(Error::Checkpoint("encoder payload does not match its configuration".into()));
        }
        let params = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { cfg: header.config, layout, params, frozen: header.frozen })
    }

    /// Loads and rejects checkpoints built for a different state width or
    /// eval-set size.
    pub fn load_compatible(path: &Path, d_s: usize, eval_size: usize) -> Result<Self> {
        let enc = Self::load(path)?;
        if enc.cfg.d_s != d_s || enc.cfg.eval_size != eval_size {
            return Err(Error::Checkpoint(format!(
                "encoder has d_s = {}, eval_size = {}; run expects d_s = {d_s}, eval_size = {eval_size}",
                enc.cfg.d_s, enc.cfg.eval_size
            )));
        }
        Ok(enc)
    }
}

/// Parses `magic | version u32 | header length u64 | JSON header | payload`.
pub(crate) fn read_container<'a, H: serde::de::DeserializeOwned>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 20 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header = serde_json::from_slice(&bytes[20..20 + hlen])?;
    Ok((header, &bytes[20 + hlen..]))
}
