use std::cell::Cell;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ops::{global_avg_pool, global_avg_pool_backward, Activation, BatchNorm, BnCache, Conv, Linear};
use super::{Classifier, ImageBatch, Logits};
use crate::arch::{NetworkDescriptor, INPUT_CHANNELS};
use crate::error::{Error, Result};

/// Registry key of the block used for stages flagged `robust_block`.
pub const ROBUST_BLOCK_KEY: &str = "preact-silu";

const CHECKPOINT_MAGIC: &[u8; 8] = b"RCNASMDL";
const CHECKPOINT_VERSION: u32 = 1;

/// Residual block variants selectable by registry key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    /// BN → ReLU → conv, twice, plus shortcut.
    PreActRelu,
    /// Same wiring with the smooth `x·sigmoid(x)` activation.
    PreActSilu,
}

impl BlockVariant {
    pub const REGISTERED: [(&'static str, BlockVariant); 2] =
        [("preact-relu", BlockVariant::PreActRelu), ("preact-silu", BlockVariant::PreActSilu)];

    pub fn from_key(key: &str) -> Result<Self> {
        Self::REGISTERED
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown block variant `{key}`")))
    }

    fn activation(self) -> Activation {
        match self {
            BlockVariant::PreActRelu => Activation::Relu,
            BlockVariant::PreActSilu => Activation::Silu,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaterializeOptions {
    pub seed: u64,
    /// Block used where a stage sets `robust_block`.
    pub robust_variant: String,
}

impl Default for MaterializeOptions {
    fn default() -> Self {
        Self { seed: 0, robust_variant: ROBUST_BLOCK_KEY.to_string() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Block {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
    shortcut: Option<Conv>,
    act: Activation,
}

struct BlockCache {
    bn1: BnCache,
    u1: ImageBatch,
    o1: ImageBatch,
    bn2: BnCache,
    u2: ImageBatch,
    o2: ImageBatch,
}

/// Intermediate values kept by a forward pass for the matching backward pass.
pub struct NetworkCache {
    input: ImageBatch,
    blocks: Vec<BlockCache>,
    final_bn: BnCache,
    final_u: ImageBatch,
    pooled: Vec<f32>,
}

/// A materialized, trainable classifier realizing a [`NetworkDescriptor`]:
/// stem convolution, pre-activation residual stages, BN-activation, global
/// average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct Network {
    desc: NetworkDescriptor,
    robust_variant: String,
    stem: Conv,
    blocks: Vec<Block>,
    final_bn: BatchNorm,
    final_act: Activation,
    head: Linear,
    params: Vec<f32>,
    buffers: Vec<f32>,
    decay_ranges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    descriptor: NetworkDescriptor,
    robust_variant: String,
    params: usize,
    buffers: usize,
}

struct Layout {
    params: usize,
    buffers: usize,
    decay: Vec<(usize, usize)>,
}

impl Layout {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let c = Conv { cin, cout, k, stride, pad: k / 2, w_off: self.params };
        self.decay.push((self.params, c.num_params()));
        self.params += c.num_params();
        c
    }

    fn bn(&mut self, c: usize) -> BatchNorm {
        let b = BatchNorm { c, p_off: self.params, b_off: self.buffers };
        self.params += 2 * c;
        self.buffers += 2 * c;
        b
    }

    fn linear(&mut self, cin: usize, cout: usize) -> Linear {
        let l = Linear { cin, cout, w_off: self.params, b_off: self.params + cin * cout };
        self.decay.push((self.params, cin * cout));
        self.params += cin * cout + cout;
        l
    }
}

impl Network {
    /// Builds the layer graph and draws initial weights from `opts.seed`.
    pub fn materialize(desc: &NetworkDescriptor, opts: &MaterializeOptions) -> Result<Self> {
        let mut net = Self::skeleton(desc, &opts.robust_variant)?;
        net.init_weights(opts.seed);
        Ok(net)
    }

    fn skeleton(desc: &NetworkDescriptor, robust_variant: &str) -> Result<Self> {
        desc.spatial_sizes(desc.input_resolution())?;
        let robust = BlockVariant::from_key(robust_variant)?;
        let mut lay = Layout { params: 0, buffers: 0, decay: Vec::new() };
        let stem = lay.conv(INPUT_CHANNELS as usize, desc.stem_width() as usize, 3, 1);
        let mut blocks = Vec::new();
        let mut in_c = desc.stem_width() as usize;
        let mut last_act = Activation::Relu;
        for s in desc.stages() {
            let out_c = s.width as usize;
            let act = if s.robust_block { robust.activation() } else { Activation::Relu };
            last_act = act;
            for b in 0..s.depth as usize {
                let stride = if b == 0 && s.downsample { 2 } else { 1 };
                let cin = if b == 0 { in_c } else { out_c };
                let bn1 = lay.bn(cin);
                let conv1 = lay.conv(cin, out_c, 3, stride);
                let bn2 = lay.bn(out_c);
                let conv2 = lay.conv(out_c, out_c, 3, 1);
                let shortcut = (cin != out_c || stride != 1).then(|| lay.conv(cin, out_c, 1, stride));
                blocks.push(Block { bn1, conv1, bn2, conv2, shortcut, act });
            }
            in_c = out_c;
        }
        let final_bn = lay.bn(in_c);
        let head = lay.linear(in_c, desc.num_classes() as usize);
        Ok(Self {
            desc: desc.clone(),
            robust_variant: robust_variant.to_string(),
            stem,
            blocks,
            final_bn,
            final_act: last_act,
            head,
            params: vec![0.0; lay.params],
            buffers: vec![0.0; lay.buffers],
            decay_ranges: lay.decay,
        })
    }

    fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = vec![self.stem.clone()];
        let mut bns = vec![];
        for b in &self.blocks {
            bns.push(b.bn1.clone());
            convs.push(b.conv1.clone());
            bns.push(b.bn2.clone());
            convs.push(b.conv2.clone());
            if let Some(s) = &b.shortcut {
                convs.push(s.clone());
            }
        }
        bns.push(self.final_bn.clone());
        for c in &convs {
            let std = (2.0 / (c.k * c.k * c.cout) as f32).sqrt();
            let normal = Normal::new(0.0f32, std).expect("positive std");
            for w in &mut self.params[c.w_off..c.w_off + c.num_params()] {
                *w = normal.sample(&mut rng);
            }
        }
        for b in &bns {
            self.params[b.p_off..b.p_off + b.c].fill(1.0);
            self.params[b.p_off + b.c..b.p_off + 2 * b.c].fill(0.0);
            self.buffers[b.b_off..b.b_off + b.c].fill(0.0);
            self.buffers[b.b_off + b.c..b.b_off + 2 * b.c].fill(1.0);
        }
        let bound = 1.0 / (self.head.cin as f32).sqrt();
        let h = &self.head;
        for w in &mut self.params[h.w_off..h.w_off + h.cin * h.cout] {
            *w = rng.gen_range(-bound..bound);
        }
        self.params[h.b_off..h.b_off + h.cout].fill(0.0);
    }

    pub fn descriptor(&self) -> &NetworkDescriptor {
        &self.desc
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f32] {
        &self.buffers
    }

    /// `(offset, len)` ranges of weights subject to weight decay.
    pub fn decay_ranges(&self) -> &[(usize, usize)] {
        &self.decay_ranges
    }

    /// SHA-256 over parameters and running statistics.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.params.iter().chain(&self.buffers) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let r = self.desc.input_resolution() as usize;
        if x.c != INPUT_CHANNELS as usize || x.h != r || x.w != r {
            return Err(Error::Shape(format!(
                "network expects {r}x{r}x{INPUT_CHANNELS} inputs, got {}x{}x{}",
                x.h, x.w, x.c
            )));
        }
        Ok(())
    }

    fn run(&self, x: &ImageBatch, mut running: Option<&mut [f32]>, macs: Option<&Cell<u64>>) -> (Logits, NetworkCache) {
        let p = &self.params;
        let buf = &self.buffers;
        let mut h = self.stem.forward(p, x, macs);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (u1, bn1) = b.bn1.forward(p, buf, running.as_deref_mut(), &h);
            let o1 = b.act.forward(&u1);
            let residual = match &b.shortcut {
                Some(sc) => sc.forward(p, &o1, macs),
                None => h,
            };
            let h1 = b.conv1.forward(p, &o1, macs);
            let (u2, bn2) = b.bn2.forward(p, buf, running.as_deref_mut(), &h1);
            let o2 = b.act.forward(&u2);
            let mut out = b.conv2.forward(p, &o2, macs);
            for (o, r) in out.data.iter_mut().zip(&residual.data) {
                *o += r;
            }
            caches.push(BlockCache { bn1, u1, o1, bn2, u2, o2 });
            h = out;
        }
        let (final_u, final_bn) = self.final_bn.forward(p, buf, running.as_deref_mut(), &h);
        let fo = self.final_act.forward(&final_u);
        let pooled = global_avg_pool(&fo);
        let data = self.head.forward(p, &pooled, x.n, macs);
        let logits = Logits { n: x.n, k: self.head.cout, data };
        (logits, NetworkCache { input: x.clone(), blocks: caches, final_bn, final_u, pooled })
    }

    /// Forward pass with batch statistics; updates the BN running estimates.
    pub fn forward_train(&mut self, x: &ImageBatch) -> Result<(Logits, NetworkCache)> {
        self.check_input(x)?;
        let mut running = std::mem::take(&mut self.buffers);
        let out = self.run(x, Some(&mut running), None);
        self.buffers = running;
        Ok(out)
    }

    /// Forward pass with the stored running statistics.
    pub fn forward_eval(&self, x: &ImageBatch) -> Result<(Logits, NetworkCache)> {
        self.check_input(x)?;
        Ok(self.run(x, None, None))
    }

    pub fn forward(&mut self, x: &ImageBatch, mode: Mode) -> Result<(Logits, NetworkCache)> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Multiply-accumulates actually executed by an eval forward pass,
    /// counted per layer during execution.
    pub fn traced_macs(&self, x: &ImageBatch) -> Result<u64> {
        self.check_input(x)?;
        let counter = Cell::new(0);
        self.run(x, None, Some(&counter));
        Ok(counter.get())
    }

    /// Backpropagates `dlogits`. Parameter gradients are accumulated into
    /// `grads` (same layout as [`params`](Self::params)) when provided; the
    /// input gradient is returned when `want_dx` is set.
    pub fn backward(
        &self,
        cache: &NetworkCache,
        dlogits: &Logits,
        mut grads: Option<&mut [f32]>,
        want_dx: bool,
    ) -> Option<ImageBatch> {
        let p = &self.params;
        let n = dlogits.n;
        let dpool = self.head.backward(p, &cache.pooled, &dlogits.data, n, grads.as_deref_mut());
        let fu = &cache.final_u;
        let dfo = global_avg_pool_backward(&dpool, n, fu.h, fu.w, fu.c);
        let dfu = self.final_act.backward(fu, &dfo);
        let mut dh = self.final_bn.backward(p, &cache.final_bn, &dfu, grads.as_deref_mut());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let do2 = b.conv2.backward(p, &c.o2, &dh, grads.as_deref_mut(), true).expect("dx requested");
            let du2 = b.act.backward(&c.u2, &do2);
            let dh1 = b.bn2.backward(p, &c.bn2, &du2, grads.as_deref_mut());
            let mut do1 = b.conv1.backward(p, &c.o1, &dh1, grads.as_deref_mut(), true).expect("dx requested");
            let direct = match &b.shortcut {
                Some(sc) => {
                    let ds = sc.backward(p, &c.o1, &dh, grads.as_deref_mut(), true).expect("dx requested");
                    for (a, s) in do1.data.iter_mut().zip(&ds.data) {
                        *a += s;
                    }
                    None
                }
                None => Some(dh),
            };
            let du1 = b.act.backward(&c.u1, &do1);
            let mut dx = b.bn1.backward(p, &c.bn1, &du1, grads.as_deref_mut());
            if let Some(d) = direct {
                for (a, s) in dx.data.iter_mut().zip(&d.data) {
                    *a += s;
                }
            }
            dh = dx;
        }
        self.stem.backward(p, &cache.input, &dh, grads, want_dx)
    }

    /// Eval-mode logits computed in chunks of at most `chunk` items.
    pub fn predict(&self, x: &ImageBatch, chunk: usize) -> Result<Logits> {
        let mut out = Logits::zeros(0, self.head.cout);
        let mut start = 0;
        while start < x.n {
            let end = (start + chunk).min(x.n);
            let idx: Vec<usize> = (start..end).collect();
            let (l, _) = self.forward_eval(&x.select(&idx))?;
            out.data.extend_from_slice(&l.data);
            out.n += l.n;
            start = end;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            descriptor: self.desc.clone(),
            robust_variant: self.robust_variant.clone(),
            params: self.params.len(),
            buffers: self.buffers.len(),
        })?;
        let mut bytes = Vec::with_capacity(16 + header.len() + 4 * (self.params.len() + self.buffers.len()));
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for v in self.params.iter().chain(&self.buffers) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut net = Self::skeleton(&header.descriptor, &header.robust_variant)?;
        if net.params.len() != header.params || net.buffers.len() != header.buffers {
            return Err(bad("parameter layout does not match the descriptor"));
        }
        let body = &bytes[16 + hlen..];
        if body.len() != 4 * (header.params + header.buffers) {
            return Err(bad("payload size mismatch"));
        }
        let mut vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for v in net.params.iter_mut().chain(net.buffers.iter_mut()) {
            *v = vals.next().expect("length checked");
        }
        Ok(net)
    }
}

impl Classifier for Network {
    fn num_outputs(&self) -> usize {
        self.head.cout
    }

    fn logits(&self, x: &ImageBatch) -> Result<Logits> {
        self.predict(x, 256)
    }

    fn input_gradient(
        &self,
        x: &ImageBatch,
        upstream: &mut dyn FnMut(&Logits) -> Logits,
    ) -> Result<(Logits, ImageBatch)> {
        let (logits, cache) = self.forward_eval(x)?;
        let d = upstream(&logits);
        let dx = self.backward(&cache, &d, None, true).expect("dx requested");
        Ok((logits, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{cost_model, teacher_from_name, StageDescriptor};

    fn small() -> NetworkDescriptor {
        teacher_from_name("WRN-10-1").unwrap().with_io(4, 8).unwrap()
    }

    fn batch(n: usize, r: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch { n, h: r, w: r, c: 3, data: (0..n * r * r * 3).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    #[test]
    fn logits_shape() {
        let d = teacher_from_name("WRN-16-1").unwrap();
        let net = Network::materialize(&d, &MaterializeOptions::default()).unwrap();
        let l = net.logits(&batch(2, 32, 0)).unwrap();
        assert_eq!((l.n, l.k), (2, 10));
        assert!(l.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_count_matches_cost_model() {
        for name in ["WRN-16-1", "WRN-22-3", "WRN-28-10"] {
            let d = teacher_from_name(name).unwrap();
            let net = Network::materialize(&d, &MaterializeOptions::default()).unwrap();
            assert_eq!(net.num_params() as u64, cost_model(&d, 32).unwrap().params, "{name}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let d = small();
        let opts = MaterializeOptions { seed: 9, ..Default::default() };
        let a = Network::materialize(&d, &opts).unwrap();
        let b = Network::materialize(&d, &opts).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Network::materialize(&d, &MaterializeOptions { seed: 10, ..Default::default() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::materialize(&small(), &MaterializeOptions::default()).unwrap();
        assert!(net.logits(&batch(1, 16, 0)).is_err());
    }

    #[test]
    fn rejects_downsampling_a_unit_map() {
        let s = |downsample| StageDescriptor { depth: 1, width: 8, downsample, robust_block: false };
        let d = NetworkDescriptor::new(vec![s(false), s(true), s(true), s(true), s(true)], 8, 2, 8).unwrap();
        assert!(Network::materialize(&d, &MaterializeOptions::default()).is_err());
    }

    #[test]
    fn unknown_robust_variant_rejected() {
        let opts = MaterializeOptions { seed: 0, robust_variant: "nope".into() };
        assert!(Network::materialize(&small(), &opts).is_err());
    }

    fn finite_difference_check(desc: &NetworkDescriptor, mode: Mode) {
        let mut net = Network::materialize(desc, &MaterializeOptions { seed: 3, ..Default::default() }).unwrap();
        // move running stats away from the identity so eval mode is not trivial
        for (i, v) in net.buffers.iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f32) ;
        }
        let x = batch(3, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r: Vec<f32> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |net: &mut Network, x: &ImageBatch| -> f64 {
            let saved = net.buffers.clone();
            let (l, _) = net.forward(x, mode).unwrap();
            net.buffers = saved;
            l.data.iter().zip(&r).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let saved = net.buffers.clone();
        let (l, cache) = net.forward(&x, mode).unwrap();
        net.buffers = saved;
        let d = Logits { n: l.n, k: l.k, data: r.clone() };
        let mut grads = vec![0.0f32; net.num_params()];
        let dx = net.backward(&cache, &d, Some(&mut grads), true).unwrap();
        let h = 2e-3f32;
        for &i in &[0usize, 50, 123, 400, net.num_params() - 1, net.num_params() - 7] {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = loss(&mut net, &x);
            net.params[i] = orig - h;
            let down = loss(&mut net, &x);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let an = grads[i] as f64;
            assert!((fd - an).abs() <= 2e-2 * (1.0 + fd.abs()), "param {i}: fd {fd} vs analytic {an}");
        }
        for &i in &[0usize, 17, 100, 191] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&mut net, &xp) - loss(&mut net, &xm)) / (2.0 * h as f64);
            let an = dx.data[i] as f64;
            assert!((fd - an).abs() <= 2e-2 * (1.0 + fd.abs()), "input {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_eval() {
        finite_difference_check(&small(), Mode::Eval);
    }

    #[test]
    fn gradients_match_finite_differences_train_robust() {
        let mut stages = small().stages().to_vec();
        stages[1].robust_block = true;
        stages[2].robust_block = true;
        let d = NetworkDescriptor::new(stages, 16, 4, 8).unwrap();
        finite_difference_check(&d, Mode::Train);
    }

    #[test]
    fn gradients_match_finite_differences_train_plain() {
        finite_difference_check(&small(), Mode::Train);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::materialize(&small(), &MaterializeOptions { seed: 1, ..Default::default() }).unwrap();
        let path = dir.path().join("model.ckpt");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.param_hash(), net.param_hash());
        let x = batch(2, 8, 1);
        assert_eq!(back.logits(&x).unwrap(), net.logits(&x).unwrap());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Network::load(&path).is_err());
    }
}
