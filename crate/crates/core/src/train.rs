//! TRADES adversarial training, robust evaluation, and a content-addressed
//! cache of trained models and their evaluation results.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::NetworkDescriptor;
use crate::attack::{AttackLoss, AttackRegistry, AttackSpec, DEFAULT_RADIUS};
use crate::data::{DatasetSplits, LabeledImages};
use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy, kl_divergence};
use crate::nn::optim::Sgd;
use crate::nn::{Classifier, ImageBatch, MaterializeOptions, Network, ROBUST_BLOCK_KEY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ATConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub trades_beta: f32,
    pub inner_attack: AttackSpec,
    /// Random horizontal flip plus 4-pixel zero-pad crop.
    pub augment: bool,
    pub robust_variant: String,
    pub seed: u64,
}

impl Default for ATConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            trades_beta: 6.0,
            inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 10) },
            augment: false,
            robust_variant: ROBUST_BLOCK_KEY.to_string(),
            seed: 0,
        }
    }
}

impl ATConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.trades_beta >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("trades_beta must be >= 0 and learning_rate > 0".into()));
        }
        self.inner_attack.validate()
    }

    fn uses_adversary(&self) -> bool {
        self.trades_beta > 0.0 && self.inner_attack.kind != crate::attack::AttackKind::Clean
    }
}

/// Per-step training diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// KL(clean ‖ adversarial) per step; zeros when no adversary is used.
    pub kl_terms: Vec<f64>,
    /// Clean training accuracy over the last epoch, in train mode.
    pub final_train_accuracy: f64,
}

pub fn trades_train(desc: &NetworkDescriptor, splits: &DatasetSplits, cfg: &ATConfig) -> Result<Network> {
    trades_train_logged(desc, &splits.train, cfg, &AttackRegistry::new()).map(|(n, _)| n)
}

/// Minimizes `CE(f(x), y) + β·KL(f(x) ‖ f(x̃))`, with `x̃` produced by the
/// inner attack against the current model in eval mode.
pub fn trades_train_logged(
    desc: &NetworkDescriptor,
    train: &LabeledImages,
    cfg: &ATConfig,
    attacks: &AttackRegistry,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBuffer("training set"));
    }
    let opts = MaterializeOptions { seed: cfg.seed, robust_variant: cfg.robust_variant.clone() };
    let mut net = Network::materialize(desc, &opts)?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6164_6573);
    let mut grads = vec![0.0f32; net.num_params()];
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let beta = cfg.trades_beta;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut correct, mut seen) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // Batch statistics are undefined for a single item.
            if batch.len() < 2 {
                continue;
            }
            let mut b = train.select(batch);
            if cfg.augment {
                augment(&mut b.images, &mut rng);
            }
            let adv = if cfg.uses_adversary() {
                match attacks.perturb(&net, &b.images, &b.labels, &cfg.inner_attack, None, &mut rng) {
                    Ok(a) => Some(a),
                    Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            grads.iter_mut().for_each(|g| *g = 0.0);
            let (logits, cache) = net.forward_train(&b.images)?;
            let (ce, mut dlogits) = cross_entropy(&logits, &b.labels);
            let mut kl = 0.0;
            if let Some(x_adv) = adv {
                let (adv_logits, adv_cache) = net.forward_train(&x_adv)?;
                let (k, gp, gq) = kl_divergence(&logits, &adv_logits);
                kl = k;
                for (d, g) in dlogits.data.iter_mut().zip(&gp.data) {
                    *d += beta * g;
                }
                let mut dq = gq;
                dq.data.iter_mut().for_each(|v| *v *= beta);
                net.backward(&adv_cache, &dq, Some(&mut grads), false);
            }
            let loss = ce + beta as f64 * kl;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            net.backward(&cache, &dlogits, Some(&mut grads), false);
            sgd.step(&mut net, &mut grads);
            log.losses.push(loss);
            log.kl_terms.push(kl);
            if epoch + 1 == cfg.epochs {
                correct += logits.predictions().iter().zip(&b.labels).filter(|(p, y)| p == y).count();
                seen += batch.len();
            }
        }
        if epoch + 1 == cfg.epochs && seen > 0 {
            log.final_train_accuracy = correct as f64 / seen as f64;
        }
    }
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { epoch: cfg.epochs - 1, loss: f64::NAN });
    }
    Ok((net, log))
}

fn augment(x: &mut ImageBatch, rng: &mut ChaCha8Rng) {
    const PAD: i64 = 4;
    let (h, w, c) = (x.h as i64, x.w as i64, x.c);
    for i in 0..x.n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-PAD..=PAD);
        let dx = rng.gen_range(-PAD..=PAD);
        let src = x.item(i).to_vec();
        let dst = x.item_mut(i);
        for y in 0..h {
            for xx in 0..w {
                let sy = y + dy;
                let sx0 = xx + dx;
                let sx = if flip { w - 1 - sx0 } else { sx0 };
                let o = ((y * w + xx) as usize) * c;
                if sy < 0 || sy >= h || sx < 0 || sx >= w {
                    dst[o..o + c].iter_mut().for_each(|v| *v = 0.0);
                } else {
                    let s = ((sy * w + sx) as usize) * c;
                    dst[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub attack_id: String,
    pub n_items: usize,
}

const EVAL_CHUNK: usize = 128;

/// Clean and post-attack label accuracy on the same items.
pub fn evaluate(
    model: &dyn Classifier,
    split: &LabeledImages,
    attack_id: &str,
    spec: &AttackSpec,
    attacks: &AttackRegistry,
    rng: &mut ChaCha8Rng,
) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::EmptyBuffer("evaluation split"));
    }
    let (mut clean, mut robust) = (0usize, 0usize);
    let mut start = 0;
    while start < split.len() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(split.len())).collect();
        let b = split.select(&idx);
        let logits = model.logits(&b.images)?;
        let pred = logits.predictions();
        clean += pred.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
        let adv = attacks.perturb(model, &b.images, &b.labels, spec, Some(&logits), rng)?;
        let adv_pred = if adv == b.images { pred } else { model.logits(&adv)?.predictions() };
        robust += adv_pred.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
        start += idx.len();
    }
    let n = split.len();
    Ok(EvalResult {
        clean_accuracy: clean as f64 / n as f64,
        robust_accuracy: robust as f64 / n as f64,
        attack_id: attack_id.to_string(),
        n_items: n,
    })
}

/// What a cache entry is a function of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheInputs {
    pub descriptor: NetworkDescriptor,
    pub dataset_id: String,
    pub dataset_fingerprint: String,
    pub config: ATConfig,
}

impl CacheInputs {
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("cache inputs serialize");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Serialize, Deserialize)]
struct EvalFile {
    key: String,
    inputs: CacheInputs,
    evals: BTreeMap<String, EvalResult>,
}

struct CacheEntry {
    inputs: CacheInputs,
    model: Option<Network>,
    evals: BTreeMap<String, EvalResult>,
}

/// Trained models keyed by the hash of (descriptor, dataset, config), with
/// evaluation results per attack id. Optionally mirrored to
/// `<root>/<hash>/{model.ckpt, eval.json}`.
pub struct ModelCache {
    root: Option<PathBuf>,
    keep_models: bool,
    entries: HashMap<String, CacheEntry>,
    pub hits: usize,
    pub misses: usize,
    pub invalidated: usize,
}

impl ModelCache {
    pub fn in_memory(keep_models: bool) -> Self {
        Self { root: None, keep_models, entries: HashMap::new(), hits: 0, misses: 0, invalidated: 0 }
    }

    pub fn on_disk(root: impl Into<PathBuf>, keep_models: bool) -> Self {
        Self { root: Some(root.into()), ..Self::in_memory(keep_models) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn load_from_disk(&mut self, key: &str, inputs: &CacheInputs) -> Result<bool> {
        let Some(root) = &self.root else { return Ok(false) };
        let dir = root.join(key);
        let eval_path = dir.join("eval.json");
        if !eval_path.exists() {
            return Ok(false);
        }
        let valid = (|| -> Option<CacheEntry> {
            let file: EvalFile = serde_json::from_slice(&fs::read(&eval_path).ok()?).ok()?;
            if file.key != key || file.inputs.key() != key || file.inputs != *inputs {
                return None;
            }
            let model = if self.keep_models {
                let m = Network::load(&dir.join("model.ckpt")).ok()?;
                if m.descriptor() != &inputs.descriptor {
                    return None;
                }
                Some(m)
            } else {
                None
            };
            Some(CacheEntry { inputs: file.inputs, model, evals: file.evals })
        })();
        match valid {
            Some(entry) => {
                self.entries.insert(key.to_string(), entry);
                Ok(true)
            }
            None => {
                log::warn!("cache entry {key} failed verification; recomputing");
                self.invalidated += 1;
                fs::remove_dir_all(&dir)?;
                Ok(false)
            }
        }
    }

    fn persist(&self, key: &str) -> Result<()> {
        let (Some(root), Some(entry)) = (&self.root, self.entries.get(key)) else { return Ok(()) };
        let dir = root.join(key);
        fs::create_dir_all(&dir)?;
        if let Some(m) = &entry.model {
            let ckpt = dir.join("model.ckpt");
            if !ckpt.exists() {
                m.save(&ckpt)?;
            }
        }
        let file = EvalFile { key: key.to_string(), inputs: entry.inputs.clone(), evals: entry.evals.clone() };
        write_atomic(&dir.join("eval.json"), &serde_json::to_vec_pretty(&file)?)
    }

    /// Trains (or retrieves) the model for `inputs` and evaluates it on the
    /// eval split under `attack_id` (or retrieves that evaluation).
    pub fn stats(
        &mut self,
        inputs: &CacheInputs,
        splits: &DatasetSplits,
        attack_id: &str,
        spec: &AttackSpec,
        attacks: &AttackRegistry,
    ) -> Result<(Option<&Network>, EvalResult)> {
        let key = inputs.key();
        if !self.entries.contains_key(&key) && !self.load_from_disk(&key, inputs)? {
            self.entries.insert(key.clone(), CacheEntry { inputs: inputs.clone(), model: None, evals: BTreeMap::new() });
        }
        let entry = self.entries.get_mut(&key).expect("entry present");
        let fresh_eval = !entry.evals.contains_key(attack_id);
        let fresh_model = entry.model.is_none() && (fresh_eval || self.keep_models);
        if fresh_model {
            let (model, _) = trades_train_logged(&inputs.descriptor, &splits.train, &inputs.config, attacks)?;
            entry.model = Some(model);
        }
        if fresh_eval {
            let model = entry.model.as_ref().expect("model trained above");
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(&key, attack_id));
            let r = evaluate(model, &splits.eval, attack_id, spec, attacks, &mut rng)?;
            entry.evals.insert(attack_id.to_string(), r);
            self.misses += 1;
        } else {
            self.hits += 1;
        }
        if fresh_eval || fresh_model {
            self.persist(&key)?;
        }
        let entry = self.entries.get_mut(&key).expect("entry present");
        if !self.keep_models {
            entry.model = None;
        }
        let result = entry.evals[attack_id].clone();
        Ok((entry.model.as_ref(), result))
    }
}

fn eval_seed(key: &str, attack_id: &str) -> u64 {
    let d = Sha256::digest(format!("{key}/{attack_id}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// The adversarially trained teacher for a task and its eval-set accuracy
/// under the task's attack.
pub fn teacher_stats(
    task: &crate::task::TaskSetting,
    splits: &DatasetSplits,
    cfg: &ATConfig,
    spec: &AttackSpec,
    attacks: &AttackRegistry,
    cache: &mut ModelCache,
) -> Result<(Network, EvalResult)> {
    let inputs = CacheInputs {
        descriptor: task.teacher.clone(),
        dataset_id: task.dataset_id.clone(),
        dataset_fingerprint: splits.meta.fingerprint.clone(),
        config: cfg.clone(),
    };
    let (model, eval) = cache.stats(&inputs, splits, &task.attack_id, spec, attacks)?;
    let model = model.cloned().ok_or_else(|| Error::Checkpoint("teacher cache must keep models".into()))?;
    Ok((model, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::StageDescriptor;
    use crate::data::{load_dataset, LoadOptions};
    use crate::task::TaskSetting;

    fn tiny_desc(classes: u32) -> NetworkDescriptor {
        let st = |width, downsample| StageDescriptor { depth: 1, width, downsample, robust_block: false };
        NetworkDescriptor::new(vec![st(8, false), st(8, true)], 8, classes, 8).unwrap()
    }

    fn tiny_splits() -> DatasetSplits {
        let opts = LoadOptions { eval_size: 64, synthetic_resolution: 8, ..LoadOptions::default() };
        load_dataset("synthetic-gauss:2:256", &opts).unwrap()
    }

    fn quick_cfg() -> ATConfig {
        ATConfig {
            epochs: 2,
            batch_size: 32,
            learning_rate: 0.05,
            inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 2) },
            ..ATConfig::default()
        }
    }

    #[test]
    fn beta_zero_matches_plain_cross_entropy_loop() {
        let splits = tiny_splits();
        let cfg = ATConfig { trades_beta: 0.0, inner_attack: AttackSpec::clean(), ..quick_cfg() };
        let (net, _) = trades_train_logged(&tiny_desc(2), &splits.train, &cfg, &AttackRegistry::new()).unwrap();

        let opts = MaterializeOptions { seed: cfg.seed, robust_variant: cfg.robust_variant.clone() };
        let mut plain = Network::materialize(&tiny_desc(2), &opts).unwrap();
        let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6164_6573);
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
                let b = splits.train.select(batch);
                let mut grads = vec![0.0; plain.num_params()];
                let (logits, cache) = plain.forward_train(&b.images).unwrap();
                let (_, d) = cross_entropy(&logits, &b.labels);
                plain.backward(&cache, &d, Some(&mut grads), false);
                sgd.step(&mut plain, &mut grads);
            }
        }
        assert_eq!(net.params(), plain.params());
        assert_eq!(net.buffers(), plain.buffers());
    }

    #[test]
    fn kl_term_nonnegative_and_zero_without_adversary() {
        let splits = tiny_splits();
        let reg = AttackRegistry::new();
        let (_, log) = trades_train_logged(&tiny_desc(2), &splits.train, &quick_cfg(), &reg).unwrap();
        assert!(log.kl_terms.iter().all(|&k| k >= 0.0));
        assert!(log.kl_terms.iter().any(|&k| k > 0.0));
        let clean = ATConfig { inner_attack: AttackSpec::clean(), ..quick_cfg() };
        let (_, log) = trades_train_logged(&tiny_desc(2), &splits.train, &clean, &reg).unwrap();
        assert!(log.kl_terms.iter().all(|&k| k == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let splits = tiny_splits();
        let a = trades_train(&tiny_desc(2), &splits, &quick_cfg()).unwrap();
        let b = trades_train(&tiny_desc(2), &splits, &quick_cfg()).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn learns_separable_clusters() {
        let opts = LoadOptions { eval_size: 64, synthetic_resolution: 8, ..LoadOptions::default() };
        let splits = load_dataset("synthetic-gauss:2:1000", &opts).unwrap();
        let cfg = ATConfig { epochs: 5, ..quick_cfg() };
        let (net, log) = trades_train_logged(&tiny_desc(2), &splits.train, &cfg, &AttackRegistry::new()).unwrap();
        assert!(log.final_train_accuracy >= 0.9, "{}", log.final_train_accuracy);
        let r = evaluate(&net, &splits.train, "clean", &AttackSpec::clean(), &AttackRegistry::new(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(r.clean_accuracy >= 0.9, "{r:?}");
    }

    #[test]
    fn divergence_reports_epoch() {
        let splits = tiny_splits();
        let cfg = ATConfig { learning_rate: 1e30, epochs: 3, ..quick_cfg() };
        match trades_train(&tiny_desc(2), &splits, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    /// Predicts the label stored in the first pixel, or a pseudo-random class.
    struct Oracle {
        random: bool,
    }

    impl Classifier for Oracle {
        fn num_outputs(&self) -> usize {
            10
        }
        fn logits(&self, x: &ImageBatch) -> Result<crate::nn::Logits> {
            let mut l = crate::nn::Logits::zeros(x.n, 10);
            for i in 0..x.n {
                let item = x.item(i);
                let class = if self.random {
                    (item.iter().map(|v| v.to_bits() as u64).fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b)) % 10)
                        as usize
                } else {
                    (item[0] * 10.0).floor() as usize
                };
                l.row_mut(i)[class] = 1.0;
            }
            Ok(l)
        }
        fn input_gradient(
            &self,
            x: &ImageBatch,
            _: &mut dyn FnMut(&crate::nn::Logits) -> crate::nn::Logits,
        ) -> Result<(crate::nn::Logits, ImageBatch)> {
            Ok((self.logits(x)?, ImageBatch::zeros(x.n, x.h, x.w, x.c)))
        }
    }

    fn labelled(n: usize) -> LabeledImages {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let mut data = Vec::new();
        for &y in &labels {
            data.push((y as f32 + 0.5) / 10.0);
            data.extend((0..11).map(|_| rng.gen::<f32>()));
        }
        LabeledImages { images: ImageBatch { n, h: 2, w: 2, c: 3, data }, labels }
    }

    #[test]
    fn oracle_and_random_accuracies() {
        let set = labelled(2000);
        let reg = AttackRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = evaluate(&Oracle { random: false }, &set, "clean", &AttackSpec::clean(), &reg, &mut rng).unwrap();
        assert_eq!((r.clean_accuracy, r.robust_accuracy, r.n_items), (1.0, 1.0, 2000));
        let r = evaluate(&Oracle { random: true }, &set, "clean", &AttackSpec::clean(), &reg, &mut rng).unwrap();
        let sigma = (0.1f64 * 0.9 / 2000.0).sqrt();
        assert!((r.clean_accuracy - 0.1).abs() <= 3.0 * sigma, "{}", r.clean_accuracy);
    }

    fn task(splits: &DatasetSplits) -> TaskSetting {
        TaskSetting { dataset_id: splits.meta.id.clone(), attack_id: "fgsm".into(), teacher: tiny_desc(2), budget: 1 }
    }

    #[test]
    fn cache_hits_and_keys() {
        let splits = tiny_splits();
        let reg = AttackRegistry::new();
        let spec = AttackSpec::fgsm(DEFAULT_RADIUS);
        let mut cache = ModelCache::in_memory(true);
        let (m1, e1) = teacher_stats(&task(&splits), &splits, &quick_cfg(), &spec, &reg, &mut cache).unwrap();
        let (m2, e2) = teacher_stats(&task(&splits), &splits, &quick_cfg(), &spec, &reg, &mut cache).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 1));
        assert_eq!(e1, e2);
        assert_eq!(m1.param_hash(), m2.param_hash());

        let mut lean = ModelCache::in_memory(false);
        let inputs0 = CacheInputs {
            descriptor: tiny_desc(2),
            dataset_id: splits.meta.id.clone(),
            dataset_fingerprint: splits.meta.fingerprint.clone(),
            config: quick_cfg(),
        };
        let (m, e) = lean.stats(&inputs0, &splits, "fgsm", &spec, &reg).unwrap();
        assert!(m.is_none());
        assert_eq!(e, e1);
        let (_, pgd) = lean.stats(&inputs0, &splits, "pgd20", &AttackSpec::pgd(DEFAULT_RADIUS, 20), &reg).unwrap();
        assert_eq!(pgd.clean_accuracy, e1.clean_accuracy);
        let inputs = |seed| CacheInputs {
            descriptor: tiny_desc(2),
            dataset_id: "d".into(),
            dataset_fingerprint: "f".into(),
            config: ATConfig { seed, ..quick_cfg() },
        };
        assert_ne!(inputs(0).key(), inputs(1).key());
    }

    #[test]
    fn disk_cache_round_trip_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let splits = tiny_splits();
        let reg = AttackRegistry::new();
        let spec = AttackSpec::fgsm(DEFAULT_RADIUS);
        let t = task(&splits);
        let (m1, e1) = {
            let mut c = ModelCache::on_disk(dir.path(), true);
            teacher_stats(&t, &splits, &quick_cfg(), &spec, &reg, &mut c).unwrap()
        };
        let mut c = ModelCache::on_disk(dir.path(), true);
        let (m2, e2) = teacher_stats(&t, &splits, &quick_cfg(), &spec, &reg, &mut c).unwrap();
        assert_eq!((c.hits, c.misses, c.invalidated), (1, 0, 0));
        assert_eq!(e1, e2);
        assert_eq!(m1.param_hash(), m2.param_hash());

        let entry = fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
        let eval_path = entry.join("eval.json");
        let tampered = fs::read_to_string(&eval_path).unwrap().replace("\"fgsm\"", "\"fgsm2\"");
        let mut v: serde_json::Value = serde_json::from_str(&tampered).unwrap();
        v["inputs"]["config"]["epochs"] = serde_json::json!(9);
        fs::write(&eval_path, serde_json::to_vec(&v).unwrap()).unwrap();
        let mut c = ModelCache::on_disk(dir.path(), true);
        let (_, e3) = teacher_stats(&t, &splits, &quick_cfg(), &spec, &reg, &mut c).unwrap();
        assert_eq!((c.invalidated, c.misses), (1, 1));
        assert_eq!(e1, e3);
    }
}
