//! The search MDP: reward shaping with an annealed budget penalty, the
//! policy-gradient step, meta-training across sampled tasks and fine-tuning
//! on one fixed task.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{apply_action, cost_model, CompressionAction, CostReport, NetworkDescriptor, StageAction};
use crate::attack::AttackRegistry;
use crate::data::{load_dataset, DatasetSplits, LoadOptions};
use crate::encoder::{EncoderConfig, EncoderInput, Provenance, StateEmbedding, StateEncoder};
use crate::error::{Error, Result};
use crate::policy::{ActionSample, Policy};
use crate::task::{task_embeddings, ArchEntry, BufferSet, CtScale, TaskEmbeddings, TaskRegistry, TaskSetting};
use crate::train::{teacher_stats, ATConfig, CacheInputs, EvalResult, ModelCache};

/// Which fraction `C` measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CDefinition {
    /// `C = 1 − student/teacher`: the share of cost removed.
    #[default]
    Removed,
    /// `C = student/teacher`.
    Remaining,
}

/// The cost currency of `C`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostCurrency {
    #[default]
    Flops,
    Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLConfig {
    pub meta_iterations: usize,
    pub steps_per_iteration: usize,
    pub finetune_iterations: usize,
    /// Policy step size η.
    pub learning_rate: f64,
    pub reward_epochs: usize,
    pub seed: u64,
    pub c_definition: CDefinition,
    pub cost_currency: CostCurrency,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            meta_iterations: 100,
            steps_per_iteration: 5,
            finetune_iterations: 10,
            learning_rate: 0.002,
            reward_epochs: 5,
            seed: 0,
            c_definition: CDefinition::Removed,
            cost_currency: CostCurrency::Flops,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_iterations == 0 || self.steps_per_iteration == 0 || self.finetune_iterations == 0 || self.reward_epochs == 0 {
            return Err(Error::Config("iteration counts, steps per iteration and reward epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("policy learning rate must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Linear decay `max(0, 1 − m/M)`.
pub fn anneal(m: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1.0 - m as f64 / total as f64).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    #[serde(rename = "C")]
    pub c: f64,
    pub zeta_rl: f64,
    pub budget_cb: f64,
    pub anneal_eps: f64,
    pub acc_rl: f64,
    pub acc_teacher: f64,
    pub reward: f64,
    pub within_budget: bool,
}

/// Budget-aware reward. Within budget `r = C(2−C)·Ã_RL/Ã_teacher`; over
/// budget `r = ε·(C(2−C)·Ã_RL/Ã_teacher + 1) − 1`. `C` is clamped to
/// `[0, 1]` so that a student costlier than its teacher scores like an
/// uncompressed one.
#[allow(clippy::too_many_arguments)]
pub fn compute_reward(
    acc_rl: f64,
    acc_teacher: f64,
    student_cost: &CostReport,
    teacher_cost: &CostReport,
    budget_cb: u64,
    anneal_eps: f64,
    c_definition: CDefinition,
    currency: CostCurrency,
) -> Result<RewardRecord> {
    if !(acc_teacher > 0.0) {
        return Err(Error::ZeroTeacherAccuracy);
    }
    let (s, t) = match currency {
        CostCurrency::Flops => (student_cost.flops, teacher_cost.flops),
        CostCurrency::Params => (student_cost.params, teacher_cost.params),
    };
    if s == 0 || t == 0 {
        return Err(Error::InvalidArchitecture("costs must be positive".into()));
    }
    let ratio = s as f64 / t as f64;
    let c = match c_definition {
        CDefinition::Removed => 1.0 - ratio,
        CDefinition::Remaining => ratio,
    }
    .clamp(0.0, 1.0);
    let zeta_rl = student_cost.flops as f64;
    let within_budget = zeta_rl <= budget_cb as f64;
    let eps = anneal_eps.clamp(0.0, 1.0);
    let acc_rl = acc_rl.max(0.0);
    let base = c * (2.0 - c) * acc_rl / acc_teacher;
    // `ε·(base + 1) − 1` rearranged so that ε = 1 gives `base` and ε = 0
    // gives −1 without rounding.
    let reward = if within_budget { base } else { eps * base - (1.0 - eps) };
    Ok(RewardRecord {
        c,
        zeta_rl,
        budget_cb: budget_cb as f64,
        anneal_eps: eps,
        acc_rl,
        acc_teacher,
        reward,
        within_budget,
    })
}

/// One `(s_t, a_t, r_t)` transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub task: TaskSetting,
    pub state: StateEmbedding,
    pub sample: ActionSample,
    pub reward: RewardRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

/// `θ ← θ + η Σ_t r_t ∇ objective(a_t | s_t)`, one synchronous step.
pub fn vpg_update(policy: &mut Policy, steps: &[TrajectoryStep], eta: f64) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::EmptyBuffer("trajectory"));
    }
    let objective = policy.config().objective;
    let mut total = vec![0.0; policy.params().len()];
    for (t, s) in steps.iter().enumerate() {
        let (_, g) = policy.objective_grad(&s.state, &s.sample, objective)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePolicyGradient(t));
        }
        for (a, b) in total.iter_mut().zip(&g) {
            *a += eta * s.reward.reward * b;
        }
    }
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePolicyGradient(steps.len() - 1));
    }
    policy.apply_step(&total)
}

/// SHA-256 of the task's canonical JSON.
pub fn task_hash(task: &TaskSetting) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(task).expect("task serializes")))
}

/// Uniform keep fractions in (0, 1) and fair bits.
pub fn random_action(teacher: &NetworkDescriptor, rng: &mut ChaCha8Rng) -> CompressionAction {
    let per_stage = (0..teacher.num_stages())
        .map(|_| StageAction {
            width_keep: rng.gen_range(f64::EPSILON..1.0),
            depth_keep: rng.gen_range(f64::EPSILON..1.0),
            downsample: rng.gen(),
            robust_block: rng.gen(),
        })
        .collect();
    CompressionAction { per_stage }
}

/// Datasets, attacks, training recipes and caches shared by every step.
pub struct Environment {
    pub registry: TaskRegistry,
    pub load: LoadOptions,
    pub attacks: AttackRegistry,
    pub teacher_training: ATConfig,
    /// Candidate training; `epochs` is replaced by the RL reward epochs.
    pub reward_training: ATConfig,
    pub cache: ModelCache,
    datasets: BTreeMap<String, DatasetSplits>,
    embeddings: BTreeMap<String, (TaskEmbeddings, EvalResult)>,
}

/// Everything produced by evaluating one action.
#[derive(Clone, Debug)]
pub struct ActionOutcome {
    pub student: NetworkDescriptor,
    pub student_cost: CostReport,
    pub reward: RewardRecord,
}

impl Environment {
    pub fn new(registry: TaskRegistry, load: LoadOptions, teacher_training: ATConfig, reward_training: ATConfig) -> Self {
        Self {
            registry,
            load,
            attacks: AttackRegistry::new(),
            teacher_training,
            reward_training,
            cache: ModelCache::in_memory(true),
            datasets: BTreeMap::new(),
            embeddings: BTreeMap::new(),
        }
    }

    /// Registers pre-built splits under `id`, bypassing the loader.
    pub fn insert_dataset(&mut self, id: &str, splits: DatasetSplits) {
        self.datasets.insert(id.to_string(), splits);
    }

    pub fn dataset(&mut self, id: &str) -> Result<&DatasetSplits> {
        if !self.datasets.contains_key(id) {
            let splits = load_dataset(id, &self.load)?;
            self.datasets.insert(id.to_string(), splits);
        }
        Ok(&self.datasets[id])
    }

    /// Teacher pool at the class count and resolution of the first
    /// registered dataset. Every dataset of a run must share the resolution.
    pub fn teacher_pool(&mut self) -> Result<Vec<ArchEntry>> {
        let first = self.registry.datasets.first().cloned().ok_or(Error::EmptyBuffer("data"))?;
        let meta = self.dataset(&first)?.meta.clone();
        self.registry.teacher_pool(meta.num_classes, meta.resolution)
    }

    pub fn ct_scale(&mut self) -> Result<CtScale> {
        CtScale::from_pool(&self.teacher_pool()?)
    }

    /// Builds the task for `entry` on `dataset_id`, adapting the head to the
    /// dataset's class count.
    pub fn task(&mut self, dataset_id: &str, attack_id: &str, entry: &ArchEntry) -> Result<TaskSetting> {
        let meta = self.dataset(dataset_id)?.meta.clone();
        if meta.resolution as u32 != entry.descriptor.input_resolution() {
            return Err(Error::Config(format!(
                "dataset {dataset_id} has resolution {}; the teacher pool was built for {}",
                meta.resolution,
                entry.descriptor.input_resolution()
            )));
        }
        let teacher = entry.descriptor.with_io(meta.num_classes as u32, meta.resolution as u32)?;
        Ok(TaskSetting { dataset_id: dataset_id.into(), attack_id: attack_id.into(), teacher, budget: entry.budget })
    }

    /// Teacher profiles and teacher accuracy, computed once per task.
    pub fn teacher_profile(&mut self, task: &TaskSetting) -> Result<(TaskEmbeddings, EvalResult)> {
        let spec = self.registry.attack(&task.attack_id)?.clone();
        self.dataset(&task.dataset_id)?;
        let splits = &self.datasets[&task.dataset_id];
        let inputs = CacheInputs {
            descriptor: task.teacher.clone(),
            dataset_id: task.dataset_id.clone(),
            dataset_fingerprint: splits.meta.fingerprint.clone(),
            config: self.teacher_training.clone(),
        };
        let key = format!("{}/{}", inputs.key(), task.attack_id);
        if let Some(hit) = self.embeddings.get(&key) {
            return Ok(hit.clone());
        }
        let (net, eval) = teacher_stats(task, splits, &self.teacher_training, &spec, &self.attacks, &mut self.cache)?;
        let d = Sha256::digest(key.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")));
        let emb = task_embeddings(&net, &task.teacher, &splits.eval, &spec, &self.attacks, &mut rng)?;
        self.embeddings.insert(key, (emb.clone(), eval.clone()));
        Ok((emb, eval))
    }

    pub fn encoder_input(&mut self, task: &TaskSetting, cfg: &EncoderConfig) -> Result<(EncoderInput, EvalResult)> {
        let (emb, eval) = self.teacher_profile(task)?;
        let scale = self.ct_scale()?;
        Ok((EncoderInput::new(&task.teacher, &emb, &scale, cfg)?, eval))
    }

    pub fn state(&mut self, task: &TaskSetting, encoder: &StateEncoder) -> Result<(StateEmbedding, EvalResult)> {
        let (input, eval) = self.encoder_input(task, encoder.config())?;
        let provenance = Provenance { task_hash: task_hash(task), teacher_hash: task.teacher.content_hash() };
        Ok((encoder.encode_state(&input, provenance)?, eval))
    }

    /// Compresses the task's teacher, trains and evaluates the student, and
    /// scores it.
    pub fn evaluate_action(
        &mut self,
        task: &TaskSetting,
        action: &CompressionAction,
        acc_teacher: f64,
        eps: f64,
        cfg: &RLConfig,
    ) -> Result<ActionOutcome> {
        let student = apply_action(&task.teacher, action)?;
        let res = task.teacher.input_resolution();
        let student_cost = cost_model(&student, res)?;
        let teacher_cost = cost_model(&task.teacher, res)?;
        let spec = self.registry.attack(&task.attack_id)?.clone();
        self.dataset(&task.dataset_id)?;
        let splits = &self.datasets[&task.dataset_id];
        let inputs = CacheInputs {
            descriptor: student.clone(),
            dataset_id: task.dataset_id.clone(),
            dataset_fingerprint: splits.meta.fingerprint.clone(),
            config: ATConfig { epochs: cfg.reward_epochs, ..self.reward_training.clone() },
        };
        let (_, eval) = self.cache.stats(&inputs, splits, &task.attack_id, &spec, &self.attacks)?;
        let reward = compute_reward(
            eval.robust_accuracy,
            acc_teacher,
            &student_cost,
            &teacher_cost,
            task.budget,
            eps,
            cfg.c_definition,
            cfg.cost_currency,
        )?;
        Ok(ActionOutcome { student, student_cost, reward })
    }
}

/// Stage encodings plus profiles for every (dataset, attack, teacher) triple
/// of the registry: the encoder's pre-training corpus.
pub fn pretraining_corpus(env: &mut Environment, cfg: &EncoderConfig) -> Result<Vec<EncoderInput>> {
    let pool = env.teacher_pool()?;
    let datasets = env.registry.datasets.clone();
    let attacks: Vec<String> = env.registry.attacks.keys().cloned().collect();
    let mut out = Vec::new();
    for d in &datasets {
        for a in &attacks {
            for entry in &pool {
                let task = env.task(d, a, entry)?;
                out.push(env.encoder_input(&task, cfg)?.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub dataset: String,
    pub attack: String,
    pub teacher_hash: String,
    pub budget: u64,
    pub task_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub flops: u64,
    pub params: u64,
    /// Mean per-instance inference cost over the eval set.
    pub zeta: f64,
}

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub step: usize,
    pub task: TaskRecord,
    pub action: Option<CompressionAction>,
    pub costs: Option<CostRecord>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub eps: f64,
    pub acc_rl: Option<f64>,
    pub acc_teacher: Option<f64>,
    pub reward: Option<f64>,
    pub skipped: bool,
    pub within_budget: Option<bool>,
    pub c_definition: CDefinition,
    pub teacher: NetworkDescriptor,
    pub student: Option<NetworkDescriptor>,
    pub error: Option<String>,
}

/// Appends records to memory and, optionally, to a JSON-lines file.
pub struct RunLog {
    writer: Option<BufWriter<File>>,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self { writer: None, records: Vec::new() }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { writer: Some(BufWriter::new(f)), records: Vec::new() })
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::CorruptRecord { line: i + 1, reason: e.to_string() }))
        .collect()
}

fn task_record(task: &TaskSetting) -> TaskRecord {
    TaskRecord {
        dataset: task.dataset_id.clone(),
        attack: task.attack_id.clone(),
        teacher_hash: task.teacher.content_hash(),
        budget: task.budget,
        task_hash: task_hash(task),
    }
}

struct StepResult {
    step: TrajectoryStep,
    outcome: ActionOutcome,
}

fn run_step(
    env: &mut Environment,
    encoder: &StateEncoder,
    policy: &Policy,
    task: &TaskSetting,
    eps: f64,
    cfg: &RLConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let (state, teacher_eval) = env.state(task, encoder)?;
    let out = policy.forward(&state)?;
    let sample = Policy::sample(&out, rng)?;
    let outcome = env.evaluate_action(task, &sample.action, teacher_eval.robust_accuracy, eps, cfg)?;
    let step = TrajectoryStep { task: task.clone(), state, sample, reward: outcome.reward.clone() };
    Ok(StepResult { step, outcome })
}

/// Runs one step, updates the policy on success, and logs the outcome
/// either way. Returns the student and its reward when the step succeeded.
#[allow(clippy::too_many_arguments)]
fn logged_step(
    env: &mut Environment,
    encoder: &StateEncoder,
    policy: &mut Policy,
    task: &TaskSetting,
    (iter, step, eps): (usize, usize, f64),
    cfg: &RLConfig,
    rng: &mut ChaCha8Rng,
    log: &mut RunLog,
    traj: &mut Trajectory,
) -> Result<Option<(NetworkDescriptor, f64)>> {
    let result = run_step(env, encoder, policy, task, eps, cfg, rng).and_then(|r| {
        vpg_update(policy, std::slice::from_ref(&r.step), cfg.learning_rate)?;
        Ok(r)
    });
    let mut rec = StepRecord {
        iter,
        step,
        task: task_record(task),
        action: None,
        costs: None,
        c: None,
        eps,
        acc_rl: None,
        acc_teacher: None,
        reward: None,
        skipped: true,
        within_budget: None,
        c_definition: cfg.c_definition,
        teacher: task.teacher.clone(),
        student: None,
        error: None,
    };
    let out = match result {
        Ok(StepResult { step: s, outcome }) => {
            let r = &outcome.reward;
            rec.action = Some(s.sample.action.clone());
            rec.costs = Some(CostRecord {
                flops: outcome.student_cost.flops,
                params: outcome.student_cost.params,
                zeta: r.zeta_rl,
            });
            rec.c = Some(r.c);
            rec.acc_rl = Some(r.acc_rl);
            rec.acc_teacher = Some(r.acc_teacher);
            rec.reward = Some(r.reward);
            rec.within_budget = Some(r.within_budget);
            rec.skipped = false;
            rec.student = Some(outcome.student.clone());
            log::info!("iter {iter} step {step}: reward {:.4} (C {:.3}, acc {:.3})", r.reward, r.c, r.acc_rl);
            let reward = r.reward;
            traj.steps.push(s);
            Some((outcome.student, reward))
        }
        Err(e) => {
            log::warn!("iter {iter} step {step} skipped: {e}");
            rec.error = Some(e.to_string());
            None
        }
    };
    log.push(rec)?;
    Ok(out)
}

fn check_encoder(encoder: &StateEncoder) -> Result<String> {
    if !encoder.is_frozen() {
        return Err(Error::Config("the state encoder must be pre-trained and frozen".into()));
    }
    Ok(encoder.param_hash())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub skipped: usize,
    pub encoder_hash: String,
    pub policy_hash: String,
    /// Highest-reward student, if any step succeeded.
    pub best: Option<(NetworkDescriptor, f64)>,
    /// Architecture-buffer length at the end of each iteration.
    pub buffer_lengths: Vec<usize>,
}

fn track_best(best: &mut Option<(NetworkDescriptor, f64)>, cand: &(NetworkDescriptor, f64)) {
    if best.as_ref().map_or(true, |(_, r)| cand.1 > *r) {
        *best = Some(cand.clone());
    }
}

/// Meta-training across sampled tasks: each iteration restores the
/// architecture buffer, samples a dataset and an attack, then takes `T`
/// steps, each on a teacher drawn from the (growing) buffer.
pub fn meta_train(
    cfg: &RLConfig,
    env: &mut Environment,
    encoder: &StateEncoder,
    policy: &mut Policy,
    log: &mut RunLog,
) -> Result<RunSummary> {
    cfg.validate()?;
    let encoder_hash = check_encoder(encoder)?;
    let pool = env.teacher_pool()?;
    let mut buffers = BufferSet::new(env.registry.datasets.clone(), env.registry.attacks.keys().cloned().collect(), pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = RunSummary {
        steps: 0,
        skipped: 0,
        encoder_hash: encoder_hash.clone(),
        policy_hash: String::new(),
        best: None,
        buffer_lengths: Vec::new(),
    };
    for m in 1..=cfg.meta_iterations {
        buffers.reinit();
        let eps = anneal(m, cfg.meta_iterations);
        let dataset = buffers.sample_dataset(&mut rng)?;
        let attack = buffers.sample_attack(&mut rng)?;
        let mut traj = Trajectory::default();
        for t in 1..=cfg.steps_per_iteration {
            let entry = buffers.sample_arch(&mut rng)?;
            summary.steps += 1;
            let task = match env.task(&dataset, &attack, &entry) {
                Ok(task) => task,
                Err(e) => {
                    log::warn!("iter {m} step {t}: cannot build task: {e}");
                    summary.skipped += 1;
                    continue;
                }
            };
            match logged_step(env, encoder, policy, &task, (m, t, eps), cfg, &mut rng, log, &mut traj)? {
                Some(done) => {
                    buffers.push_architecture(done.0.clone(), entry.budget);
                    track_best(&mut summary.best, &done);
                }
                None => summary.skipped += 1,
            }
        }
        summary.buffer_lengths.push(buffers.arch_buffer.len());
    }
    if encoder.param_hash() != encoder_hash {
        return Err(Error::Checkpoint("encoder parameters changed during training".into()));
    }
    summary.policy_hash = policy.param_hash();
    Ok(summary)
}

/// Fine-tuning on one fixed task: `M̃` iterations of a single step each.
pub fn fine_tune(
    cfg: &RLConfig,
    env: &mut Environment,
    encoder: &StateEncoder,
    policy: &mut Policy,
    target: &TaskSetting,
    log: &mut RunLog,
) -> Result<RunSummary> {
    cfg.validate()?;
    let encoder_hash = check_encoder(encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = RunSummary {
        steps: 0,
        skipped: 0,
        encoder_hash: encoder_hash.clone(),
        policy_hash: String::new(),
        best: None,
        buffer_lengths: Vec::new(),
    };
    for m in 1..=cfg.finetune_iterations {
        let eps = anneal(m, cfg.finetune_iterations);
        let mut traj = Trajectory::default();
        summary.steps += 1;
        match logged_step(env, encoder, policy, target, (m, 1, eps), cfg, &mut rng, log, &mut traj)? {
            Some(done) => track_best(&mut summary.best, &done),
            None => summary.skipped += 1,
        }
    }
    if encoder.param_hash() != encoder_hash {
        return Err(Error::Checkpoint("encoder parameters changed during fine-tuning".into()));
    }
    summary.policy_hash = policy.param_hash();
    Ok(summary)
}

/// Share of `n` policy samples for `state` whose student fits the budget.
pub fn budget_compliance(
    policy: &Policy,
    state: &StateEmbedding,
    task: &TaskSetting,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let out = policy.forward(state)?;
    let res = task.teacher.input_resolution();
    let mut ok = 0;
    for _ in 0..n {
        let s = Policy::sample(&out, rng)?;
        let student = apply_action(&task.teacher, &s.action)?;
        if cost_model(&student, res)?.flops <= task.budget {
            ok += 1;
        }
    }
    Ok(ok as f64 / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::StageDescriptor;
    use crate::attack::{AttackLoss, AttackSpec, DEFAULT_RADIUS};
    use crate::encoder::LipsMode;
    use crate::policy::PolicyConfig;
    use crate::task::TeacherSpec;

    fn cost(flops: u64) -> CostReport {
        CostReport { params: flops / 10, flops, stem_flops: 0, head_flops: 0, per_stage_flops: vec![], per_stage_params: vec![] }
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(anneal(0, 10), 1.0);
        assert_eq!(anneal(10, 10), 0.0);
        assert_eq!(anneal(5, 10), 0.5);
        assert_eq!(anneal(12, 10), 0.0);
    }

    #[test]
    fn reward_examples() {
        let r = compute_reward(0.4, 0.5, &cost(50), &cost(100), 60, 0.3, CDefinition::Removed, CostCurrency::Flops).unwrap();
        assert!((r.reward - 0.6).abs() < 1e-12 && r.within_budget && r.c == 0.5);
        let over = |eps| compute_reward(0.4, 0.5, &cost(50), &cost(100), 40, eps, CDefinition::Removed, CostCurrency::Flops).unwrap();
        assert_eq!(over(1.0).reward, r.reward);
        assert_eq!(over(0.0).reward, -1.0);
        assert!(!over(0.5).within_budget);
        let rem = compute_reward(0.4, 0.5, &cost(25), &cost(100), 60, 0.3, CDefinition::Remaining, CostCurrency::Flops).unwrap();
        assert!((rem.c - 0.25).abs() < 1e-12);
        let p = compute_reward(0.4, 0.5, &cost(50), &cost(200), 60, 0.3, CDefinition::Removed, CostCurrency::Params).unwrap();
        assert!((p.c - 0.75).abs() < 1e-12);
        assert!(matches!(
            compute_reward(0.4, 0.0, &cost(50), &cost(100), 60, 0.3, CDefinition::Removed, CostCurrency::Flops),
            Err(Error::ZeroTeacherAccuracy)
        ));
    }

    #[test]
    fn reward_lower_bound_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..20_000 {
            let s = rng.gen_range(1..1_000_000u64);
            let t = rng.gen_range(1..1_000_000u64);
            let def = if i % 2 == 0 { CDefinition::Removed } else { CDefinition::Remaining };
            let r = compute_reward(rng.gen(), rng.gen_range(1e-3..1.0), &cost(s), &cost(t), rng.gen_range(0..1_000_000), rng.gen(), def, CostCurrency::Flops)
                .unwrap();
            assert!(r.reward >= -1.0);
            assert_eq!(r.within_budget, r.zeta_rl <= r.budget_cb);
        }
    }

    fn toy_step(policy: &Policy, reward: f64, seed: u64) -> TrajectoryStep {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = policy.config().d_s;
        let state = StateEmbedding {
            per_stage: vec![(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()],
            provenance: Provenance::default(),
        };
        let sample = Policy::sample(&policy.forward(&state).unwrap(), &mut rng).unwrap();
        let teacher = NetworkDescriptor::new(
            vec![StageDescriptor { depth: 1, width: 8, downsample: false, robust_block: false }],
            8,
            2,
            8,
        )
        .unwrap();
        TrajectoryStep {
            task: TaskSetting { dataset_id: "d".into(), attack_id: "a".into(), teacher, budget: 1 },
            state,
            sample,
            reward: RewardRecord {
                c: 0.0,
                zeta_rl: 0.0,
                budget_cb: 0.0,
                anneal_eps: 0.0,
                acc_rl: 0.0,
                acc_teacher: 1.0,
                reward,
                within_budget: true,
            },
        }
    }

    #[test]
    fn vpg_zero_reward_and_ascent() {
        let mut pol = Policy::new(&PolicyConfig { d_s: 8, hidden: 6, ..PolicyConfig::default() }).unwrap();
        let before = pol.params().to_vec();
        let s = toy_step(&pol, 0.0, 1);
        vpg_update(&mut pol, &[s], 0.1).unwrap();
        assert_eq!(pol.params(), &before[..]);
        let s = toy_step(&pol, 1.0, 2);
        let lp = |p: &Policy| Policy::log_prob(&p.forward(&s.state).unwrap(), &s.sample).unwrap();
        let l0 = lp(&pol);
        vpg_update(&mut pol, std::slice::from_ref(&s), 1e-3).unwrap();
        assert!(lp(&pol) > l0);
        assert!(vpg_update(&mut pol, &[], 0.1).is_err());
    }

    #[test]
    fn vpg_rejects_non_finite_gradients() {
        let mut pol = Policy::new(&PolicyConfig { d_s: 8, hidden: 6, ..PolicyConfig::default() }).unwrap();
        let good = toy_step(&pol, 1.0, 3);
        let mut bad = toy_step(&pol, 1.0, 4);
        bad.sample.raw_gauss[0][0] = f64::INFINITY;
        assert!(matches!(vpg_update(&mut pol, &[good, bad], 0.1), Err(Error::NonFinitePolicyGradient(1))));
    }

    pub(crate) fn toy_env() -> Environment {
        let registry = TaskRegistry {
            datasets: vec!["synthetic-gauss:2:96".into()],
            attacks: BTreeMap::from([("fgsm".to_string(), AttackSpec::fgsm(DEFAULT_RADIUS))]),
            teachers: vec![TeacherSpec::analog("WRN-10-1", 2, 0.5)],
        };
        let load = LoadOptions { eval_size: 16, synthetic_resolution: 8, ..LoadOptions::default() };
        let at = ATConfig {
            epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 1) },
            ..ATConfig::default()
        };
        Environment::new(registry, load, at.clone(), at)
    }

    pub(crate) fn toy_agent(env: &mut Environment) -> (StateEncoder, Policy) {
        let ecfg = EncoderConfig { eval_size: 16, lips_mode: LipsMode::Pooled, epochs: 5, d_s: 8, hidden: 4, fusion_hidden: 8, ..EncoderConfig::default() };
        let mut enc = StateEncoder::new(&ecfg).unwrap();
        let corpus = pretraining_corpus(env, &ecfg).unwrap();
        enc.pretrain(&corpus).unwrap();
        (enc, Policy::new(&PolicyConfig { d_s: 8, hidden: 8, ..PolicyConfig::default() }).unwrap())
    }

    #[test]
    fn single_step_meta_run_writes_one_record() {
        let mut env = toy_env();
        let (enc, mut pol) = toy_agent(&mut env);
        let cfg = RLConfig { meta_iterations: 1, steps_per_iteration: 1, ..RLConfig::default() };
        let mut log = RunLog::in_memory();
        let s = meta_train(&cfg, &mut env, &enc, &mut pol, &mut log).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(s.buffer_lengths, vec![2]);
        assert!(!log.records[0].skipped);
    }

    #[test]
    fn meta_run_is_deterministic_and_grows_the_buffer() {
        let cfg = RLConfig { meta_iterations: 2, steps_per_iteration: 2, seed: 5, ..RLConfig::default() };
        let run = || {
            let mut env = toy_env();
            let (enc, mut pol) = toy_agent(&mut env);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("records.jsonl");
            let mut log = RunLog::to_file(&path).unwrap();
            let s = meta_train(&cfg, &mut env, &enc, &mut pol, &mut log).unwrap();
            drop(log);
            (std::fs::read(&path).unwrap(), s, enc.param_hash())
        };
        let (a, sa, ha) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert_eq!(sa.buffer_lengths, vec![3, 3]);
        assert_eq!(sa.encoder_hash, ha);
        let text = String::from_utf8(a).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for k in ["iter", "step", "task", "action", "costs", "C", "eps", "acc_rl", "acc_teacher", "reward", "skipped"] {
            assert!(first.get(k).is_some(), "missing {k}");
        }
        for k in ["dataset", "attack", "teacher_hash", "budget"] {
            assert!(first["task"].get(k).is_some());
        }
    }

    #[test]
    fn fine_tune_keeps_the_task_and_returns_the_best() {
        let mut env = toy_env();
        let (enc, mut pol) = toy_agent(&mut env);
        let entry = env.teacher_pool().unwrap().remove(0);
        let target = env.task("synthetic-gauss:2:96", "fgsm", &entry).unwrap();
        let cfg = RLConfig { finetune_iterations: 3, ..RLConfig::default() };
        let mut log = RunLog::in_memory();
        let s = fine_tune(&cfg, &mut env, &enc, &mut pol, &target, &mut log).unwrap();
        assert_eq!(log.records.len(), 3);
        let h = task_hash(&target);
        assert!(log.records.iter().all(|r| r.task.task_hash == h));
        let best = log.records.iter().filter_map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(s.best.unwrap().1, best);
    }

    #[test]
    fn unfrozen_encoder_is_rejected_and_failures_are_logged() {
        let mut env = toy_env();
        let (enc, mut pol) = toy_agent(&mut env);
        let fresh = StateEncoder::new(enc.config()).unwrap();
        let cfg = RLConfig { meta_iterations: 1, steps_per_iteration: 1, ..RLConfig::default() };
        assert!(meta_train(&cfg, &mut env, &fresh, &mut pol, &mut RunLog::in_memory()).is_err());
        env.registry.attacks.clear();
        env.registry.attacks.insert("broken".into(), AttackSpec { steps: 0, ..AttackSpec::pgd(DEFAULT_RADIUS, 1) });
        let mut log = RunLog::in_memory();
        let s = meta_train(&cfg, &mut env, &enc, &mut pol, &mut log).unwrap();
        assert_eq!((s.skipped, log.records.len()), (1, 1));
        assert!(log.records[0].skipped && log.records[0].error.is_some());
    }
}
