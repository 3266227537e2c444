//! Task registries, the data / attack / architecture buffers, task sampling,
//! and the per-instance LIPS and CT profiles.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{cost_model, teacher_from_name, NetworkDescriptor, StageDescriptor, MIN_WIDTH, WIDTH_QUANTUM};
use crate::attack::{AttackRegistry, AttackSpec, DEFAULT_RADIUS};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::Classifier;

const GIGA: f64 = 1e9;

/// A teacher architecture paired with its FLOPs budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchEntry {
    pub descriptor: NetworkDescriptor,
    pub budget: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub name: String,
    /// Budget in GFLOPs.
    #[serde(default)]
    pub budget_gflops: f64,
    /// When set, the budget is this fraction of the teacher's own FLOPs at
    /// the dataset resolution and `budget_gflops` is ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_fraction: Option<f64>,
    /// Stage widths are divided by this (rounded to the width quantum) to get
    /// a desk-scale analog of the named network.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub width_divisor: u32,
}

fn one() -> u32 {
    1
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

impl TeacherSpec {
    pub fn new(name: &str, budget_gflops: f64) -> Self {
        Self { name: name.into(), budget_gflops, budget_fraction: None, width_divisor: 1 }
    }

    /// A width-reduced analog with a budget relative to its own cost.
    pub fn analog(name: &str, width_divisor: u32, budget_fraction: f64) -> Self {
        Self { name: name.into(), budget_gflops: 0.0, budget_fraction: Some(budget_fraction), width_divisor }
    }

    pub fn descriptor(&self, num_classes: usize, resolution: usize) -> Result<NetworkDescriptor> {
        if self.width_divisor == 0 {
            return Err(Error::Config(format!("teacher {} has width_divisor 0", self.name)));
        }
        let full = teacher_from_name(&self.name)?;
        let q = WIDTH_QUANTUM as f64;
        let stages = full
            .stages()
            .iter()
            .map(|s| {
                let w = ((s.width as f64 / self.width_divisor as f64 / q).round() * q) as u32;
                StageDescriptor { width: w.max(MIN_WIDTH), ..s.clone() }
            })
            .collect();
        NetworkDescriptor::new(stages, full.stem_width(), num_classes as u32, resolution as u32)
    }

    fn budget(&self, desc: &NetworkDescriptor) -> Result<u64> {
        let budget = match self.budget_fraction {
            Some(f) if f > 0.0 => f * cost_model(desc, desc.input_resolution())?.flops as f64,
            Some(_) => 0.0,
            None => self.budget_gflops * GIGA,
        };
        if !(budget > 0.0) {
            return Err(Error::Config(format!("teacher {} needs a positive budget", self.name)));
        }
        Ok(budget.round() as u64)
    }
}

/// Everything a run may sample from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub datasets: Vec<String>,
    pub attacks: BTreeMap<String, AttackSpec>,
    pub teachers: Vec<TeacherSpec>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        let teachers = [("WRN-28-10", 5.0), ("WRN-34-12", 10.0), ("WRN-46-14", 20.0), ("WRN-70-16", 40.0)]
            .into_iter()
            .map(|(name, budget)| TeacherSpec::new(name, budget))
            .collect();
        Self {
            datasets: vec!["cifar10".into(), "cifar100".into()],
            attacks: default_attacks(),
            teachers,
        }
    }
}

/// `fgsm`, `pgd20` and `cw40` at radius 8/255.
pub fn default_attacks() -> BTreeMap<String, AttackSpec> {
    BTreeMap::from([
        ("fgsm".to_string(), AttackSpec::fgsm(DEFAULT_RADIUS)),
        ("pgd20".to_string(), AttackSpec::pgd(DEFAULT_RADIUS, 20)),
        ("cw40".to_string(), AttackSpec::cw(DEFAULT_RADIUS, 40)),
    ])
}

impl TaskRegistry {
    pub fn attack(&self, id: &str) -> Result<&AttackSpec> {
        if id == "clean" {
            static CLEAN: std::sync::OnceLock<AttackSpec> = std::sync::OnceLock::new();
            return Ok(CLEAN.get_or_init(AttackSpec::clean));
        }
        self.attacks.get(id).ok_or_else(|| Error::UnknownAttack {
            name: id.to_string(),
            registered: self.attacks.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    /// Resolves teacher names into descriptors adapted to the given class
    /// count and resolution.
    pub fn teacher_pool(&self, num_classes: usize, resolution: usize) -> Result<Vec<ArchEntry>> {
        self.teachers
            .iter()
            .map(|t| {
                let descriptor = t.descriptor(num_classes, resolution)?;
                Ok(ArchEntry { budget: t.budget(&descriptor)?, descriptor })
            })
            .collect()
    }
}

/// One attack scenario: dataset, attack, teacher and FLOPs budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSetting {
    pub dataset_id: String,
    pub attack_id: String,
    pub teacher: NetworkDescriptor,
    pub budget: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSet {
    pub data_buffer: Vec<String>,
    pub attack_buffer: Vec<String>,
    pub arch_buffer: Vec<ArchEntry>,
    teacher_pool: Vec<ArchEntry>,
}

impl BufferSet {
    pub fn new(data: Vec<String>, attacks: Vec<String>, teacher_pool: Vec<ArchEntry>) -> Result<Self> {
        if teacher_pool.is_empty() {
            return Err(Error::EmptyBuffer("arch"));
        }
        Ok(Self { data_buffer: data, attack_buffer: attacks, arch_buffer: teacher_pool.clone(), teacher_pool })
    }

    /// Restores the architecture buffer to the teacher pool.
    pub fn reinit(&mut self) {
        self.arch_buffer = self.teacher_pool.clone();
    }

    pub fn push_architecture(&mut self, descriptor: NetworkDescriptor, budget: u64) {
        self.arch_buffer.push(ArchEntry { descriptor, budget });
    }

    pub fn teacher_pool(&self) -> &[ArchEntry] {
        &self.teacher_pool
    }

    pub fn sample_dataset(&self, rng: &mut ChaCha8Rng) -> Result<String> {
        pick(&self.data_buffer, "data", rng).cloned()
    }

    pub fn sample_attack(&self, rng: &mut ChaCha8Rng) -> Result<String> {
        pick(&self.attack_buffer, "attack", rng).cloned()
    }

    pub fn sample_arch(&self, rng: &mut ChaCha8Rng) -> Result<ArchEntry> {
        pick(&self.arch_buffer, "arch", rng).cloned()
    }
}

fn pick<'a, T>(items: &'a [T], name: &'static str, rng: &mut ChaCha8Rng) -> Result<&'a T> {
    if items.is_empty() {
        return Err(Error::EmptyBuffer(name));
    }
    Ok(&items[rng.gen_range(0..items.len())])
}

/// Samples dataset, attack and architecture independently and uniformly.
pub fn sample_task(buffers: &BufferSet, rng: &mut ChaCha8Rng) -> Result<TaskSetting> {
    let dataset_id = buffers.sample_dataset(rng)?;
    let attack_id = buffers.sample_attack(rng)?;
    let arch = buffers.sample_arch(rng)?;
    Ok(TaskSetting { dataset_id, attack_id, teacher: arch.descriptor, budget: arch.budget })
}

/// Raw per-instance profiles over the eval set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbeddings {
    pub lips: Vec<f64>,
    /// Inference GFLOPs per instance.
    pub ct: Vec<f64>,
    /// Entries whose perturbation was exactly zero.
    pub degenerate: usize,
}

/// Attack batch size used while profiling.
const PROFILE_CHUNK: usize = 128;

/// `lips_i = ‖f(x̃_i) − f(x_i)‖₁ / ‖x̃_i − x_i‖_∞` on logits, and the
/// teacher's per-instance inference cost.
pub fn task_embeddings(
    model: &dyn Classifier,
    teacher: &NetworkDescriptor,
    eval: &LabeledImages,
    spec: &AttackSpec,
    attacks: &AttackRegistry,
    rng: &mut ChaCha8Rng,
) -> Result<TaskEmbeddings> {
    let n = eval.len();
    let mut lips = Vec::with_capacity(n);
    let mut degenerate = 0;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + PROFILE_CHUNK).min(n)).collect();
        let chunk = eval.select(&idx);
        let clean = model.logits(&chunk.images)?;
        let adv = attacks.perturb(model, &chunk.images, &chunk.labels, spec, Some(&clean), rng)?;
        let perturbed = model.logits(&adv)?;
        for i in 0..idx.len() {
            let den = adv
                .item(i)
                .iter()
                .zip(chunk.images.item(i))
                .fold(0.0f64, |m, (a, x)| m.max((*a as f64 - *x as f64).abs()));
            if den == 0.0 {
                degenerate += 1;
                lips.push(0.0);
                continue;
            }
            let num: f64 = clean.row(i).iter().zip(perturbed.row(i)).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
            lips.push(num / den);
        }
        start += idx.len();
    }
    if lips.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite Lipschitz profile".into()));
    }
    Ok(TaskEmbeddings { lips, ct: ct_profile(teacher, n)?, degenerate })
}

/// Per-instance inference GFLOPs; every instance costs the same forward pass.
pub fn ct_profile(desc: &NetworkDescriptor, n: usize) -> Result<Vec<f64>> {
    let cost = cost_model(desc, desc.input_resolution())?;
    Ok(vec![cost.flops as f64 / GIGA; n])
}

/// Zero mean, unit variance; a constant vector maps to zeros.
pub fn standardize(v: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(v);
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / std).collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes CT on a log scale against the spread of a reference pool, so
/// that a per-instance constant vector still separates teachers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtScale {
    pub log_mean: f64,
    pub log_std: f64,
}

impl CtScale {
    pub fn from_pool(pool: &[ArchEntry]) -> Result<Self> {
        let logs = pool
            .iter()
            .map(|e| Ok((cost_model(&e.descriptor, e.descriptor.input_resolution())?.flops as f64 / GIGA).ln()))
            .collect::<Result<Vec<_>>>()?;
        let (log_mean, log_std) = mean_std(&logs);
        Ok(Self { log_mean, log_std: if log_std > 0.0 { log_std } else { 1.0 } })
    }

    pub fn apply(&self, ct: &[f64]) -> Vec<f64> {
        ct.iter().map(|g| (g.max(1e-12).ln() - self.log_mean) / self.log_std).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ImageBatch, Logits};
    use rand::SeedableRng;

    fn buffers(data: &[&str], attacks: &[&str]) -> BufferSet {
        let pool = TaskRegistry::default().teacher_pool(10, 32).unwrap();
        BufferSet::new(
            data.iter().map(|s| s.to_string()).collect(),
            attacks.iter().map(|s| s.to_string()).collect(),
            pool,
        )
        .unwrap()
    }

    #[test]
    fn singleton_buffers_give_the_unique_task() {
        let mut b = buffers(&["cifar10"], &["pgd20"]);
        b.arch_buffer.truncate(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let t = sample_task(&b, &mut rng).unwrap();
            assert_eq!((t.dataset_id.as_str(), t.attack_id.as_str(), t.budget), ("cifar10", "pgd20", 5_000_000_000));
        }
    }

    #[test]
    fn teacher_analogs() {
        let widths = |name, div| {
            let d = TeacherSpec::analog(name, div, 0.5).descriptor(10, 8).unwrap();
            d.stages().iter().map(|s| (s.depth, s.width)).collect::<Vec<_>>()
        };
        assert_eq!(widths("WRN-16-4", 4), vec![(2, 16), (2, 32), (2, 64)]);
        assert_eq!(widths("WRN-28-10", 16), vec![(4, 12), (4, 20), (4, 40)]);
        assert_eq!(widths("WRN-70-16", 16), vec![(11, 16), (11, 32), (11, 64)]);
        let reg = TaskRegistry { teachers: vec![TeacherSpec::analog("WRN-16-4", 4, 0.5)], ..TaskRegistry::default() };
        let e = &reg.teacher_pool(10, 8).unwrap()[0];
        let full = cost_model(&e.descriptor, 8).unwrap().flops;
        assert_eq!(e.budget, (full as f64 * 0.5).round() as u64);
        let bad = TaskRegistry { teachers: vec![TeacherSpec::analog("WRN-16-4", 4, 0.0)], ..TaskRegistry::default() };
        assert!(bad.teacher_pool(10, 8).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let b = buffers(&["cifar10", "cifar100"], &["fgsm", "pgd20", "cw40"]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_task(&b, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn two_element_buffer_frequency() {
        let b = buffers(&["cifar10", "cifar100"], &["pgd20"]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hits = (0..10_000).filter(|_| sample_task(&b, &mut rng).unwrap().dataset_id == "cifar10").count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{hits}");
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let b = buffers(&[], &["pgd20"]);
        let err = sample_task(&b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::EmptyBuffer("data")));
        assert!(BufferSet::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn push_and_reinit() {
        let mut b = buffers(&["cifar10"], &["pgd20"]);
        let pool = b.arch_buffer.clone();
        assert_eq!(pool.len(), 4);
        for _ in 0..5 {
            let d = b.arch_buffer[0].descriptor.clone();
            b.push_architecture(d, 1);
        }
        assert_eq!(b.arch_buffer.len(), 9);
        assert_eq!(&b.arch_buffer[..4], &pool[..]);
        b.reinit();
        assert_eq!(b.arch_buffer, pool);
    }

    /// `f(x) = flatten(x)`.
    struct Identity;

    impl Classifier for Identity {
        fn num_outputs(&self) -> usize {
            12
        }
        fn logits(&self, x: &ImageBatch) -> Result<Logits> {
            Ok(Logits { n: x.n, k: x.item_len(), data: x.data.clone() })
        }
        fn input_gradient(
            &self,
            x: &ImageBatch,
            upstream: &mut dyn FnMut(&Logits) -> Logits,
        ) -> Result<(Logits, ImageBatch)> {
            let l = self.logits(x)?;
            let g = upstream(&l);
            Ok((l, ImageBatch { data: g.data, ..x.clone() }))
        }
    }

    struct Constant;

    impl Classifier for Constant {
        fn num_outputs(&self) -> usize {
            3
        }
        fn logits(&self, x: &ImageBatch) -> Result<Logits> {
            Ok(Logits { n: x.n, k: 3, data: [0.2, -0.1, 0.4].repeat(x.n) })
        }
        fn input_gradient(&self, x: &ImageBatch, _: &mut dyn FnMut(&Logits) -> Logits) -> Result<(Logits, ImageBatch)> {
            let mut g = ImageBatch::zeros(x.n, x.h, x.w, x.c);
            g.data.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 1.0 } else { -1.0 });
            Ok((self.logits(x)?, g))
        }
    }

    fn eval_set(n: usize) -> LabeledImages {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..n * 12).map(|_| rng.gen_range(0.2..0.8)).collect();
        LabeledImages { images: ImageBatch { n, h: 2, w: 2, c: 3, data }, labels: (0..n).map(|i| i % 12).collect() }
    }

    fn teacher() -> NetworkDescriptor {
        teacher_from_name("WRN-28-10").unwrap()
    }

    #[test]
    fn identity_map_lips_equals_dimension() {
        let eval = eval_set(10);
        let reg = AttackRegistry::new();
        let e = task_embeddings(&Identity, &teacher(), &eval, &AttackSpec::fgsm(0.05), &reg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(e.degenerate, 0);
        for l in &e.lips {
            assert!((l - 12.0).abs() < 1e-3, "{l}");
        }
    }

    #[test]
    fn constant_model_and_zero_radius() {
        let eval = eval_set(6);
        let reg = AttackRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = task_embeddings(&Constant, &teacher(), &eval, &AttackSpec::fgsm(0.05), &reg, &mut rng).unwrap();
        assert!(e.lips.iter().all(|&l| l == 0.0));
        assert_eq!(e.degenerate, 0);
        let z = task_embeddings(&Identity, &teacher(), &eval, &AttackSpec::pgd(0.0, 3), &reg, &mut rng).unwrap();
        assert_eq!(z.degenerate, 6);
        assert!(z.lips.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn ct_matches_teacher_cost() {
        let ct = ct_profile(&teacher(), 256).unwrap();
        assert_eq!(ct.len(), 256);
        assert!(ct.iter().all(|&g| (g / 5.20 - 1.0).abs() < 0.02 && g == ct[0]));
    }

    #[test]
    fn lips_statistics_are_order_invariant() {
        let eval = eval_set(16);
        let reg = AttackRegistry::new();
        let spec = AttackSpec::fgsm(0.05);
        let a = task_embeddings(&Identity, &teacher(), &eval, &spec, &reg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rev: Vec<usize> = (0..16).rev().collect();
        let b = task_embeddings(&Identity, &teacher(), &eval.select(&rev), &spec, &reg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let (ma, sa) = mean_std(&a.lips);
        let (mb, sb) = mean_std(&b.lips);
        assert!((ma - mb).abs() < 1e-9 && (sa - sb).abs() < 1e-9);
        assert!(a.lips.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn standardization() {
        let s = standardize(&[1.0, 2.0, 3.0, 6.0]);
        let (m, sd) = mean_std(&s);
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        assert_eq!(standardize(&[4.0; 3]), vec![0.0; 3]);
        let pool = TaskRegistry::default().teacher_pool(10, 32).unwrap();
        let scale = CtScale::from_pool(&pool).unwrap();
        let first = scale.apply(&ct_profile(&pool[0].descriptor, 2).unwrap())[0];
        let last = scale.apply(&ct_profile(&pool[3].descriptor, 2).unwrap())[0];
        assert!(first < -1.0 && last > 1.0, "{first} {last}");
    }
}
