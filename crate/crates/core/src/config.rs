//! Run configuration: one YAML or JSON document with a section per module.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::data::LoadOptions;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::rl::{Environment, RLConfig};
use crate::task::{default_attacks, TaskRegistry, TeacherSpec};
use crate::theory::TheoryConfig;
use crate::train::ATConfig;

/// The task fine-tuning adapts to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneTarget {
    /// Defaults to the first configured dataset.
    pub dataset: Option<String>,
    /// Defaults to the first configured attack id.
    pub attack: Option<String>,
    /// Index into the teacher list.
    pub teacher: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<String>,
    pub attacks: BTreeMap<String, AttackSpec>,
    pub teachers: Vec<TeacherSpec>,
    /// Per-teacher budget overrides in GFLOPs, keyed by teacher name.
    pub budgets: BTreeMap<String, f64>,
    pub data: LoadOptions,
    pub teacher_training: ATConfig,
    pub reward_training: ATConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub rl: RLConfig,
    pub fine_tune: FineTuneTarget,
    pub theory: TheoryConfig,
    /// Copied into every section's seed by [`RunConfig::resolved`].
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let reg = TaskRegistry::default();
        Self {
            datasets: reg.datasets,
            attacks: default_attacks(),
            teachers: reg.teachers,
            budgets: BTreeMap::new(),
            data: LoadOptions::default(),
            teacher_training: ATConfig::default(),
            reward_training: ATConfig::default(),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            rl: RLConfig::default(),
            fine_tune: FineTuneTarget::default(),
            theory: TheoryConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses YAML or JSON; JSON is detected by a leading `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') { serde_json::from_str(text)? } else { serde_yaml::from_str(text)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.attacks.is_empty() || self.teachers.is_empty() {
            return Err(Error::Config("datasets, attacks and teachers must be non-empty".into()));
        }
        for (id, spec) in &self.attacks {
            spec.validate().map_err(|e| Error::Config(format!("attack {id}: {e}")))?;
        }
        for name in self.budgets.keys() {
            if !self.teachers.iter().any(|t| &t.name == name) {
                return Err(Error::Config(format!("budget given for unknown teacher {name}")));
            }
        }
        self.teacher_training.validate()?;
        self.reward_training.validate()?;
        self.rl.validate()?;
        if self.encoder.d_s != self.policy.d_s {
            return Err(Error::Config(format!("encoder d_s {} differs from policy d_s {}", self.encoder.d_s, self.policy.d_s)));
        }
        if self.encoder.eval_size != self.data.eval_size {
            return Err(Error::Config(format!(
                "encoder eval_size {} differs from data eval_size {}",
                self.encoder.eval_size, self.data.eval_size
            )));
        }
        Ok(())
    }

    /// Applies the top-level seed and the budget overrides.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = c.seed;
        c.data.seed = s;
        c.teacher_training.seed = s;
        c.reward_training.seed = s;
        c.encoder.seed = s;
        c.policy.seed = s;
        c.rl.seed = s;
        for t in &mut c.teachers {
            if let Some(&g) = c.budgets.get(&t.name) {
                t.budget_gflops = g;
                t.budget_fraction = None;
            }
        }
        c
    }

    pub fn registry(&self) -> TaskRegistry {
        TaskRegistry { datasets: self.datasets.clone(), attacks: self.attacks.clone(), teachers: self.teachers.clone() }
    }

    pub fn environment(&self) -> Environment {
        Environment::new(self.registry(), self.data.clone(), self.teacher_training.clone(), self.reward_training.clone())
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }
}

/// The default configuration with a short header, as printed by
/// `config-schema`.
pub fn schema_text() -> Result<String> {
    let header = "\
# rcnas run configuration (YAML; JSON is accepted as well).
# Every key is optional; omitted keys take the values below.
# datasets: cifar10 | cifar100 | cifar10-subset:<n> | synthetic-gauss:<classes>:<n>
# attacks: id -> {kind: clean|fgsm|pgd|cw|external:<name>, radius, steps, step_size, loss, random_start}
# teachers: WRN-<depth>-<k>; width_divisor shrinks widths, budget_fraction sets the budget
#   relative to the teacher's own FLOPs (otherwise budget_gflops is used)
# budgets: teacher name -> GFLOPs override
# seed: copied into data, training, encoder, policy and rl seeds
";
    Ok(format!("{header}{}", RunConfig::default().to_yaml()?))
}
