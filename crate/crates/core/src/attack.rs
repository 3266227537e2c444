//! ℓ∞ adversarial example generation: FGSM, PGD, and the margin-loss (CW)
//! variant of PGD, plus a registry for external attack providers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy, cw_margin, kl_to_target, softmax};
use crate::nn::{Classifier, ImageBatch, Logits};

/// The conventional 8/255 ℓ∞ radius.
pub const DEFAULT_RADIUS: f32 = 8.0 / 255.0;
/// Tolerance on the ball constraint when validating attack outputs.
pub const BALL_TOLERANCE: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Clean,
    Fgsm,
    Pgd,
    Cw,
    External(String),
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::Clean => f.write_str("clean"),
            AttackKind::Fgsm => f.write_str("fgsm"),
            AttackKind::Pgd => f.write_str("pgd"),
            AttackKind::Cw => f.write_str("cw"),
            AttackKind::External(n) => write!(f, "external:{n}"),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            "cw" => Ok(Self::Cw),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(Self::External(name.to_string())),
                _ => Err(Error::Config(format!("unknown attack kind `{other}`"))),
            },
        }
    }
}

impl Serialize for AttackKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AttackKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    /// `max_{j≠y} z_j − z_y`
    CwMargin,
    /// KL from the clean prediction to the perturbed one (TRADES inner problem).
    Kl,
}

/// Attack configuration. Fields irrelevant to the kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttackSpec")]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub radius: f32,
    pub steps: usize,
    pub step_size: f32,
    pub loss: AttackLoss,
    pub random_start: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttackSpec {
    kind: AttackKind,
    radius: Option<f32>,
    steps: Option<usize>,
    step_size: Option<f32>,
    loss: Option<AttackLoss>,
    random_start: Option<bool>,
}

impl TryFrom<RawAttackSpec> for AttackSpec {
    type Error = Error;

    fn try_from(raw: RawAttackSpec) -> Result<Self> {
        let radius = raw.radius.unwrap_or(DEFAULT_RADIUS);
        let mut spec = match raw.kind {
            AttackKind::Clean => AttackSpec::clean(),
            AttackKind::Fgsm => AttackSpec::fgsm(radius),
            AttackKind::Pgd => AttackSpec::pgd(radius, raw.steps.unwrap_or(20)),
            AttackKind::Cw => AttackSpec::cw(radius, raw.steps.unwrap_or(40)),
            AttackKind::External(name) => AttackSpec { kind: AttackKind::External(name), ..AttackSpec::pgd(radius, 20) },
        };
        if let Some(s) = raw.steps {
            spec.steps = s;
        }
        if let Some(a) = raw.step_size {
            spec.step_size = a;
        }
        if let Some(l) = raw.loss {
            spec.loss = l;
        }
        if let Some(r) = raw.random_start {
            spec.random_start = r;
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl AttackSpec {
    pub fn clean() -> Self {
        Self { kind: AttackKind::Clean, radius: 0.0, steps: 1, step_size: 0.0, loss: AttackLoss::CrossEntropy, random_start: false }
    }

    pub fn fgsm(radius: f32) -> Self {
        Self { kind: AttackKind::Fgsm, radius, steps: 1, step_size: radius, loss: AttackLoss::CrossEntropy, random_start: false }
    }

    /// `steps` sign-gradient steps of size `radius / 4` from a random start.
    pub fn pgd(radius: f32, steps: usize) -> Self {
        Self { kind: AttackKind::Pgd, radius, steps, step_size: radius / 4.0, loss: AttackLoss::CrossEntropy, random_start: true }
    }

    /// PGD machinery driven by the margin loss.
    pub fn cw(radius: f32, steps: usize) -> Self {
        Self { loss: AttackLoss::CwMargin, kind: AttackKind::Cw, ..Self::pgd(radius, steps) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("attack radius {} must be finite and >= 0", self.radius)));
        }
        if matches!(self.kind, AttackKind::Pgd | AttackKind::Cw) && self.steps == 0 {
            return Err(Error::Config("iterative attacks need at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub inputs: ImageBatch,
    pub deltas: ImageBatch,
    /// Whether the prediction differs from the model's clean prediction.
    pub success_mask: Vec<bool>,
}

impl AdvBatch {
    /// Checks ball containment, pixel range and delta consistency.
    pub fn validate(&self, clean: &ImageBatch, radius: f32) -> Result<()> {
        if !self.inputs.same_shape(clean) || !self.deltas.same_shape(clean) || self.success_mask.len() != clean.n {
            return Err(Error::InvalidAdversarial { index: 0, reason: "shape differs from the clean batch".into() });
        }
        let l = clean.item_len();
        for i in 0..clean.n {
            let x = clean.item(i);
            let a = self.inputs.item(i);
            let d = self.deltas.item(i);
            for j in 0..l {
                if !(0.0..=1.0).contains(&a[j]) {
                    return Err(Error::InvalidAdversarial { index: i, reason: format!("pixel {} outside [0, 1]", a[j]) });
                }
                if d[j].abs() > radius + BALL_TOLERANCE {
                    return Err(Error::InvalidAdversarial {
                        index: i,
                        reason: format!("|delta| = {} exceeds radius {radius}", d[j].abs()),
                    });
                }
                if (a[j] - x[j] - d[j]).abs() > 1e-5 {
                    return Err(Error::InvalidAdversarial { index: i, reason: "deltas do not match inputs".into() });
                }
            }
        }
        Ok(())
    }
}

fn loss_gradient(
    model: &dyn Classifier,
    x: &ImageBatch,
    labels: &[usize],
    loss: AttackLoss,
    clean_probs: &[f64],
) -> Result<ImageBatch> {
    let mut upstream = |l: &Logits| match loss {
        AttackLoss::CrossEntropy => cross_entropy(l, labels).1,
        AttackLoss::CwMargin => cw_margin(l, labels).1,
        AttackLoss::Kl => kl_to_target(clean_probs, l).1,
    };
    let (_, g) = model.input_gradient(x, &mut upstream)?;
    let l = g.item_len();
    for i in 0..g.n {
        if g.data[i * l..(i + 1) * l].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
    }
    Ok(g)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs a built-in attack. External kinds must go through [`AttackRegistry`].
pub fn attack(
    model: &dyn Classifier,
    x: &ImageBatch,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AdvBatch> {
    let clean_logits = model.logits(x)?;
    let adv = perturb(model, x, labels, spec, Some(&clean_logits), rng)?;
    finish(model, x, adv, &clean_logits.predictions())
}

/// The perturbed inputs of a built-in attack, without the bookkeeping of
/// [`AdvBatch`]. `clean_logits` is only consulted by the KL loss and is
/// computed on demand when absent.
pub fn perturb(
    model: &dyn Classifier,
    x: &ImageBatch,
    labels: &[usize],
    spec: &AttackSpec,
    clean_logits: Option<&Logits>,
    rng: &mut ChaCha8Rng,
) -> Result<ImageBatch> {
    spec.validate()?;
    let eps = spec.radius;
    let target = |model: &dyn Classifier| -> Result<Vec<f64>> {
        if spec.loss != AttackLoss::Kl {
            return Ok(Vec::new());
        }
        match clean_logits {
            Some(l) => Ok(softmax(l)),
            None => Ok(softmax(&model.logits(x)?)),
        }
    };
    Ok(match &spec.kind {
        AttackKind::Clean => x.clone(),
        AttackKind::External(name) => {
            return Err(Error::UnknownAttack { name: name.clone(), registered: String::new() });
        }
        _ if eps == 0.0 => x.clone(),
        AttackKind::Fgsm => {
            let probs = target(model)?;
            let g = loss_gradient(model, x, labels, spec.loss, &probs)?;
            let mut a = x.clone();
            for ((v, gv), x0) in a.data.iter_mut().zip(&g.data).zip(&x.data) {
                *v = project(*x0, *x0 + eps * sign(*gv), eps);
            }
            a
        }
        AttackKind::Pgd | AttackKind::Cw => {
            let probs = target(model)?;
            let mut a = x.clone();
            if spec.random_start {
                for (v, &x0) in a.data.iter_mut().zip(&x.data) {
                    *v = project(x0, x0 + rng.gen_range(-eps..=eps), eps);
                }
            }
            for _ in 0..spec.steps {
                let g = loss_gradient(model, &a, labels, spec.loss, &probs)?;
                for ((v, gv), &x0) in a.data.iter_mut().zip(&g.data).zip(&x.data) {
                    let stepped = *v + spec.step_size * sign(*gv);
                    *v = project(x0, stepped, eps);
                }
            }
            a
        }
    })
}

/// Projects `v` onto the ℓ∞ ball around `x0` intersected with `[0, 1]`,
/// exactly: the result satisfies `|v − x0| ≤ eps` in real arithmetic, not
/// just after f32 rounding.
fn project(x0: f32, v: f32, eps: f32) -> f32 {
    let mut v = v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    while (v as f64 - x0 as f64).abs() > eps as f64 {
        v = if v > x0 {
            f32::from_bits(v.to_bits() - 1)
        } else if v == 0.0 {
            f32::from_bits(1)
        } else {
            f32::from_bits(v.to_bits() + 1)
        };
    }
    v
}

fn finish(model: &dyn Classifier, x: &ImageBatch, adv: ImageBatch, clean_pred: &[usize]) -> Result<AdvBatch> {
    let mut deltas = adv.clone();
    for (d, &x0) in deltas.data.iter_mut().zip(&x.data) {
        *d -= x0;
    }
    let adv_pred = if adv == *x { clean_pred.to_vec() } else { model.logits(&adv)?.predictions() };
    let success_mask = adv_pred.iter().zip(clean_pred).map(|(a, c)| a != c).collect();
    Ok(AdvBatch { inputs: adv, deltas, success_mask })
}

/// In-process hook for attacks not implemented natively.
pub trait AttackProvider: Send + Sync {
    fn run(&self, model: &dyn Classifier, x: &ImageBatch, labels: &[usize], spec: &AttackSpec) -> Result<AdvBatch>;
}

impl<F> AttackProvider for F
where
    F: Fn(&dyn Classifier, &ImageBatch, &[usize], &AttackSpec) -> Result<AdvBatch> + Send + Sync,
{
    fn run(&self, model: &dyn Classifier, x: &ImageBatch, labels: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
        self(model, x, labels, spec)
    }
}

/// Built-in attacks plus named external providers.
#[derive(Default)]
pub struct AttackRegistry {
    providers: BTreeMap<String, Box<dyn AttackProvider>>,
}

impl AttackRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_external(&mut self, name: impl Into<String>, provider: impl AttackProvider + 'static) {
        self.providers.insert(name.into(), Box::new(provider));
    }

    pub fn registered(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }

    /// Dispatches to a built-in attack or a registered provider; provider
    /// output is validated against the ball and pixel-range invariants.
    pub fn run(
        &self,
        model: &dyn Classifier,
        x: &ImageBatch,
        labels: &[usize],
        spec: &AttackSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<AdvBatch> {
        match &spec.kind {
            AttackKind::External(name) => {
                let provider = self.providers.get(name).ok_or_else(|| Error::UnknownAttack {
                    name: name.clone(),
                    registered: self.registered().join(", "),
                })?;
                let out = provider.run(model, x, labels, spec)?;
                out.validate(x, spec.radius)?;
                Ok(out)
            }
            _ => attack(model, x, labels, spec, rng),
        }
    }

    /// Perturbed inputs only; external output is validated as in [`run`](Self::run).
    pub fn perturb(
        &self,
        model: &dyn Classifier,
        x: &ImageBatch,
        labels: &[usize],
        spec: &AttackSpec,
        clean_logits: Option<&Logits>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ImageBatch> {
        match &spec.kind {
            AttackKind::External(_) => self.run(model, x, labels, spec, rng).map(|a| a.inputs),
            _ => perturb(model, x, labels, spec, clean_logits, rng),
        }
    }
}
