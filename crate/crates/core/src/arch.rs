//! Staged residual-network descriptors, compression actions and the analytic
//! cost model.
//!
//! A [`NetworkDescriptor`] is the object the agent compresses: a stem
//! convolution, a sequence of stages of pre-activation residual blocks, and a
//! linear head. FLOPs are counted as multiply-accumulates (one MAC = one FLOP).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Colour channels of every input image.
pub const INPUT_CHANNELS: u64 = 3;
/// Smallest width a compressed stage may have.
pub const MIN_WIDTH: u32 = 8;
/// Widths produced by [`apply_action`] are multiples of this.
pub const WIDTH_QUANTUM: u32 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageDescriptor {
    pub depth: u32,
    pub width: u32,
    pub downsample: bool,
    pub robust_block: bool,
}

/// Immutable staged architecture description.
///
/// Fields are private so that every instance has passed validation; the JSON
/// form uses the canonical key order `stages, stem_width, num_classes,
/// input_resolution`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor")]
pub struct NetworkDescriptor {
    stages: Vec<StageDescriptor>,
    stem_width: u32,
    num_classes: u32,
    input_resolution: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    stages: Vec<StageDescriptor>,
    stem_width: u32,
    num_classes: u32,
    input_resolution: u32,
}

impl TryFrom<RawDescriptor> for NetworkDescriptor {
    type Error = Error;

    fn try_from(raw: RawDescriptor) -> Result<Self> {
        NetworkDescriptor::new(raw.stages, raw.stem_width, raw.num_classes, raw.input_resolution)
    }
}

impl NetworkDescriptor {
    pub fn new(
        stages: Vec<StageDescriptor>,
        stem_width: u32,
        num_classes: u32,
        input_resolution: u32,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArchitecture("at least one stage is required".into()));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.depth < 1 {
                return Err(Error::InvalidArchitecture(format!("stage {i} has depth 0")));
            }
            if s.width < MIN_WIDTH {
                return Err(Error::InvalidArchitecture(format!(
                    "stage {i} width {} is below the minimum of {MIN_WIDTH}",
                    s.width
                )));
            }
        }
        if stages[0].downsample {
            return Err(Error::InvalidArchitecture("the first stage may not downsample".into()));
        }
        if stem_width == 0 || num_classes == 0 || input_resolution == 0 {
            return Err(Error::InvalidArchitecture(
                "stem width, class count and resolution must be positive".into(),
            ));
        }
        Ok(Self { stages, stem_width, num_classes, input_resolution })
    }

    pub fn stages(&self) -> &[StageDescriptor] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stem_width(&self) -> u32 {
        self.stem_width
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn input_resolution(&self) -> u32 {
        self.input_resolution
    }

    /// Same topology with a different classifier size and input resolution.
    pub fn with_io(&self, num_classes: u32, input_resolution: u32) -> Result<Self> {
        Self::new(self.stages.clone(), self.stem_width, num_classes, input_resolution)
    }

    pub fn total_depth(&self) -> u32 {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn total_width(&self) -> u32 {
        self.stages.iter().map(|s| s.width).sum()
    }

    /// Spatial side length seen by each stage's output at `resolution`.
    ///
    /// A stride-2 stage halves the map with ceiling division; downsampling a
    /// map that is already 1×1 is rejected.
    pub fn spatial_sizes(&self, resolution: u32) -> Result<Vec<u32>> {
        let mut side = resolution;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.downsample {
                if side < 2 {
                    return Err(Error::InvalidArchitecture(format!(
                        "stage {i} downsamples a {side}x{side} feature map"
                    )));
                }
                side = side.div_ceil(2);
            }
            out.push(side);
        }
        Ok(out)
    }

    /// Canonical JSON text (compact, canonical key order, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("descriptor serialization is infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Short form of [`content_hash`](Self::content_hash) used in logs.
    pub fn fingerprint(&self) -> String {
        self.content_hash()[..16].to_string()
    }
}

/// Builds the wide residual network `WRN-d-k`: three stages of `(d-4)/6`
/// blocks with widths `(16k, 32k, 64k)`, for 10 classes at 32×32.
pub fn teacher_from_name(name: &str) -> Result<NetworkDescriptor> {
    let reject = |reason: &str| Error::UnknownTeacher { name: name.to_string(), reason: reason.to_string() };
    let mut parts = name.trim().split('-');
    let prefix = parts.next().unwrap_or_default();
    if !prefix.eq_ignore_ascii_case("wrn") {
        return Err(reject("expected the form WRN-<depth>-<widen factor>"));
    }
    let depth: u32 = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| reject("depth is not a positive integer"))?;
    let widen: u32 = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| reject("widen factor is not a positive integer"))?;
    if parts.next().is_some() {
        return Err(reject("trailing components after the widen factor"));
    }
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(reject("depth must satisfy depth = 6n + 4 with n >= 1"));
    }
    if widen == 0 {
        return Err(reject("widen factor must be at least 1"));
    }
    let blocks = (depth - 4) / 6;
    let stages = [16 * widen, 32 * widen, 64 * widen]
        .into_iter()
        .enumerate()
        .map(|(i, width)| StageDescriptor { depth: blocks, width, downsample: i > 0, robust_block: false })
        .collect();
    NetworkDescriptor::new(stages, 16, 10, 32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAction {
    pub width_keep: f64,
    pub depth_keep: f64,
    pub downsample: bool,
    pub robust_block: bool,
}

/// Per-stage compression decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionAction {
    pub per_stage: Vec<StageAction>,
}

impl CompressionAction {
    /// Keeps everything and copies the flags of `desc`.
    pub fn identity(desc: &NetworkDescriptor) -> Self {
        let per_stage = desc
            .stages()
            .iter()
            .map(|s| StageAction { width_keep: 1.0, depth_keep: 1.0, downsample: s.downsample, robust_block: s.robust_block })
            .collect();
        Self { per_stage }
    }

    /// The same keep fractions for every stage, flags copied from `desc`.
    pub fn uniform(desc: &NetworkDescriptor, width_keep: f64, depth_keep: f64) -> Self {
        let mut a = Self::identity(desc);
        for s in &mut a.per_stage {
            s.width_keep = width_keep;
            s.depth_keep = depth_keep;
        }
        a
    }
}

fn round_to_quantum(x: f64) -> u32 {
    let q = WIDTH_QUANTUM as f64;
    ((x / q).round() * q) as u32
}

/// Applies `action` to `teacher`, producing a new descriptor.
pub fn apply_action(teacher: &NetworkDescriptor, action: &CompressionAction) -> Result<NetworkDescriptor> {
    if action.per_stage.len() != teacher.num_stages() {
        return Err(Error::InvalidAction(format!(
            "action has {} stages, teacher has {}",
            action.per_stage.len(),
            teacher.num_stages()
        )));
    }
    let valid = |k: f64| k.is_finite() && k > 0.0 && k <= 1.0;
    let mut stages = Vec::with_capacity(teacher.num_stages());
    for (i, (s, a)) in teacher.stages().iter().zip(&action.per_stage).enumerate() {
        if !valid(a.width_keep) || !valid(a.depth_keep) {
            return Err(Error::InvalidAction(format!(
                "stage {i} keep fractions ({}, {}) must lie in (0, 1]",
                a.width_keep, a.depth_keep
            )));
        }
        let depth = ((a.depth_keep * s.depth as f64).round() as u32).max(1);
        let width = round_to_quantum(a.width_keep * s.width as f64).max(MIN_WIDTH);
        stages.push(StageDescriptor { depth, width, downsample: a.downsample && i > 0, robust_block: a.robust_block });
    }
    NetworkDescriptor::new(stages, teacher.stem_width(), teacher.num_classes(), teacher.input_resolution())
}

/// Analytic parameter and MAC counts of a descriptor at one input resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub stem_flops: u64,
    pub head_flops: u64,
    pub per_stage_flops: Vec<u64>,
    pub per_stage_params: Vec<u64>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

/// Closed-form cost of `desc` evaluated at `resolution` pixels per side.
///
/// Convolutions cost `H_out·W_out·C_in·C_out·k²` MACs; a 1×1 projection
/// shortcut is present whenever a block changes width or stride; the linear
/// head is included. Batch-norm affine terms and the head bias count as
/// parameters but not as MACs.
pub fn cost_model(desc: &NetworkDescriptor, resolution: u32) -> Result<CostReport> {
    if resolution < 8 {
        return Err(Error::InvalidArchitecture(format!("resolution {resolution} is below 8")));
    }
    let sides = desc.spatial_sizes(resolution)?;
    let r = resolution as u64;
    let stem = desc.stem_width() as u64;
    let stem_flops = r * r * INPUT_CHANNELS * stem * 9;
    let mut params = INPUT_CHANNELS * stem * 9;

    let mut per_stage_flops = Vec::with_capacity(desc.num_stages());
    let mut per_stage_params = Vec::with_capacity(desc.num_stages());
    let mut in_c = stem;
    for (s, &side) in desc.stages().iter().zip(&sides) {
        let out_c = s.width as u64;
        let area = side as u64 * side as u64;
        let d = s.depth as u64;
        // opening block: input-width conv, output-width conv, optional projection
        let mut flops = area * in_c * out_c * 9 + area * out_c * out_c * 9;
        let mut p = 2 * in_c + in_c * out_c * 9 + 2 * out_c + out_c * out_c * 9;
        if in_c != out_c || s.downsample {
            flops += area * in_c * out_c;
            p += in_c * out_c;
        }
        flops += (d - 1) * 2 * area * out_c * out_c * 9;
        p += (d - 1) * (4 * out_c + 2 * out_c * out_c * 9);
        per_stage_flops.push(flops);
        per_stage_params.push(p);
        params += p;
        in_c = out_c;
    }
    let classes = desc.num_classes() as u64;
    let head_flops = in_c * classes;
    params += 2 * in_c + in_c * classes + classes;
    let flops = stem_flops + per_stage_flops.iter().sum::<u64>() + head_flops;
    Ok(CostReport { params, flops, stem_flops, head_flops, per_stage_flops, per_stage_params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn widths(d: &NetworkDescriptor) -> Vec<u32> {
        d.stages().iter().map(|s| s.width).collect()
    }

    fn depths(d: &NetworkDescriptor) -> Vec<u32> {
        d.stages().iter().map(|s| s.depth).collect()
    }

    #[test]
    fn wrn_names() {
        let t = teacher_from_name("WRN-28-10").unwrap();
        assert_eq!(depths(&t), vec![4, 4, 4]);
        assert_eq!(widths(&t), vec![160, 320, 640]);
        let t = teacher_from_name("WRN-70-16").unwrap();
        assert_eq!(depths(&t), vec![11, 11, 11]);
        assert_eq!(widths(&t), vec![256, 512, 1024]);
        let t = teacher_from_name("WRN-16-1").unwrap();
        assert_eq!(depths(&t), vec![2, 2, 2]);
        assert_eq!(widths(&t), vec![16, 32, 64]);
        let flags: Vec<_> = t.stages().iter().map(|s| (s.downsample, s.robust_block)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (true, false)]);
    }

    #[test]
    fn malformed_names_rejected() {
        for bad in ["WRN-27-10", "WRN-28", "ResNet-28-10", "WRN-28-0", "WRN-4-1", "WRN-28-10-2", "WRN-x-2"] {
            assert!(teacher_from_name(bad).is_err(), "{bad} accepted");
        }
    }

    #[test]
    fn identity_action_is_identity() {
        let t = teacher_from_name("WRN-28-10").unwrap();
        let out = apply_action(&t, &CompressionAction::identity(&t)).unwrap();
        assert_eq!(out, t);
        assert_eq!(cost_model(&out, 32).unwrap(), cost_model(&t, 32).unwrap());
    }

    #[test]
    fn half_action_on_wrn_28_10() {
        let t = teacher_from_name("WRN-28-10").unwrap();
        let out = apply_action(&t, &CompressionAction::uniform(&t, 0.5, 0.5)).unwrap();
        assert_eq!(depths(&out), vec![2, 2, 2]);
        assert_eq!(widths(&out), vec![80, 160, 320]);
    }

    #[test]
    fn depth_and_width_floors() {
        let t = teacher_from_name("WRN-28-10").unwrap();
        let out = apply_action(&t, &CompressionAction::uniform(&t, 0.001, 0.01)).unwrap();
        assert_eq!(depths(&out), vec![1, 1, 1]);
        assert_eq!(widths(&out), vec![8, 8, 8]);
    }

    #[test]
    fn stage_one_downsample_forced_off() {
        let t = teacher_from_name("WRN-16-1").unwrap();
        let mut a = CompressionAction::identity(&t);
        a.per_stage[0].downsample = true;
        a.per_stage[1].robust_block = true;
        let out = apply_action(&t, &a).unwrap();
        assert!(!out.stages()[0].downsample);
        assert!(out.stages()[1].robust_block);
    }

    #[test]
    fn bad_actions_rejected() {
        let t = teacher_from_name("WRN-16-1").unwrap();
        for k in [0.0, -0.1, 1.01, f64::NAN] {
            let a = CompressionAction::uniform(&t, k, 1.0);
            assert!(apply_action(&t, &a).is_err());
            let a = CompressionAction::uniform(&t, 1.0, k);
            assert!(apply_action(&t, &a).is_err());
        }
        let mut a = CompressionAction::identity(&t);
        a.per_stage.pop();
        assert!(apply_action(&t, &a).is_err());
    }

    #[test]
    fn descriptor_validation() {
        let s = |depth, width, downsample| StageDescriptor { depth, width, downsample, robust_block: false };
        assert!(NetworkDescriptor::new(vec![], 16, 10, 32).is_err());
        assert!(NetworkDescriptor::new(vec![s(0, 16, false)], 16, 10, 32).is_err());
        assert!(NetworkDescriptor::new(vec![s(1, 4, false)], 16, 10, 32).is_err());
        assert!(NetworkDescriptor::new(vec![s(1, 16, true)], 16, 10, 32).is_err());
        assert!(NetworkDescriptor::new(vec![s(1, 16, false), s(1, 8, true)], 16, 10, 32).is_ok());
    }

    #[test]
    fn json_is_canonical() {
        let t = teacher_from_name("WRN-16-1").unwrap();
        let text = t.to_json();
        assert!(text.starts_with(
            r#"{"stages":[{"depth":2,"width":16,"downsample":false,"robust_block":false},"#
        ));
        assert!(text.ends_with("\"stem_width\":16,\"num_classes\":10,\"input_resolution\":32}\n"));
        let back = NetworkDescriptor::from_json(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json(), text);
        // validation also runs on load
        let bad = text.replace(r#""width":16,"downsample":false"#, r#""width":4,"downsample":false"#);
        assert!(NetworkDescriptor::from_json(&bad).is_err());
    }

    #[test]
    fn wrn_16_1_cost_by_hand() {
        // stem 3->16, stage widths 16/32/64 with two blocks each, 10 classes
        let t = teacher_from_name("WRN-16-1").unwrap();
        let c = cost_model(&t, 32).unwrap();
        assert_eq!(c.stem_flops, 32 * 32 * 3 * 16 * 9);
        assert_eq!(c.per_stage_flops[0], 4 * 32 * 32 * 16 * 16 * 9);
        let s2 = 16 * 16 * (16 * 32 * 9 + 32 * 32 * 9 + 16 * 32) + 2 * 16 * 16 * 32 * 32 * 9;
        assert_eq!(c.per_stage_flops[1], s2);
        assert_eq!(c.head_flops, 640);
    }

    #[test]
    fn doubling_width_quadruples_interior_macs() {
        // the cost of one extra interior block is the depth-d minus depth-(d-1) difference
        let extra_block = |name: &str| {
            let t = teacher_from_name(name).unwrap();
            let mut shallower = t.stages().to_vec();
            for s in &mut shallower {
                s.depth -= 1;
            }
            let t1 = NetworkDescriptor::new(shallower, t.stem_width(), t.num_classes(), 32).unwrap();
            cost_model(&t, 32).unwrap().flops - cost_model(&t1, 32).unwrap().flops
        };
        assert_eq!(extra_block("WRN-28-2"), 4 * extra_block("WRN-28-1"));
    }

    #[test]
    fn low_resolution_rejected() {
        let t = teacher_from_name("WRN-16-1").unwrap();
        assert!(cost_model(&t, 4).is_err());
    }
}
