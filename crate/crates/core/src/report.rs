//! CSV reports derived from a run's `records.jsonl`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::arch::{cost_model, NetworkDescriptor};
use crate::error::Result;
use crate::rl::{read_records, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopologyRow {
    pub stage: usize,
    pub depth: u32,
    pub width: u32,
    pub teacher_depth: u32,
    pub teacher_width: u32,
    /// Student stage FLOPs over teacher stage FLOPs.
    pub remaining_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsRow {
    /// `stage<i>` or `total`.
    pub scope: String,
    pub depth_ratio: f64,
    pub width_ratio: f64,
    /// Means over every successful step.
    pub mean_depth_ratio: f64,
    pub mean_width_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub step: usize,
    pub reward: Option<f64>,
    pub acc_rl: Option<f64>,
}

/// The highest-reward successful record; the earliest wins ties.
pub fn selected(records: &[StepRecord]) -> Option<&StepRecord> {
    records
        .iter()
        .filter(|r| !r.skipped && r.student.is_some())
        .fold(None, |best: Option<&StepRecord>, r| match best {
            Some(b) if b.reward >= r.reward => Some(b),
            _ => Some(r),
        })
}

pub fn topology(rec: &StepRecord) -> Result<Vec<TopologyRow>> {
    let student = rec.student.as_ref().expect("selected records carry a student");
    let res = rec.teacher.input_resolution();
    let (s, t) = (cost_model(student, res)?, cost_model(&rec.teacher, res)?);
    Ok(student
        .stages()
        .iter()
        .zip(rec.teacher.stages())
        .enumerate()
        .map(|(i, (a, b))| TopologyRow {
            stage: i,
            depth: a.depth,
            width: a.width,
            teacher_depth: b.depth,
            teacher_width: b.width,
            remaining_pct: s.per_stage_flops[i] as f64 / t.per_stage_flops[i] as f64,
        })
        .collect())
}

fn ratios(student: &NetworkDescriptor, teacher: &NetworkDescriptor) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = student
        .stages()
        .iter()
        .zip(teacher.stages())
        .map(|(a, b)| (a.depth as f64 / b.depth as f64, a.width as f64 / b.width as f64))
        .collect();
    out.push((
        student.total_depth() as f64 / teacher.total_depth() as f64,
        student.total_width() as f64 / teacher.total_width() as f64,
    ));
    out
}

pub fn stats(records: &[StepRecord]) -> Vec<StatsRow> {
    let Some(sel) = selected(records) else { return Vec::new() };
    let chosen = ratios(sel.student.as_ref().expect("student"), &sel.teacher);
    let all: Vec<Vec<(f64, f64)>> = records
        .iter()
        .filter(|r| !r.skipped)
        .filter_map(|r| r.student.as_ref().map(|s| ratios(s, &r.teacher)))
        .filter(|v| v.len() == chosen.len())
        .collect();
    let n = all.len().max(1) as f64;
    chosen
        .iter()
        .enumerate()
        .map(|(i, &(d, w))| StatsRow {
            scope: if i + 1 == chosen.len() { "total".into() } else { format!("stage{i}") },
            depth_ratio: d,
            width_ratio: w,
            mean_depth_ratio: all.iter().map(|v| v[i].0).sum::<f64>() / n,
            mean_width_ratio: all.iter().map(|v| v[i].1).sum::<f64>() / n,
        })
        .collect()
}

pub fn curve(records: &[StepRecord]) -> Vec<CurveRow> {
    records.iter().map(|r| CurveRow { iteration: r.iter, step: r.step, reward: r.reward, acc_rl: r.acc_rl }).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `topology.csv`, `stats.csv` and `curve.csv` into `out_dir` and
/// returns their paths.
pub fn report(records_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_records(records_path)?;
    std::fs::create_dir_all(out_dir)?;
    let topo = match selected(&records) {
        Some(r) => topology(r)?,
        None => Vec::new(),
    };
    let paths: Vec<PathBuf> = ["topology.csv", "stats.csv", "curve.csv"].iter().map(|f| out_dir.join(f)).collect();
    write_csv(&paths[0], &topo, &["stage", "depth", "width", "teacher_depth", "teacher_width", "remaining_pct"])?;
    write_csv(&paths[1], &stats(&records), &["scope", "depth_ratio", "width_ratio", "mean_depth_ratio", "mean_width_ratio"])?;
    write_csv(&paths[2], &curve(&records), &["iteration", "step", "reward", "acc_rl"])?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{apply_action, teacher_from_name, CompressionAction};
    use crate::rl::{CDefinition, TaskRecord};

    fn record(iter: usize, keep: f64, reward: Option<f64>) -> StepRecord {
        let teacher = teacher_from_name("WRN-16-4").unwrap().with_io(10, 8).unwrap();
        let student = apply_action(&teacher, &CompressionAction::uniform(&teacher, keep, keep)).unwrap();
        StepRecord {
            iter,
            step: 1,
            task: TaskRecord { dataset: "d".into(), attack: "a".into(), teacher_hash: "t".into(), budget: 1, task_hash: "h".into() },
            action: None,
            costs: None,
            c: None,
            eps: 0.0,
            acc_rl: reward.map(|_| 0.5),
            acc_teacher: None,
            reward,
            skipped: reward.is_none(),
            within_budget: None,
            c_definition: CDefinition::Removed,
            teacher,
            student: reward.map(|_| student),
            error: None,
        }
    }

    #[test]
    fn selection_prefers_reward_then_earliest() {
        let recs = vec![record(1, 0.5, Some(0.2)), record(2, 0.75, Some(0.9)), record(3, 0.25, Some(0.9)), record(4, 1.0, None)];
        assert_eq!(selected(&recs).unwrap().iter, 2);
        assert!(selected(&recs[3..]).is_none());
    }

    #[test]
    fn topology_and_stats_of_identity_and_halved_students() {
        let full = record(1, 1.0, Some(1.0));
        assert!(topology(&full).unwrap().iter().all(|r| r.remaining_pct == 1.0));

        let half = record(1, 0.5, Some(1.0));
        let rows = topology(&half).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!((r.teacher_depth, r.depth), (2, 1));
            assert_eq!(r.width * 2, r.teacher_width);
            assert!(r.remaining_pct < 0.5);
        }
        let s = stats(&[half.clone(), full]);
        assert_eq!(s.last().unwrap().scope, "total");
        assert_eq!(s[0].depth_ratio, 0.5);
        assert_eq!(s[0].mean_depth_ratio, 0.75);
    }

    #[test]
    fn csvs_are_a_function_of_the_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let recs = [record(1, 0.5, Some(0.3)), record(2, 0.75, None), record(3, 0.75, Some(0.6))];
        let text: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        std::fs::write(&path, text).unwrap();
        let a: Vec<Vec<u8>> = report(&path, &dir.path().join("a")).unwrap().iter().map(|p| std::fs::read(p).unwrap()).collect();
        let b: Vec<Vec<u8>> = report(&path, &dir.path().join("b")).unwrap().iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(a, b);
        let curve = String::from_utf8(a[2].clone()).unwrap();
        assert_eq!(curve.lines().count(), 4);
        assert!(curve.lines().nth(2).unwrap().ends_with(",,"));
    }
}
