use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
datasets: [\"synthetic-gauss:2:96\"]
attacks:
  fgsm: {kind: fgsm, radius: 0.03137255}
teachers:
  - {name: WRN-10-1, width_divisor: 2, budget_fraction: 0.5}
data: {eval_size: 16, synthetic_resolution: 8}
teacher_training:
  epochs: 1
  batch_size: 32
  learning_rate: 0.05
  inner_attack: {kind: pgd, radius: 0.03137255, steps: 1, loss: kl}
reward_training:
  epochs: 1
  batch_size: 32
  learning_rate: 0.05
  inner_attack: {kind: pgd, radius: 0.03137255, steps: 1, loss: kl}
encoder: {eval_size: 16, lips_mode: pooled, epochs: 5, d_s: 8, hidden: 4, fusion_hidden: 8}
policy: {d_s: 8, hidden: 8}
rl: {meta_iterations: 1, steps_per_iteration: 1, finetune_iterations: 2}
seed: 3
";

fn rcnas(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcnas")).args(args).env("RCNAS_RUNS_DIR", runs).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn cost_prints_table_scale_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcnas(dir.path(), &["cost", "--arch", "WRN-28-10"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("5.24G") && text.contains("36.4"), "{text}");

    let o = rcnas(dir.path(), &["cost", "--arch", "WRN-16-4", "--resolution", "8", "--width-divisor", "4", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["flops"].as_u64().unwrap() > 0);
    assert_eq!(v["per_stage_flops"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rcnas(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(rcnas(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(rcnas(dir.path(), &["cost"]).status.code(), Some(2));
    assert_eq!(rcnas(dir.path(), &["cost", "--arch", "WRN-11-1"]).status.code(), Some(1));
    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "nonsense: true\n").unwrap();
    assert_eq!(rcnas(dir.path(), &["theory", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn config_schema_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = rcnas(dir.path(), &["config-schema"]);
    assert_eq!(o.status.code(), Some(0));
    let parsed = rcnas::config::RunConfig::parse(&stdout(&o)).unwrap();
    assert_eq!(parsed, rcnas::config::RunConfig::default());
}

#[test]
fn meta_train_run_layout_force_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg = dir.path().join("tiny.yaml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    let o = rcnas(&runs, &["meta-train", "--config", cfg, "--run-id", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = runs.join("a");
    for f in ["manifest.json", "records.jsonl", "encoder.ckpt", "policy.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let records = std::fs::read(run.join("records.jsonl")).unwrap();
    assert_eq!(records.iter().filter(|&&b| b == b'\n').count(), 1);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "meta-train");
    assert_eq!(manifest["seed"], 3);

    // Existing runs are protected unless --force is given; a forced rerun
    // reproduces the records byte for byte.
    assert_eq!(rcnas(&runs, &["meta-train", "--config", cfg, "--run-id", "a"]).status.code(), Some(1));
    assert_eq!(std::fs::read(run.join("records.jsonl")).unwrap(), records);
    assert_eq!(rcnas(&runs, &["meta-train", "--config", cfg, "--run-id", "a", "--force"]).status.code(), Some(0));
    assert_eq!(std::fs::read(run.join("records.jsonl")).unwrap(), records);

    let ft = rcnas(
        &runs,
        &["fine-tune", "--config", cfg, "--run-id", "b", "--encoder", run.join("encoder.ckpt").to_str().unwrap(), "--checkpoint", run.join("policy.ckpt").to_str().unwrap()],
    );
    assert_eq!(ft.status.code(), Some(0), "{}", String::from_utf8_lossy(&ft.stderr));
    let lines = std::fs::read_to_string(runs.join("b/records.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    for out in [&out1, &out2] {
        let o = rcnas(&runs, &["report", "--run", runs.join("b").to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["topology.csv", "stats.csv", "curve.csv"] {
        let a = std::fs::read(out1.join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(out2.join(f)).unwrap(), "{f}");
    }
}
