//! Command-line driver. Exit codes: 0 success, 1 failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arch::{cost_model, NetworkDescriptor};
use crate::config::{schema_text, RunConfig};
use crate::encoder::StateEncoder;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rl::{fine_tune, meta_train, pretraining_corpus, Environment, RunLog};
use crate::task::TeacherSpec;
use crate::theory::{median, run_theory, write_reports};
use crate::train::{CacheInputs, ModelCache};

/// Environment variable naming the directory runs are created in.
pub const RUNS_DIR_ENV: &str = "RCNAS_RUNS_DIR";

#[derive(Parser, Debug)]
#[command(name = "rcnas", version, about = "Compressive architecture search for adversarially robust networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct RunArgs {
    /// YAML or JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory name under the runs root.
    #[arg(long)]
    run_id: Option<String>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train and freeze the state encoder.
    PretrainEncoder {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Meta-train the policy across sampled tasks.
    MetaTrain {
        #[command(flatten)]
        run: RunArgs,
        /// Frozen encoder checkpoint; pre-trained inside the run when omitted.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Fine-tune a policy on the configured target task.
    FineTune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Meta-trained policy; a fresh policy is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adversarially train one architecture and report clean/robust accuracy.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Teacher name (WRN-d-k) or a descriptor JSON file.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        attack: Option<String>,
        #[arg(long, default_value_t = 1)]
        width_divisor: u32,
    },
    /// Print parameter and FLOP counts.
    Cost {
        /// Teacher name (WRN-d-k) or a descriptor JSON file.
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 32)]
        resolution: u32,
        #[arg(long, default_value_t = 10)]
        classes: u32,
        #[arg(long, default_value_t = 1)]
        width_divisor: u32,
        #[arg(long)]
        json: bool,
    },
    /// Run the sparse-coding sandbox.
    Theory {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write topology, stats and curve CSVs for a run.
    Report {
        /// Run directory containing records.jsonl.
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    ConfigSchema,
}

/// Written once when a run directory is created.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    pub registry_versions: RegistryVersions,
    pub seed: u64,
    pub created: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryVersions {
    pub crate_version: String,
    pub teachers: Vec<String>,
    pub attacks: Vec<String>,
    pub datasets: Vec<String>,
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolved())
}

/// Creates `<runs root>/<id>` and writes its manifest.
/// An existing directory is only replaced when `force` is set.
pub fn create_run(command: &str, run_id: Option<&str>, force: bool, cfg: &RunConfig) -> Result<PathBuf> {
    let now = chrono::Utc::now();
    let id = run_id.map(str::to_string).unwrap_or_else(|| format!("{command}-{}", now.format("%Y%m%d-%H%M%S")));
    let dir = runs_root().join(&id);
    if dir.exists() {
        if !force {
            return Err(Error::RunExists(dir));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let manifest = RunManifest {
        run_id: id,
        command: command.to_string(),
        config: cfg.clone(),
        registry_versions: RegistryVersions {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            teachers: cfg.teachers.iter().map(|t| t.name.clone()).collect(),
            attacks: cfg.attacks.keys().cloned().collect(),
            datasets: cfg.datasets.clone(),
        },
        seed: cfg.seed,
        created: now.to_rfc3339(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(dir)
}

fn resolve_arch(arch: &str, classes: u32, resolution: u32, width_divisor: u32) -> Result<NetworkDescriptor> {
    let p = Path::new(arch);
    if p.extension().is_some_and(|e| e == "json") && p.exists() {
        return NetworkDescriptor::from_json(&std::fs::read_to_string(p)?);
    }
    TeacherSpec { width_divisor, ..TeacherSpec::new(arch, 1.0) }.descriptor(classes as usize, resolution as usize)
}

fn pretrain(env: &mut Environment, cfg: &RunConfig, dir: &Path) -> Result<StateEncoder> {
    let corpus = pretraining_corpus(env, &cfg.encoder)?;
    let mut enc = StateEncoder::new(&cfg.encoder)?;
    let report = enc.pretrain(&corpus)?;
    enc.save(&dir.join("encoder.ckpt"))?;
    std::fs::write(dir.join("pretrain.json"), serde_json::to_vec_pretty(&report)?)?;
    println!(
        "encoder pre-trained on {} samples: loss {:.6} -> {:.6}; hash {}",
        corpus.len(),
        report.initial_loss,
        report.final_loss,
        enc.param_hash()
    );
    Ok(enc)
}

fn encoder_for(env: &mut Environment, cfg: &RunConfig, path: Option<&Path>, dir: &Path) -> Result<StateEncoder> {
    match path {
        Some(p) => {
            let enc = StateEncoder::load_compatible(p, cfg.policy.d_s, cfg.data.eval_size)?;
            if !enc.is_frozen() {
                return Err(Error::Checkpoint(format!("{} holds an encoder that was never frozen", p.display())));
            }
            Ok(enc)
        }
        None => pretrain(env, cfg, dir),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::ConfigSchema => print!("{}", schema_text()?),
        Command::Cost { arch, resolution, classes, width_divisor, json } => {
            let d = resolve_arch(&arch, classes, resolution, width_divisor)?;
            let c = cost_model(&d, resolution)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                let flops = if c.gflops() >= 0.1 { format!("{:.2}G", c.gflops()) } else { format!("{:.2}M", c.flops as f64 / 1e6) };
                println!("{arch} @ {resolution}x{resolution}: params {:.2}M, flops {flops}", c.mparams());
            }
        }
        Command::PretrainEncoder { run } => {
            let cfg = load_config(run.config.as_deref())?;
            let dir = create_run("pretrain-encoder", run.run_id.as_deref(), run.force, &cfg)?;
            let mut env = cfg.environment();
            pretrain(&mut env, &cfg, &dir)?;
        }
        Command::MetaTrain { run, encoder } => {
            let cfg = load_config(run.config.as_deref())?;
            let dir = create_run("meta-train", run.run_id.as_deref(), run.force, &cfg)?;
            let mut env = cfg.environment();
            let enc = encoder_for(&mut env, &cfg, encoder.as_deref(), &dir)?;
            let mut policy = Policy::new(&cfg.policy)?;
            let mut log = RunLog::to_file(&dir.join("records.jsonl"))?;
            let summary = meta_train(&cfg.rl, &mut env, &enc, &mut policy, &mut log)?;
            policy.save(&dir.join("policy.ckpt"))?;
            std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
            println!("meta-training: {} steps, {} skipped; run {}", summary.steps, summary.skipped, dir.display());
        }
        Command::FineTune { run, encoder, checkpoint } => {
            let cfg = load_config(run.config.as_deref())?;
            let dir = create_run("fine-tune", run.run_id.as_deref(), run.force, &cfg)?;
            let mut env = cfg.environment();
            let enc = encoder_for(&mut env, &cfg, encoder.as_deref(), &dir)?;
            let mut policy = match &checkpoint {
                Some(p) => Policy::load(p)?,
                None => Policy::new(&cfg.policy)?,
            };
            let pool = env.teacher_pool()?;
            let entry = pool
                .get(cfg.fine_tune.teacher)
                .ok_or_else(|| Error::Config(format!("fine_tune.teacher {} is out of range", cfg.fine_tune.teacher)))?;
            let dataset = cfg.fine_tune.dataset.clone().unwrap_or_else(|| cfg.datasets[0].clone());
            let attack = cfg.fine_tune.attack.clone().unwrap_or_else(|| cfg.attacks.keys().next().cloned().unwrap_or_default());
            let target = env.task(&dataset, &attack, entry)?;
            let mut log = RunLog::to_file(&dir.join("records.jsonl"))?;
            let summary = fine_tune(&cfg.rl, &mut env, &enc, &mut policy, &target, &mut log)?;
            policy.save(&dir.join("policy.ckpt"))?;
            std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
            if let Some((best, reward)) = &summary.best {
                std::fs::write(dir.join("best.json"), best.to_json())?;
                println!("fine-tuning: best reward {reward:.4}; run {}", dir.display());
            } else {
                println!("fine-tuning: every step was skipped; run {}", dir.display());
            }
        }
        Command::Evaluate { config, arch, dataset, attack, width_divisor } => {
            let cfg = load_config(config.as_deref())?;
            let mut env = cfg.environment();
            let dataset = dataset.unwrap_or_else(|| cfg.datasets[0].clone());
            let attack = attack.unwrap_or_else(|| cfg.attacks.keys().next().cloned().unwrap_or_default());
            let spec = env.registry.attack(&attack)?.clone();
            let splits = env.dataset(&dataset)?.clone();
            let desc = resolve_arch(&arch, splits.meta.num_classes as u32, splits.meta.resolution as u32, width_divisor)?;
            let inputs = CacheInputs {
                descriptor: desc,
                dataset_id: dataset,
                dataset_fingerprint: splits.meta.fingerprint.clone(),
                config: cfg.teacher_training.clone(),
            };
            let mut cache = ModelCache::in_memory(false);
            let (_, r) = cache.stats(&inputs, &splits, &attack, &spec, &env.attacks)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Theory { run } => {
            let cfg = load_config(run.config.as_deref())?;
            let dir = create_run("theory", run.run_id.as_deref(), run.force, &cfg)?;
            let reports = run_theory(&cfg.theory)?;
            write_reports(&dir.join("theory"), &reports)?;
            let (u, c): (Vec<f64>, Vec<f64>) = reports.iter().map(|r| r.final_max_v()).unzip();
            println!("median final max mixture norm: uncompressed {:.4}, compressed {:.4}", median(&u), median(&c));
        }
        Command::Report { run, out } => {
            let records = run.join("records.jsonl");
            let out = out.unwrap_or_else(|| run.clone());
            for p in crate::report::report(&records, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
