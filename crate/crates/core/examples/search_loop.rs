//! A miniature search: meta-train the policy across two datasets and two
//! attacks, fine-tune it on a third task, then write the report CSVs.
//!
//! ```bash
//! cargo run --release --example search_loop
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcnas::attack::{AttackLoss, AttackSpec, DEFAULT_RADIUS};
use rcnas::data::LoadOptions;
use rcnas::encoder::{EncoderConfig, StateEncoder};
use rcnas::policy::{Policy, PolicyConfig};
use rcnas::report::report;
use rcnas::rl::{budget_compliance, fine_tune, meta_train, pretraining_corpus, Environment, RLConfig, RunLog};
use rcnas::task::{TaskRegistry, TeacherSpec};
use rcnas::train::ATConfig;

fn main() -> rcnas::Result<()> {
    let attacks = BTreeMap::from([
        ("fgsm".to_string(), AttackSpec::fgsm(DEFAULT_RADIUS)),
        ("pgd10".to_string(), AttackSpec::pgd(DEFAULT_RADIUS, 10)),
    ]);
    let teachers = vec![TeacherSpec::analog("WRN-16-4", 4, 0.5)];
    let load = LoadOptions { synthetic_resolution: 8, eval_size: 64, ..LoadOptions::default() };
    let at = ATConfig {
        epochs: 2,
        inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 1) },
        ..ATConfig::default()
    };
    let meta_registry = TaskRegistry {
        datasets: vec!["synthetic-gauss:4:400".into(), "synthetic-gauss:8:400".into()],
        attacks: attacks.clone(),
        teachers: teachers.clone(),
    };
    let mut env = Environment::new(meta_registry, load.clone(), at.clone(), at.clone());

    let ecfg = EncoderConfig { eval_size: 64, epochs: 300, ..EncoderConfig::default() };
    let mut encoder = StateEncoder::new(&ecfg)?;
    let corpus = pretraining_corpus(&mut env, &ecfg)?;
    let pre = encoder.pretrain(&corpus)?;
    println!("encoder: {} tasks, loss {:.4} -> {:.4}", corpus.len(), pre.initial_loss, pre.final_loss);

    let mut policy = Policy::new(&PolicyConfig::default())?;
    let cfg = RLConfig { meta_iterations: 4, steps_per_iteration: 3, ..RLConfig::default() };
    let mut log = RunLog::in_memory();
    let meta = meta_train(&cfg, &mut env, &encoder, &mut policy, &mut log)?;
    for r in &log.records {
        println!(
            "meta {}.{} {:<22} eps {:.2} reward {:>6.3}",
            r.iter,
            r.step,
            format!("{}/{}", r.task.dataset, r.task.attack),
            r.eps,
            r.reward.unwrap_or(f64::NAN)
        );
    }
    println!("architecture buffer per iteration: {:?}", meta.buffer_lengths);

    let target_registry = TaskRegistry { datasets: vec!["synthetic-gauss:6:400".into()], attacks, teachers };
    let mut env = Environment::new(target_registry, load, at.clone(), at);
    let entry = env.teacher_pool()?.remove(0);
    let target = env.task("synthetic-gauss:6:400", "pgd10", &entry)?;
    let dir = std::env::temp_dir().join("rcnas-example-search");
    std::fs::create_dir_all(&dir)?;
    let records = dir.join("records.jsonl");
    let _ = std::fs::remove_file(&records);
    let mut log = RunLog::to_file(&records)?;
    let ft = fine_tune(&RLConfig { finetune_iterations: 6, ..cfg }, &mut env, &encoder, &mut policy, &target, &mut log)?;
    if let Some((best, reward)) = &ft.best {
        let shape: Vec<String> = best.stages().iter().map(|s| format!("{}x{}", s.depth, s.width)).collect();
        println!("fine-tune best reward {reward:.3}: [{}]", shape.join(", "));
    }
    let (state, _) = env.state(&target, &encoder)?;
    let share = budget_compliance(&policy, &state, &target, 200, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("within budget: {:.0}% of 200 samples", 100.0 * share);

    for p in report(&records, &dir.join("report"))? {
        println!("--- {}\n{}", p.display(), std::fs::read_to_string(&p)?.trim_end());
    }
    Ok(())
}
