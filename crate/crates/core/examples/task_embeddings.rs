//! LIPS and CT profiles of a trained teacher under different attacks, and
//! the standardized encoder inputs built from them.
//!
//! ```bash
//! cargo run --release --example task_embeddings
//! ```

use std::collections::BTreeMap;

use rcnas::attack::{AttackLoss, AttackSpec, DEFAULT_RADIUS};
use rcnas::data::LoadOptions;
use rcnas::encoder::{EncoderConfig, EncoderInput};
use rcnas::rl::Environment;
use rcnas::task::{default_attacks, mean_std, TaskRegistry, TeacherSpec};
use rcnas::train::ATConfig;

fn main() -> rcnas::Result<()> {
    let mut attacks = default_attacks();
    attacks.insert("clean".into(), AttackSpec::clean());
    let registry = TaskRegistry {
        datasets: vec!["synthetic-gauss:10:1000".into()],
        attacks: attacks.clone(),
        teachers: vec![TeacherSpec::analog("WRN-16-4", 4, 0.5), TeacherSpec::analog("WRN-28-10", 16, 0.5)],
    };
    let load = LoadOptions { synthetic_resolution: 8, ..LoadOptions::default() };
    let at = ATConfig {
        epochs: 2,
        inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 2) },
        ..ATConfig::default()
    };
    let mut env = Environment::new(registry, load, at.clone(), at);
    let cfg = EncoderConfig::default();

    let mut rows = BTreeMap::new();
    let names = ["WRN-16-4/4", "WRN-28-10/16"];
    for (name, entry) in names.iter().zip(env.teacher_pool()?) {
        for attack in attacks.keys() {
            let task = env.task("synthetic-gauss:10:1000", attack, &entry)?;
            let (emb, eval) = env.teacher_profile(&task)?;
            let (input, _) = env.encoder_input(&task, &cfg)?;
            let (lm, ls) = mean_std(&emb.lips);
            rows.insert(
                (name.to_string(), attack.clone()),
                (lm, ls, emb.degenerate, emb.ct[0], input.ct[0], eval.robust_accuracy),
            );
        }
    }
    println!("{:<14} {:<6} {:>9} {:>9} {:>5} {:>9} {:>7} {:>6}", "teacher", "attack", "lips", "std", "zero", "GFLOPs", "ct z", "acc");
    for ((t, a), (lm, ls, z, ct, cts, acc)) in rows {
        println!("{t:<14} {a:<6} {lm:>9.3} {ls:>9.3} {z:>5} {ct:>9.5} {cts:>7.3} {acc:>6.3}");
    }

    // Standardized LIPS has zero mean and unit variance unless the attack
    // never moved the input.
    let entry = env.teacher_pool()?.remove(0);
    let task = env.task("synthetic-gauss:10:1000", "pgd20", &entry)?;
    let (emb, _) = env.teacher_profile(&task)?;
    let input = EncoderInput::new(&task.teacher, &emb, &env.ct_scale()?, &cfg)?;
    let (m, s) = mean_std(&input.lips);
    println!("standardized pgd20 lips: mean {m:.2e} std {s:.3}, width {}", input.lips.len());
    Ok(())
}
