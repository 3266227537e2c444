//! Pre-trains the state encoder as an autoencoder over a pool of tasks,
//! freezes it, and round-trips it through a checkpoint.
//!
//! ```bash
//! cargo run --release --example encoder_pretraining
//! ```

use std::collections::BTreeMap;

use rcnas::attack::{AttackLoss, AttackSpec, DEFAULT_RADIUS};
use rcnas::data::LoadOptions;
use rcnas::encoder::{EncoderConfig, Provenance, StateEncoder};
use rcnas::rl::{pretraining_corpus, Environment};
use rcnas::task::{TaskRegistry, TeacherSpec};
use rcnas::train::ATConfig;

fn main() -> rcnas::Result<()> {
    let registry = TaskRegistry {
        datasets: vec!["synthetic-gauss:10:600".into(), "synthetic-gauss:20:600".into()],
        attacks: BTreeMap::from([
            ("fgsm".to_string(), AttackSpec::fgsm(DEFAULT_RADIUS)),
            ("pgd10".to_string(), AttackSpec::pgd(DEFAULT_RADIUS, 10)),
        ]),
        teachers: vec![TeacherSpec::analog("WRN-16-4", 4, 0.5), TeacherSpec::analog("WRN-28-10", 16, 0.5)],
    };
    let load = LoadOptions { synthetic_resolution: 8, eval_size: 128, ..LoadOptions::default() };
    let at = ATConfig {
        epochs: 1,
        inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 1) },
        ..ATConfig::default()
    };
    let mut env = Environment::new(registry, load, at.clone(), at);

    let cfg = EncoderConfig { eval_size: 128, epochs: 600, ..EncoderConfig::default() };
    let corpus = pretraining_corpus(&mut env, &cfg)?;
    println!("corpus: {} tasks", corpus.len());

    let mut enc = StateEncoder::new(&cfg)?;
    let report = enc.pretrain(&corpus)?;
    for (e, l) in report.losses.iter().enumerate().step_by(100) {
        println!("epoch {e:>4}: {l:.5}");
    }
    println!("loss {:.5} -> {:.5}, frozen: {}", report.initial_loss, report.final_loss, enc.is_frozen());

    let path = std::env::temp_dir().join("rcnas-example-encoder.ckpt");
    enc.save(&path)?;
    let back = StateEncoder::load(&path)?;
    let prov = Provenance { task_hash: "example".into(), teacher_hash: "example".into() };
    let (a, b) = (enc.encode_state(&corpus[0], prov.clone())?, back.encode_state(&corpus[0], prov)?);
    println!("checkpoint {} round-trips: {}", path.display(), a == b && enc.param_hash() == back.param_hash());
    println!("state: {} stages x {} dims", a.per_stage.len(), a.per_stage[0].len());
    Ok(())
}
