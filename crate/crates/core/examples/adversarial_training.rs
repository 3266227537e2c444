//! TRADES training, robust evaluation and the content-addressed model cache.
//!
//! ```bash
//! cargo run --release --example adversarial_training
//! ```

use std::time::Instant;

use rcnas::attack::{AttackLoss, AttackRegistry, AttackSpec, DEFAULT_RADIUS};
use rcnas::data::{load_dataset, LoadOptions};
use rcnas::task::TeacherSpec;
use rcnas::train::{trades_train_logged, ATConfig, CacheInputs, ModelCache};

fn main() -> rcnas::Result<()> {
    let opts = LoadOptions { synthetic_resolution: 8, ..LoadOptions::default() };
    let splits = load_dataset("synthetic-gauss:10:2000", &opts)?;
    let desc = TeacherSpec::analog("WRN-16-4", 4, 0.5).descriptor(10, 8)?;
    let registry = AttackRegistry::new();
    let pgd20 = AttackSpec::pgd(DEFAULT_RADIUS, 20);

    let cfg = ATConfig {
        epochs: 3,
        inner_attack: AttackSpec { loss: AttackLoss::Kl, ..AttackSpec::pgd(DEFAULT_RADIUS, 2) },
        ..ATConfig::default()
    };
    let t = Instant::now();
    let (_, log) = trades_train_logged(&desc, &splits.train, &cfg, &registry)?;
    let per_epoch = log.losses.len() / cfg.epochs as usize;
    for (e, chunk) in log.losses.chunks(per_epoch).enumerate() {
        let kl: f64 = log.kl_terms[e * per_epoch..(e + 1) * per_epoch].iter().sum::<f64>() / per_epoch as f64;
        println!("epoch {e}: loss {:.3}  kl {kl:.4}", chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    println!("train accuracy {:.3} in {:.1?}", log.final_train_accuracy, t.elapsed());

    // The cache keys on descriptor, dataset fingerprint and recipe, so the
    // second lookup neither trains nor attacks.
    let dir = std::env::temp_dir().join("rcnas-example-cache");
    let mut cache = ModelCache::on_disk(&dir, false);
    let inputs = CacheInputs {
        descriptor: desc,
        dataset_id: splits.meta.id.clone(),
        dataset_fingerprint: splits.meta.fingerprint.clone(),
        config: cfg,
    };
    for round in 0..2 {
        let t = Instant::now();
        let (_, r) = cache.stats(&inputs, &splits, "pgd20", &pgd20, &registry)?;
        println!("round {round}: clean {:.3} pgd20 {:.3} ({:.1?})", r.clean_accuracy, r.robust_accuracy, t.elapsed());
    }
    println!("cache at {}", dir.display());
    Ok(())
}
