//! FGSM, PGD and CW-margin attacks against a briefly trained network,
//! plus an external provider plugged into the registry.
//!
//! ```bash
//! cargo run --release --example attacks
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcnas::attack::{attack, AdvBatch, AttackKind, AttackRegistry, AttackSpec, DEFAULT_RADIUS};
use rcnas::data::{load_dataset, LoadOptions};
use rcnas::nn::{Classifier, ImageBatch};
use rcnas::task::TeacherSpec;
use rcnas::train::{evaluate, trades_train, ATConfig};

fn main() -> rcnas::Result<()> {
    let opts = LoadOptions { synthetic_resolution: 8, eval_size: 128, ..LoadOptions::default() };
    let splits = load_dataset("synthetic-gauss:10:1000", &opts)?;
    let desc = TeacherSpec::analog("WRN-16-4", 4, 0.5).descriptor(10, 8)?;
    // Plain cross-entropy training (beta 0) leaves the model easy to attack.
    let cfg = ATConfig { epochs: 3, trades_beta: 0.0, ..ATConfig::default() };
    let model = trades_train(&desc, &splits, &cfg)?;

    let batch = splits.eval.head(64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for spec in [AttackSpec::fgsm(DEFAULT_RADIUS), AttackSpec::pgd(DEFAULT_RADIUS, 20), AttackSpec::cw(DEFAULT_RADIUS, 40)] {
        let adv = attack(&model, &batch.images, &batch.labels, &spec, &mut rng)?;
        adv.validate(&batch.images, spec.radius)?;
        let flipped = adv.success_mask.iter().filter(|&&s| s).count();
        println!("{:<5} flipped {flipped}/{} predictions", spec.kind.to_string(), batch.len());
    }

    // An external provider: uniform noise on the ball corners.
    let mut registry = AttackRegistry::new();
    registry.register_external("sign-noise", |m: &dyn Classifier, x: &ImageBatch, _: &[usize], spec: &AttackSpec| {
        let mut inputs = x.clone();
        for (i, v) in inputs.data.iter_mut().enumerate() {
            let s = if (i * 2654435761) % 7 < 3 { -1.0 } else { 1.0 };
            *v = (*v + s * spec.radius).clamp(0.0, 1.0);
        }
        let deltas = ImageBatch { data: inputs.data.iter().zip(&x.data).map(|(a, b)| a - b).collect(), ..x.clone() };
        let before = m.logits(x)?.predictions();
        let after = m.logits(&inputs)?.predictions();
        let success_mask = before.iter().zip(&after).map(|(a, b)| a != b).collect();
        Ok(AdvBatch { inputs, deltas, success_mask })
    });
    println!("registered externals: {:?}", registry.registered());

    let noise = AttackSpec { kind: AttackKind::External("sign-noise".into()), ..AttackSpec::fgsm(DEFAULT_RADIUS) };
    for (id, spec) in [("sign-noise", noise), ("pgd20", AttackSpec::pgd(DEFAULT_RADIUS, 20))] {
        let r = evaluate(&model, &splits.eval, id, &spec, &registry, &mut rng)?;
        println!("{id:<10} clean {:.3} robust {:.3}", r.clean_accuracy, r.robust_accuracy);
    }
    Ok(())
}
