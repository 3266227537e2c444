use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcnas::attack::{attack, AttackRegistry, AttackSpec, DEFAULT_RADIUS};
use rcnas::data::DatasetSplits;
use rcnas::task::TeacherSpec;
use rcnas::train::{evaluate, trades_train, ATConfig, EvalResult};

pub struct AttackSanity {
    pub eval: EvalResult,
    /// Every attack kept its batch inside the ℓ∞ ball and the pixel range.
    pub contained: bool,
    pub detail: String,
}

/// Trains the WRN-16-4 analog with TRADES (β = 6, 5 epochs) and measures the
/// PGD20 gap on up to `n_test` held-out items.
pub fn attack_sanity(splits: &DatasetSplits, n_test: usize) -> rcnas::Result<AttackSanity> {
    let desc = TeacherSpec::analog("WRN-16-4", 4, 0.5).descriptor(splits.meta.num_classes, splits.meta.resolution)?;
    let cfg = ATConfig { epochs: 5, trades_beta: 6.0, ..ATConfig::default() };
    let model = trades_train(&desc, splits, &cfg)?;
    let registry = AttackRegistry::new();
    let pgd20 = AttackSpec::pgd(DEFAULT_RADIUS, 20);
    let test = splits.test.head(n_test.min(splits.test.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eval = evaluate(&model, &test, "pgd20", &pgd20, &registry, &mut rng)?;

    let batch = test.head(64);
    let mut contained = true;
    let mut detail = String::new();
    for spec in [AttackSpec::fgsm(DEFAULT_RADIUS), pgd20.clone(), AttackSpec::cw(DEFAULT_RADIUS, 40)] {
        let adv = attack(&model, &batch.images, &batch.labels, &spec, &mut rng)?;
        let exact = adv.inputs.data.iter().zip(&batch.images.data).all(|(a, x)| (*a as f64 - *x as f64).abs() <= spec.radius as f64 && (0.0..=1.0).contains(a));
        if adv.validate(&batch.images, spec.radius).is_err() || !exact {
            contained = false;
            detail.push_str(&format!(" {} escaped the ball;", spec.kind));
        }
    }
    Ok(AttackSanity { eval, contained, detail })
}
