//! The attack-sanity pipeline on synthetic data, which runs everywhere; the
//! acceptance suite runs the same pipeline on a CIFAR-10 subset when the
//! binary batches are present.

mod common;

use rcnas::data::{load_dataset, LoadOptions};

#[test]
fn trades_model_loses_accuracy_under_pgd20() {
    // Prototypes only slightly larger than the attack radius, so that as on
    // natural images a robust decision boundary is hard to find.
    let opts = LoadOptions { synthetic_resolution: 8, synthetic_amplitude: 0.04, ..LoadOptions::default() };
    let splits = load_dataset("synthetic-gauss:10:5000", &opts).unwrap();
    let r = common::attack_sanity(&splits, 1000).unwrap();
    println!("clean {:.3} pgd20 {:.3}{}", r.eval.clean_accuracy, r.eval.robust_accuracy, r.detail);
    assert!(r.contained, "{}", r.detail);
    assert!(r.eval.clean_accuracy - r.eval.robust_accuracy >= 0.20, "{:?}", r.eval);
}
