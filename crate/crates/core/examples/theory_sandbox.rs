//! Sparse-coding data, the two-layer symmetric ReLU network and the
//! pure/mixture weight decomposition: trains an uncompressed and a pruned
//! arm under the same clean-then-adversarial schedule and compares the
//! largest dense-mixture norm each ends with.
//!
//! ```bash
//! cargo run --release --example theory_sandbox
//! ```

use rcnas::theory::{decompose, generate, median, pythagorean_error, train_arms, TheoryConfig};

fn main() -> rcnas::Result<()> {
    let cfg = TheoryConfig { seeds: (0..5).collect(), ..TheoryConfig::default() };
    let data = generate(&cfg.data)?;
    println!(
        "D {} k {} n {}: dictionary orthonormality error {:.1e}",
        cfg.data.dim,
        cfg.data.sparsity,
        cfg.data.samples,
        data.dictionary.orthonormality_error()
    );

    let (mut us, mut cs) = (vec![], vec![]);
    for &seed in &cfg.seeds {
        let r = train_arms(&data, &cfg.net, cfg.t_clean, cfg.t_adv, cfg.tau, cfg.compression, seed)?;
        let (u, c) = r.final_max_v();
        let at_switch = r.uncompressed.max_mixture[cfg.t_clean];
        println!(
            "seed {seed}: max|v| after clean phase {at_switch:.3}; final uncompressed {u:.3} compressed {c:.3}; identity error {:.1e}",
            r.max_identity_error
        );
        us.push(u);
        cs.push(c);

        if seed == 0 {
            let dec = decompose(&r.compressed.final_theta, cfg.net.width, &data.dictionary);
            let silent = r.pruned.len();
            println!(
                "  pruned {silent} of {} neurons; recheck of the final decomposition: {:.1e}",
                cfg.net.width,
                pythagorean_error(&r.compressed.final_theta, &dec)
            );
        }
    }
    println!("median final max|v|: uncompressed {:.4}, compressed {:.4}", median(&us), median(&cs));
    Ok(())
}
