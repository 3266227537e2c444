//! The multi-head policy on a fixed state: sampling, log-densities, a
//! finite-difference check of the score function, and a few hundred
//! REINFORCE steps on a toy bandit that prefers narrow, shallow stages.
//!
//! ```bash
//! cargo run --release --example policy_gradient
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcnas::encoder::{Provenance, StateEmbedding};
use rcnas::policy::{PgObjective, Policy, PolicyConfig};

fn bandit_reward(keeps: &[(f64, f64)]) -> f64 {
    keeps.iter().map(|(w, d)| 1.0 - (w - 0.3).abs() - (d - 0.5).abs()).sum::<f64>() / keeps.len() as f64
}

fn main() -> rcnas::Result<()> {
    let cfg = PolicyConfig { d_s: 16, hidden: 32, ..PolicyConfig::default() };
    let mut policy = Policy::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let state = StateEmbedding {
        per_stage: (0..3).map(|_| (0..cfg.d_s).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        provenance: Provenance { task_hash: "toy".into(), teacher_hash: "toy".into() },
    };

    let out = policy.forward(&state)?;
    for (i, s) in out.stages.iter().enumerate() {
        println!("stage {i}: mu {:.3?} var {:.3?} p {:.3?}", s.mu, s.var, s.p);
    }
    let sample = Policy::sample(&out, &mut rng)?;
    println!("sampled log-density {:.4}", sample.log_prob);

    // Central differences on a handful of parameters.
    let (_, grad) = policy.objective_grad(&state, &sample, PgObjective::Reinforce)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in (0..policy.params().len()).step_by(97) {
        let eval = |delta: f64| -> rcnas::Result<f64> {
            let mut p = policy.clone();
            p.params_mut()[k] += delta;
            Policy::log_prob(&p.forward(&state)?, &sample)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8));
    }
    println!("worst relative finite-difference error {worst:.2e}");

    // `rl::vpg_update` uses raw rewards. This hand-rolled loop subtracts a
    // running mean instead, built from the same score function.
    let mut baseline = 0.0;
    for it in 0..=600 {
        let out = policy.forward(&state)?;
        let s = Policy::sample(&out, &mut rng)?;
        let keeps: Vec<(f64, f64)> = s.action.per_stage.iter().map(|a| (a.width_keep, a.depth_keep)).collect();
        let r = bandit_reward(&keeps);
        let (_, g) = policy.objective_grad(&state, &s, PgObjective::Reinforce)?;
        let step: Vec<f64> = g.iter().map(|v| 0.02 * (r - baseline) * v).collect();
        policy.apply_step(&step)?;
        baseline = 0.95 * baseline + 0.05 * r;
        if it % 150 == 0 {
            let mean: Vec<String> = out.stages.iter().map(|o| format!("{:.2}/{:.2}", sigmoid(o.mu[0]), sigmoid(o.mu[1]))).collect();
            println!("iter {it:>3}: reward {r:.3} baseline {baseline:.3} median keeps w/d [{}]", mean.join(", "));
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
