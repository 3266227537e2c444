//! Forward+backward throughput of the convolution engine on a few network
//! sizes, measured against the analytic MAC count.
//!
//! ```bash
//! cargo run --release --example engine_throughput
//! ```

use std::time::Instant;

use rcnas::arch::teacher_from_name;
use rcnas::nn::{ImageBatch, Logits, MaterializeOptions, Network};

fn main() -> rcnas::Result<()> {
    for (name, res) in [("WRN-16-1", 8usize), ("WRN-16-1", 32), ("WRN-16-4", 8)] {
        let d = teacher_from_name(name)?.with_io(10, res as u32)?;
        let mut net = Network::materialize(&d, &MaterializeOptions::default())?;
        let x = ImageBatch::zeros(128, res, res, 3);
        let iters = 5;
        let t = Instant::now();
        for _ in 0..iters {
            let (l, cache) = net.forward_train(&x)?;
            let mut g = vec![0.0; net.num_params()];
            net.backward(&cache, &Logits { n: l.n, k: l.k, data: vec![0.01; l.data.len()] }, Some(&mut g), false);
        }
        let per_batch = t.elapsed().as_secs_f64() / iters as f64;
        let macs = net.traced_macs(&ImageBatch::zeros(1, res, res, 3))?;
        // Backward costs roughly twice the forward pass.
        let gmacs = macs as f64 * 128.0 * 3.0 / per_batch / 1e9;
        println!("{name} @ {res}x{res}: {per_batch:.3}s per batch of 128, ~{gmacs:.1} GMAC/s");
    }
    Ok(())
}
