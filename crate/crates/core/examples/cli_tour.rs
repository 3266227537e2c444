//! Drives the command-line entry point in-process: prints the default
//! configuration, costs an architecture, and runs a tiny theory job into a
//! scratch runs directory.
//!
//! ```bash
//! cargo run --release --example cli_tour
//! ```

use rcnas::cli::{run, RUNS_DIR_ENV};

fn main() {
    let runs = std::env::temp_dir().join("rcnas-example-runs");
    std::env::set_var(RUNS_DIR_ENV, &runs);

    let code = run(["rcnas", "cost", "--arch", "WRN-28-10"]);
    println!("cost exited with {code}");
    let code = run(["rcnas", "cost", "--arch", "WRN-16-4", "--resolution", "8", "--width-divisor", "4", "--json"]);
    println!("cost --json exited with {code}");

    let cfg = runs.join("tiny-theory.yaml");
    std::fs::create_dir_all(&runs).expect("scratch dir");
    std::fs::write(&cfg, "theory:\n  t_clean: 20\n  t_adv: 20\n  seeds: [0, 1]\n").expect("write config");
    let code = run(["rcnas", "theory", "--config", cfg.to_str().unwrap(), "--run-id", "tour", "--force"]);
    println!("theory exited with {code}; outputs under {}", runs.join("tour").display());

    let code = run(["rcnas", "frobnicate"]);
    println!("unknown subcommand exited with {code}");
}
