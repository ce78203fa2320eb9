//! Desk-scale Monte Carlo benchmark across contamination scenarios.
//!
//! ```sh
//! cargo run --release --example benchmark                # small defaults
//! cargo run --release --example benchmark -- config.json # custom config
//! ```
//!
//! Any config field can also be overridden from the environment, e.g.
//! `DARR_BENCH__REPLICATIONS=5 DARR_DGP__N=100`.

use darr::cli::bench::run_benchmark;
use darr::cli::RunConfig;

const SMALL: &str = r#"{
  "seed": 2024,
  "dgp": { "n": 30, "p": 20, "s": 5 },
  "bench": {
    "replications": 3,
    "scenarios": ["S1", "S2"],
    "n_test": 30,
    "cv_k": 3,
    "cv_n_lambda": 8
  }
}"#;

fn main() {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(std::path::Path::new(&path)).expect("config"),
        None => RunConfig::from_json_str(SMALL).expect("config"),
    };
    let started = std::time::Instant::now();
    let results = run_benchmark(&cfg).expect("benchmark");
    let failed = results.rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "{} rows ({failed} failed) in {:.1}s",
        results.rows.len(),
        started.elapsed().as_secs_f64()
    );
    print!("{}", results.summary_csv());
}
