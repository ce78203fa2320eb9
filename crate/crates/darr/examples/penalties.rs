//! Penalty shapes and their exact scalar thresholding rules.
//!
//! ```sh
//! cargo run --release --example penalties
//! ```

use darr::penalty::{penalty_derivative, penalty_value, scalar_prox, PenaltySpec};

fn main() {
    let mcp = PenaltySpec::mcp(1.0, 3.0).unwrap();
    let scad = PenaltySpec::scad(1.0, 3.7).unwrap();
    let lasso = PenaltySpec::lasso(1.0).unwrap();

    println!("{:>5}  {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}", "t", "mcp", "scad", "lasso", "mcp'", "scad'", "lasso'");
    let mut t = 0.0;
    while t <= 5.0 + 1e-9 {
        println!(
            "{t:>5.2}  {:>8.4} {:>8.4} {:>8.4}   {:>8.4} {:>8.4} {:>8.4}",
            penalty_value(&mcp, t),
            penalty_value(&scad, t),
            penalty_value(&lasso, t),
            penalty_derivative(&mcp, t),
            penalty_derivative(&scad, t),
            penalty_derivative(&lasso, t),
        );
        t += 0.5;
    }

    // Thresholding: the folded-concave rules leave strong signals unshrunk.
    println!("\nscalar update at z = 2, level = 0.5 (dead zone, shrunk, unbiased):");
    for u in [0.2, 0.6, 5.0] {
        let m = scalar_prox(2.0, u, 0.5, &mcp).unwrap();
        let s = scalar_prox(2.0, u, 0.5, &scad).unwrap();
        let l = scalar_prox(2.0, u, 0.5, &lasso).unwrap();
        println!("  u = {u:>4.1}: mcp -> {m:>6.4}, scad -> {s:>6.4}, lasso -> {l:>6.4}");
    }
}
