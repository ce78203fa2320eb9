//! How the doubly adaptive weights respond to contamination: the discrepancy
//! factor stays near zero on clean residuals and wakes up the downweighting
//! when outliers appear.
//!
//! ```sh
//! cargo run --release --example weights
//! ```

use darr::numerics::RngStream;
use darr::weighting::{
    compute_weights, default_leverage_spec, default_residual_spec, discrepancy_factor, weight_fn,
};

fn main() {
    let mut rng = RngStream::new(3, 0);
    let clean: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
    let mut contaminated = clean.clone();
    for r in contaminated.iter_mut().take(50) {
        *r = 20.0 + rng.normal();
    }

    let d_clean = discrepancy_factor(&clean);
    let d_cont = discrepancy_factor(&contaminated);
    println!("discrepancy factor, clean residuals:        {d_clean:.4}");
    println!("discrepancy factor, 10% vertical outliers:  {d_cont:.4}");

    let p = 40;
    let leverage: Vec<f64> = (0..500)
        .map(|i| if i % 100 == 0 { 6.0 * p as f64 } else { p as f64 })
        .collect();
    let spec1 = default_residual_spec();
    let spec2 = default_leverage_spec(p);
    let state = compute_weights(&contaminated, &leverage, d_cont, &spec1, &spec2);
    println!("\nper-observation weights under delta = {d_cont:.3}:");
    for (label, idx) in [("typical row", 100usize), ("vertical outlier", 0), ("leverage row", 200)] {
        println!(
            "  {label:<18} |r| = {:>6.2}, d^2 = {:>7.1} -> w = {:.4}",
            state.residuals[idx].abs(),
            state.leverage[idx],
            state.weights[idx]
        );
    }

    println!("\nweight functions at selected arguments:");
    for u in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        println!(
            "  phi_huber(1.345)({u:>4.1}) = {:.4}   phi_bisquare(4)({u:>4.1}) = {:.4}",
            weight_fn(&darr::weighting::WeightFnSpec::huber(1.345), u),
            weight_fn(&darr::weighting::WeightFnSpec::bisquare(4.0), u),
        );
    }
}
