//! Subject-level cross-validation: all visits of a subject stay in the same
//! fold, and the penalty is chosen from a shared warm-started grid.
//!
//! ```sh
//! cargo run --release --example cross_validation
//! ```

use darr::evaluation::cv_select;
use darr::penalty::PenaltySpec;
use darr::simulation::{generate, DgpConfig};
use darr::solver::SolverConfig;

fn main() {
    let dgp = DgpConfig {
        n: 40,
        p: 30,
        s: 5,
        beta_star: darr::simulation::default_beta_star(30, 5),
        seed: 5,
        ..DgpConfig::default()
    };
    let (data, truth) = generate(&dgp);
    let cfg = SolverConfig::for_dim(PenaltySpec::scad(0.0, 3.7).unwrap(), data.p);
    let cv = cv_select(&data, &cfg, 5, 12).expect("cv");

    println!("lambda        mean held-out MSE");
    for point in &cv.curve {
        let marker = if point.lambda == cv.lambda_best { "  <- selected" } else { "" };
        println!("{:<12.6} {:<18.4}{marker}", point.lambda, point.mean_loss);
    }

    let refit_cfg = cfg.with_lambda(cv.lambda_best);
    let fit = darr::solver::recover_partial(darr::solver::fit(&data, &refit_cfg)).expect("fit");
    let tp = fit.support.iter().filter(|j| truth.support.contains(j)).count();
    println!(
        "\nrefit at lambda = {:.5}: selected {} predictors (TP {tp}, FP {})",
        cv.lambda_best,
        fit.support.len(),
        fit.support.len() - tp
    );
}
