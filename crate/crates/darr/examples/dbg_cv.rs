use darr::evaluation::{cv_select, estimation_metrics, prediction_residuals};
use darr::penalty::PenaltySpec;
use darr::simulation::*;
use darr::solver::*;

fn main() {
    let scen = std::env::args().nth(1).unwrap_or("S1".into());
    let dgp = DgpConfig { seed: 3, ..DgpConfig::default() };
    let (clean, truth) = generate(&dgp);
    let (data, truth) = match scen.as_str() {
        "S2" => contaminate(&clean, &truth, &ScenarioConfig::new(Scenario::S2, 0.1).unwrap(), 3),
        "S3" => contaminate(&clean, &truth, &ScenarioConfig::new(Scenario::S3, 0.1).unwrap(), 3),
        _ => (clean.clone(), truth.clone()),
    };
    let cfg = SolverConfig::for_dim(PenaltySpec::scad(0.0, 3.7).unwrap(), 200);
    let cv = cv_select(&data, &cfg, 5, 25).unwrap();
    println!("lambda_best = {:.5}", cv.lambda_best);
    // Full-data path for reference: TP/FP and true-risk proxy per lambda.
    let prep = prepare(&data, &cfg).unwrap();
    let grid: Vec<f64> = cv.curve.iter().map(|p| p.lambda).collect();
    let path = lambda_path_prepared(&data, &prep, &cfg, &grid).unwrap();
    let (test, _) = generate_test_set(&dgp, 100, 3);
    println!("{:>9} {:>10} {:>4} {:>4} {:>9} {:>9} {:>8}", "lambda", "cv_loss", "TP", "FP", "mseS*1e3", "testMSPE", "delta");
    for ((lambda, fit), point) in path.iter().zip(&cv.curve) {
        let m = estimation_metrics(fit, &truth);
        let resid = prediction_residuals(fit, &test);
        let sq: Vec<f64> = resid.iter().flatten().map(|e| e * e).collect();
        let mspe = sq.iter().sum::<f64>() / sq.len() as f64;
        println!(
            "{lambda:>9.5} {:>10.4} {:>4} {:>4} {:>9.3} {:>9.4} {:>8.3}",
            point.mean_loss, m.tp, m.fp, m.mse_active * 1e3, mspe, fit.weights.delta
        );
    }
}
