//! Monte Carlo benchmark: replications x scenarios x methods, with
//! per-replication cross-validated penalty selection for the penalized
//! methods and a shared clean test set per replication.
//!
//! Replication seeds are `base_seed + replication index`. Tasks run in
//! parallel but results are collected by index and written by a single
//! writer, so output bytes do not depend on the thread count.

use crate::evaluation::{cv_select, estimation_metrics, prediction_metrics, MetricsReport};
use crate::simulation::{contaminate, generate, generate_test_set, Scenario, ScenarioConfig};
use crate::solver::{fit, recover_partial, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io::fmt_f64;
use super::CliError;

/// One benchmark row: a (scenario, replication, method) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: Scenario,
    pub replication: usize,
    pub method: Variant,
    pub seed: u64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub delta: f64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BenchResults {
    pub rows: Vec<BenchRow>,
}

fn run_method(
    cfg: &RunConfig,
    method: Variant,
    train: &crate::data_model::LongitudinalDataset,
    truth: &crate::simulation::SimTruth,
    test: &crate::data_model::LongitudinalDataset,
    seed: u64,
) -> Result<(MetricsReport, f64, bool, usize, f64), CliError> {
    let needs_cv = matches!(
        method,
        Variant::Darr | Variant::NonrobustPenalized | Variant::MarginalLasso
    );
    let mut section = cfg.solver.clone();
    section.variant = method;
    section.oracle_support = if method == Variant::OracleRestricted {
        Some(truth.support.clone())
    } else {
        None
    };
    let lambda = if needs_cv {
        let cv_cfg = section.to_solver_config(train.p, seed, 0.0, &cfg.pilot, &cfg.scatter)?;
        let k = cfg.bench.cv_k.unwrap_or(cfg.cv.k);
        let n_lambda = cfg.bench.cv_n_lambda.unwrap_or(cfg.cv.n_lambda);
        let cv = cv_select(train, &cv_cfg, k, n_lambda)
            .map_err(|e| CliError::Config(e.to_string()))?;
        cv.lambda_best
    } else {
        0.0
    };
    let solver_cfg = section.to_solver_config(train.p, seed, lambda, &cfg.pilot, &cfg.scatter)?;
    let fit = recover_partial(fit(train, &solver_cfg))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let est = estimation_metrics(&fit, truth);
    let pred = prediction_metrics(&fit, test);
    let merged = MetricsReport::merge(&est, &pred);
    Ok((
        merged,
        fit.lambda,
        fit.converged,
        fit.iterations,
        fit.weights.delta,
    ))
}

/// Runs the full benchmark for the configured scenarios and methods.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchResults, CliError> {
    let base_seed = cfg.seed()?;
    let mut tasks: Vec<(Scenario, usize)> = Vec::new();
    for &scenario in &cfg.bench.scenarios {
        for rep in 0..cfg.bench.replications {
            tasks.push((scenario, rep));
        }
    }
    let task_rows: Vec<Vec<BenchRow>> = tasks
        .par_iter()
        .map(|&(scenario, rep)| {
            let seed = base_seed + rep as u64;
            let mut rows = Vec::with_capacity(cfg.bench.methods.len());
            let prep = (|| -> Result<_, CliError> {
                let dgp = cfg.dgp.to_config(seed)?;
                let (clean, truth) = generate(&dgp);
                let scenario_cfg = match scenario {
                    Scenario::S1 => ScenarioConfig::clean(),
                    s => ScenarioConfig::new(s, cfg.bench.pi)
                        .map_err(|e| CliError::Config(e.to_string()))?,
                };
                let (train, truth) = contaminate(&clean, &truth, &scenario_cfg, seed);
                let (test, _) = generate_test_set(&dgp, cfg.bench.n_test, seed);
                Ok((train, truth, test))
            })();
            match prep {
                Ok((train, truth, test)) => {
                    for &method in &cfg.bench.methods {
                        let row = match run_method(cfg, method, &train, &truth, &test, seed) {
                            Ok((metrics, lambda, converged, iterations, delta)) => BenchRow {
                                scenario,
                                replication: rep,
                                method,
                                seed,
                                lambda,
                                converged,
                                iterations,
                                delta,
                                metrics: Some(metrics),
                                error: None,
                            },
                            Err(e) => BenchRow {
                                scenario,
                                replication: rep,
                                method,
                                seed,
                                lambda: f64::NAN,
                                converged: false,
                                iterations: 0,
                                delta: f64::NAN,
                                metrics: None,
                                error: Some(e.to_string()),
                            },
                        };
                        rows.push(row);
                    }
                }
                Err(e) => {
                    for &method in &cfg.bench.methods {
                        rows.push(BenchRow {
                            scenario,
                            replication: rep,
                            method,
                            seed,
                            lambda: f64::NAN,
                            converged: false,
                            iterations: 0,
                            delta: f64::NAN,
                            metrics: None,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
            rows
        })
        .collect();
    Ok(BenchResults {
        rows: task_rows.into_iter().flatten().collect(),
    })
}

fn opt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => fmt_f64(x),
        _ => String::new(),
    }
}

impl BenchResults {
    /// One row per replication x scenario x method.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "scenario,replication,method,seed,lambda,converged,iterations,delta,\
             tp,fp,model_size,mse_active,mse_inactive,cov_frobenius,mspe,mae,rmse,medae,\
             subject_error_median,subject_error_iqr,error\n",
        );
        for r in &self.rows {
            let m = r.metrics.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.replication,
                r.method,
                r.seed,
                opt_cell(Some(r.lambda)),
                r.converged,
                r.iterations,
                opt_cell(Some(r.delta)),
                m.map_or(String::new(), |m| m.tp.to_string()),
                m.map_or(String::new(), |m| m.fp.to_string()),
                m.map_or(String::new(), |m| m.model_size.to_string()),
                opt_cell(m.map(|m| m.mse_active)),
                opt_cell(m.map(|m| m.mse_inactive)),
                opt_cell(m.and_then(|m| m.cov_frobenius)),
                opt_cell(m.map(|m| m.mspe)),
                opt_cell(m.map(|m| m.mae)),
                opt_cell(m.map(|m| m.rmse)),
                opt_cell(m.map(|m| m.medae)),
                opt_cell(m.map(|m| m.subject_error_median)),
                opt_cell(m.map(|m| m.subject_error_iqr)),
                r.error.clone().unwrap_or_default(),
            ));
        }
        out
    }

    /// Mean, sd, and median per (scenario, method, metric); the squared-error
    /// and covariance metrics are scaled by 1e3 to match conventional
    /// benchmark tables (scale recorded per row).
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("scenario,method,metric,scale,mean,sd,median,n\n");
        let mut groups: Vec<(Scenario, Variant)> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&(r.scenario, r.method)) {
                groups.push((r.scenario, r.method));
            }
        }
        let metrics: [(&str, f64, fn(&MetricsReport) -> Option<f64>); 9] = [
            ("mse_active", 1e3, |m| Some(m.mse_active)),
            ("mse_inactive", 1e3, |m| Some(m.mse_inactive)),
            ("mspe", 1e3, |m| Some(m.mspe)),
            ("cov_frobenius", 1e3, |m| m.cov_frobenius),
            ("tp", 1.0, |m| Some(m.tp as f64)),
            ("fp", 1.0, |m| Some(m.fp as f64)),
            ("model_size", 1.0, |m| Some(m.model_size as f64)),
            ("mae", 1.0, |m| Some(m.mae)),
            ("rmse", 1.0, |m| Some(m.rmse)),
        ];
        for (scenario, method) in groups {
            for (name, scale, extract) in &metrics {
                let values: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.scenario == scenario && r.method == method)
                    .filter_map(|r| r.metrics.as_ref().and_then(extract))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let n = values.len() as f64;
                let mean = crate::numerics::pairwise_sum(&values) / n;
                let var = if values.len() > 1 {
                    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
                    crate::numerics::pairwise_sum(&sq) / (n - 1.0)
                } else {
                    0.0
                };
                let median = crate::numerics::median(&values);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    scenario,
                    method,
                    name,
                    scale,
                    fmt_f64(mean * scale),
                    fmt_f64(var.sqrt() * scale),
                    fmt_f64(median * scale),
                    values.len()
                ));
            }
        }
        out
    }

    /// Values of one metric for a (scenario, method) cell, successful rows only.
    pub fn metric_values(
        &self,
        scenario: Scenario,
        method: Variant,
        extract: impl Fn(&MetricsReport) -> Option<f64>,
    ) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.method == method)
            .filter_map(|r| r.metrics.as_ref().and_then(&extract))
            .collect()
    }
}
