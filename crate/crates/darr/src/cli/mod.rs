//! Command-line pipeline: `simulate | fit | cv | bench | predict | preprocess`.
//!
//! Every command is referentially transparent given (inputs, config, seed):
//! re-running overwrites outputs with identical bytes. Exit codes: 0 success,
//! 2 config/schema error, 3 I/O failure, 4 non-convergence (outputs still
//! written).

pub mod bench;
pub mod config;
pub mod io;

use crate::evaluation::{cv_select, prediction_metrics, prediction_residuals};
use crate::numerics::{mad, median, MAD_NORMAL_CONSISTENCY};
use crate::simulation::{contaminate, generate};
use crate::solver::{fit, SolverError};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Io(String),
    #[error("fit did not converge within the iteration cap (outputs written)")]
    NotConverged,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Schema(_) => 2,
            CliError::Io(_) => 3,
            CliError::NotConverged => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "darr",
    about = "Doubly adaptive robust estimation for high-dimensional longitudinal mixed models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config worker-thread count (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset (and truth) from the configured DGP and scenario.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit the configured estimator to a data CSV.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Long-format data CSV.
        #[arg(long)]
        data: PathBuf,
    },
    /// Subject-level cross-validation curve and selected penalty.
    Cv {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Monte Carlo benchmark over scenarios and methods.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Predict responses for a data CSV from a saved fit.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// fit.json produced by the fit command.
        #[arg(long)]
        fit: PathBuf,
    },
    /// Robust-standardize covariates (learning or applying a transform).
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Existing transform to apply instead of learning a new one.
        #[arg(long)]
        transform: Option<PathBuf>,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Simulate { common } => with_setup(common, cmd_simulate),
        Command::Fit { common, data } => with_setup(common, |cfg, out| cmd_fit(cfg, &data, out)),
        Command::Cv { common, data } => with_setup(common, |cfg, out| cmd_cv(cfg, &data, out)),
        Command::Bench { common } => with_setup(common, cmd_bench),
        Command::Predict { common, data, fit } => {
            with_setup(common, |cfg, out| cmd_predict(cfg, &data, &fit, out))
        }
        Command::Preprocess {
            common,
            data,
            transform,
        } => with_setup(common, |cfg, out| {
            cmd_preprocess(cfg, &data, transform.as_deref(), out)
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_setup<F>(common: CommonArgs, body: F) -> Result<(), CliError>
where
    F: FnOnce(&RunConfig, &Path) -> Result<(), CliError> + Send,
{
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    cfg.seed()?; // required before any work
    let run = |cfg: &RunConfig| body(cfg, &common.out);
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| run(&cfg))
    } else {
        run(&cfg)
    }
}

#[derive(Serialize)]
struct TruthDocument<'a> {
    scenario: crate::simulation::Scenario,
    pi: f64,
    seed: u64,
    #[serde(flatten)]
    truth: &'a crate::simulation::SimTruth,
}

/// `simulate`: writes data.csv and truth.json.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let dgp = cfg.dgp.to_config(seed)?;
    let scenario = cfg.scenario.to_config()?;
    let (clean, truth) = generate(&dgp);
    let (data, truth) = contaminate(&clean, &truth, &scenario, seed);
    io::write_file(&out.join("data.csv"), &io::dataset_to_csv(&data))?;
    let doc = TruthDocument {
        scenario: scenario.scenario,
        pi: scenario.pi,
        seed,
        truth: &truth,
    };
    io::write_file(&out.join("truth.json"), &io::to_json_pretty(&doc))?;
    Ok(())
}

fn select_lambda_if_needed(
    cfg: &RunConfig,
    data: &crate::data_model::LongitudinalDataset,
    seed: u64,
) -> Result<f64, CliError> {
    match cfg.solver.lambda {
        Some(l) => Ok(l),
        None => {
            let solver_cfg =
                cfg.solver
                    .to_solver_config(data.p, seed, 0.0, &cfg.pilot, &cfg.scatter)?;
            let cv = cv_select(data, &solver_cfg, cfg.cv.k, cfg.cv.n_lambda)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(cv.lambda_best)
        }
    }
}

/// `fit`: writes fit.json (and weights.csv unless disabled). A cross-validated
/// penalty is selected first when the config leaves lambda unset.
pub fn cmd_fit(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let data = io::read_dataset_csv(data_path)?;
    let lambda = select_lambda_if_needed(cfg, &data, seed)?;
    let solver_cfg = cfg
        .solver
        .to_solver_config(data.p, seed, lambda, &cfg.pilot, &cfg.scatter)?;
    let (fit, converged) = match fit(&data, &solver_cfg) {
        Ok(f) => (f, true),
        Err(SolverError::NotConverged(f)) => (*f, false),
        Err(SolverError::Validation(e)) => return Err(CliError::Schema(e.to_string())),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let doc = io::FitDocument::from_fit(&fit, &data, seed);
    io::write_file(&out.join("fit.json"), &io::to_json_pretty(&doc))?;
    if cfg.solver.write_weights_csv {
        io::write_file(&out.join("weights.csv"), &io::weights_csv(&data, &fit))?;
    }
    if converged {
        Ok(())
    } else {
        Err(CliError::NotConverged)
    }
}

#[derive(Serialize)]
struct CvDocument {
    lambda_best: f64,
    k: usize,
    n_lambda: usize,
    seed: u64,
    /// FNV-1a hash of the fold assignment; stable across reruns.
    fold_assignment_hash: String,
    fold_assignment: Vec<usize>,
}

fn fnv1a(data: impl Iterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in data {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// `cv`: writes cv_curve.csv and cv.json.
pub fn cmd_cv(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let data = io::read_dataset_csv(data_path)?;
    let solver_cfg = cfg
        .solver
        .to_solver_config(data.p, seed, 0.0, &cfg.pilot, &cfg.scatter)?;
    let cv = cv_select(&data, &solver_cfg, cfg.cv.k, cfg.cv.n_lambda)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let k = cfg.cv.k;
    let mut curve = String::from("lambda,mean_loss");
    for f in 0..k {
        curve.push_str(&format!(",fold_{f}"));
    }
    curve.push('\n');
    for point in &cv.curve {
        curve.push_str(&io::fmt_f64(point.lambda));
        curve.push(',');
        curve.push_str(&io::fmt_f64(point.mean_loss));
        for loss in &point.fold_losses {
            curve.push(',');
            curve.push_str(&io::fmt_f64(*loss));
        }
        curve.push('\n');
    }
    io::write_file(&out.join("cv_curve.csv"), &curve)?;
    let doc = CvDocument {
        lambda_best: cv.lambda_best,
        k,
        n_lambda: cfg.cv.n_lambda,
        seed,
        fold_assignment_hash: format!(
            "{:016x}",
            fnv1a(cv.fold_assignment.iter().map(|&f| f as u64))
        ),
        fold_assignment: cv.fold_assignment.clone(),
    };
    io::write_file(&out.join("cv.json"), &io::to_json_pretty(&doc))?;
    Ok(())
}

/// `bench`: writes metrics.csv and summary.csv.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let results = bench::run_benchmark(cfg)?;
    io::write_file(&out.join("metrics.csv"), &results.metrics_csv())?;
    io::write_file(&out.join("summary.csv"), &results.summary_csv())?;
    Ok(())
}

/// `predict`: writes predictions.csv and prediction_metrics.json.
pub fn cmd_predict(
    cfg: &RunConfig,
    data_path: &Path,
    fit_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    cfg.seed()?;
    let data = io::read_dataset_csv(data_path)?;
    let text = std::fs::read_to_string(fit_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", fit_path.display())))?;
    let doc: io::FitDocument = serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("invalid fit document: {e}")))?;
    if doc.p != data.p {
        return Err(CliError::Schema(format!(
            "fit has p = {}, data has p = {}",
            doc.p, data.p
        )));
    }
    let fit = doc.to_prediction_fit()?;
    let residuals = prediction_residuals(&fit, &data);
    let mut csv = String::from("subject_id,time,y,y_hat,residual\n");
    for (s, res) in data.subjects.iter().zip(&residuals) {
        for t in 0..s.n_obs() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                s.id,
                io::fmt_f64(s.times[t]),
                io::fmt_f64(s.y[t]),
                io::fmt_f64(s.y[t] - res[t]),
                io::fmt_f64(res[t]),
            ));
        }
    }
    io::write_file(&out.join("predictions.csv"), &csv)?;
    let metrics = prediction_metrics(&fit, &data);
    io::write_file(
        &out.join("prediction_metrics.json"),
        &io::to_json_pretty(&metrics),
    )?;
    Ok(())
}

/// `preprocess`: robust-standardizes covariates. Without `--transform`, it
/// learns per-column medians and MAD scales (imputing missing x cells with the
/// column median) and writes both the transformed CSV and transform.json;
/// with `--transform`, it applies the stored transform so validation or test
/// data get exactly the training-fold standardization.
pub fn cmd_preprocess(
    cfg: &RunConfig,
    data_path: &Path,
    transform_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    cfg.seed()?;
    let text = std::fs::read_to_string(data_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", data_path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Schema("empty file".into()))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[0] != "subject_id" || cols[1] != "time" || cols[2] != "y" {
        return Err(CliError::Schema(
            "header must start with subject_id,time,y,x_1,...".into(),
        ));
    }
    let x_names: Vec<String> = cols[3..]
        .iter()
        .take_while(|c| c.starts_with("x_"))
        .map(|c| c.to_string())
        .collect();
    let n_x = x_names.len();
    let n_z = cols.len() - 3 - n_x;

    // Lenient pass: keep rows with id/time/y present; x cells may be empty.
    struct RawRow {
        id: String,
        time: f64,
        y: f64,
        x: Vec<Option<f64>>,
        z: Vec<f64>,
    }
    let mut rows: Vec<RawRow> = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(CliError::Schema(format!(
                "line {lineno}: expected {} cells, found {}",
                cols.len(),
                cells.len()
            )));
        }
        let id = cells[0].trim();
        let time = cells[1].trim().parse::<f64>().ok();
        let y = cells[2].trim().parse::<f64>().ok();
        let (time, y) = match (id.is_empty(), time, y) {
            (false, Some(t), Some(y)) if t.is_finite() && y.is_finite() => (t, y),
            _ => continue, // incomplete outcome rows are dropped
        };
        let mut x = Vec::with_capacity(n_x);
        for j in 0..n_x {
            let cell = cells[3 + j].trim();
            x.push(if cell.is_empty() {
                None
            } else {
                let v = parse_cell_lenient(cell, lineno, &x_names[j])?;
                Some(v)
            });
        }
        let mut z = Vec::with_capacity(n_z);
        for j in 0..n_z {
            z.push(parse_cell_lenient(
                cells[3 + n_x + j].trim(),
                lineno,
                cols[3 + n_x + j],
            )?);
        }
        rows.push(RawRow {
            id: id.to_string(),
            time,
            y,
            x,
            z,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Schema("no usable data rows".into()));
    }

    let transform = match transform_path {
        Some(p) => {
            let t = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read {}: {e}", p.display())))?;
            let t: io::PreprocessTransform = serde_json::from_str(&t)
                .map_err(|e| CliError::Schema(format!("invalid transform: {e}")))?;
            if t.columns.len() != n_x {
                return Err(CliError::Schema(format!(
                    "transform has {} columns, data has {}",
                    t.columns.len(),
                    n_x
                )));
            }
            t
        }
        None => {
            let mut columns = Vec::with_capacity(n_x);
            for j in 0..n_x {
                let observed: Vec<f64> = rows.iter().filter_map(|r| r.x[j]).collect();
                if observed.is_empty() {
                    return Err(CliError::Schema(format!(
                        "column {} has no observed values",
                        x_names[j]
                    )));
                }
                let med = median(&observed);
                let scale = MAD_NORMAL_CONSISTENCY * mad(&observed);
                columns.push(io::ColumnTransform {
                    name: x_names[j].clone(),
                    median: med,
                    scale: if scale > 0.0 { scale } else { 1.0 },
                });
            }
            io::PreprocessTransform { columns }
        }
    };

    let mut csv = String::from("subject_id,time,y");
    for name in &x_names {
        csv.push_str(&format!(",{name}"));
    }
    for j in 0..n_z {
        csv.push_str(&format!(",{}", cols[3 + n_x + j]));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}",
            r.id,
            io::fmt_f64(r.time),
            io::fmt_f64(r.y)
        ));
        for (j, cell) in r.x.iter().enumerate() {
            let t = &transform.columns[j];
            let raw = cell.unwrap_or(t.median); // impute with the training median
            csv.push(',');
            csv.push_str(&io::fmt_f64((raw - t.median) / t.scale));
        }
        for z in &r.z {
            csv.push(',');
            csv.push_str(&io::fmt_f64(*z));
        }
        csv.push('\n');
    }
    io::write_file(&out.join("preprocessed.csv"), &csv)?;
    if transform_path.is_none() {
        io::write_file(&out.join("transform.json"), &io::to_json_pretty(&transform))?;
    }
    Ok(())
}

fn parse_cell_lenient(cell: &str, line: usize, column: &str) -> Result<f64, CliError> {
    cell.parse::<f64>().map_err(|_| {
        CliError::Schema(format!(
            "line {line}: column '{column}' is not a number (got '{cell}')"
        ))
    })
}
