//! End-to-end command-line pipeline on a synthetic long-format CSV:
//! simulate -> fit -> cv -> predict -> preprocess, exit codes, schema
//! diagnostics, and byte-identical reruns.

use std::fs;
use std::path::{Path, PathBuf};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["darr"];
    argv.extend_from_slice(args);
    darr::cli::run(argv)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"{
    "seed": 11,
    "dgp": { "n": 12, "t_per_subject": 5, "p": 6, "s": 2 },
    "scenario": { "scenario": "S2", "pi": 0.1 },
    "solver": { "lambda": 0.2 },
    "cv": { "k": 3, "n_lambda": 5 }
}"#;

#[test]
fn simulate_fit_cv_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let config = config.to_str().unwrap();

    assert_eq!(run(&["simulate", "--config", config, "--out", out]), 0);
    let data_path = dir.path().join("data.csv");
    assert!(data_path.exists());
    assert!(dir.path().join("truth.json").exists());
    // Paper-default row count comes from n * T; here 12 * 5 + header.
    let data = fs::read_to_string(&data_path).unwrap();
    assert_eq!(data.lines().count(), 61);

    // Rerun is byte-identical.
    let first = data.clone();
    assert_eq!(run(&["simulate", "--config", config, "--out", out]), 0);
    assert_eq!(fs::read_to_string(&data_path).unwrap(), first);

    let data_arg = data_path.to_str().unwrap().to_string();
    assert_eq!(
        run(&["fit", "--config", config, "--data", &data_arg, "--out", out]),
        0
    );
    let fit_json = fs::read_to_string(dir.path().join("fit.json")).unwrap();
    assert!(fit_json.contains("\"beta\""));
    assert!(fit_json.contains("\"support\""));
    assert!(fit_json.contains("\"sigma2_hat\""));
    assert!(dir.path().join("weights.csv").exists());

    assert_eq!(
        run(&["cv", "--config", config, "--data", &data_arg, "--out", out]),
        0
    );
    let curve = fs::read_to_string(dir.path().join("cv_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6, "n_lambda rows plus header");
    let cv1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cv.json")).unwrap()).unwrap();
    // Identical rerun keeps the fold-assignment hash.
    assert_eq!(
        run(&["cv", "--config", config, "--data", &data_arg, "--out", out]),
        0
    );
    let cv2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cv.json")).unwrap()).unwrap();
    assert_eq!(cv1["fold_assignment_hash"], cv2["fold_assignment_hash"]);
    assert!(cv1["lambda_best"].as_f64().unwrap() > 0.0);

    let fit_arg = dir.path().join("fit.json");
    assert_eq!(
        run(&[
            "predict",
            "--config",
            config,
            "--data",
            &data_arg,
            "--fit",
            fit_arg.to_str().unwrap(),
            "--out",
            out,
        ]),
        0
    );
    let preds = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 61);
    assert!(preds.starts_with("subject_id,time,y,y_hat,residual"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("prediction_metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["mae"].as_f64().unwrap().is_finite());
    assert!(metrics["rmse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_and_schema_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    // Malformed JSON config.
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, "{\n  \"seed\": oops\n}").unwrap();
    assert_eq!(
        run(&["simulate", "--config", bad_cfg.to_str().unwrap(), "--out", out]),
        2
    );

    // Missing seed.
    let no_seed = dir.path().join("noseed.json");
    fs::write(&no_seed, "{}").unwrap();
    assert_eq!(
        run(&["simulate", "--config", no_seed.to_str().unwrap(), "--out", out]),
        2
    );

    // pi = 0 contradicts a contamination scenario.
    let bad_pi = write_config(
        dir.path(),
        r#"{ "seed": 1, "scenario": { "scenario": "S2", "pi": 0.0 } }"#,
    );
    assert_eq!(
        run(&["simulate", "--config", bad_pi.to_str().unwrap(), "--out", out]),
        2
    );

    // Oracle variant without a support list.
    let oracleless = dir.path().join("oracle.json");
    fs::write(
        &oracleless,
        r#"{ "seed": 1, "dgp": {"n": 6, "p": 4, "s": 2},
             "solver": { "variant": "oracle_restricted", "lambda": 0.0 } }"#,
    )
    .unwrap();
    let good = write_config(dir.path(), SMALL_CONFIG);
    assert_eq!(
        run(&["simulate", "--config", good.to_str().unwrap(), "--out", out]),
        0
    );
    let data_arg = dir.path().join("data.csv");
    assert_eq!(
        run(&[
            "fit",
            "--config",
            oracleless.to_str().unwrap(),
            "--data",
            data_arg.to_str().unwrap(),
            "--out",
            out,
        ]),
        2
    );

    // Data with a missing y cell: exit 2 naming the row.
    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "subject_id,time,y,x_1\na,1,0.5,1.0\na,2,,1.5\n").unwrap();
    assert_eq!(
        run(&[
            "fit",
            "--config",
            good.to_str().unwrap(),
            "--data",
            broken.to_str().unwrap(),
            "--out",
            out,
        ]),
        2
    );

    // Missing files are I/O failures.
    assert_eq!(
        run(&[
            "fit",
            "--config",
            good.to_str().unwrap(),
            "--data",
            dir.path().join("nope.csv").to_str().unwrap(),
            "--out",
            out,
        ]),
        3
    );
}

#[test]
fn non_convergence_exits_4_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    assert_eq!(run(&["simulate", "--config", config.to_str().unwrap(), "--out", out]), 0);
    // One outer iteration cannot meet the tolerance on this data.
    let tight = dir.path().join("tight.json");
    fs::write(
        &tight,
        r#"{
            "seed": 11,
            "dgp": { "n": 12, "t_per_subject": 5, "p": 6, "s": 2 },
            "scenario": { "scenario": "S2", "pi": 0.1 },
            "solver": { "lambda": 0.05, "outer_max_iter": 1, "outer_tol": 1e-12 },
            "cv": { "k": 3, "n_lambda": 5 }
        }"#,
    )
    .unwrap();
    let code = run(&[
        "fit",
        "--config",
        tight.to_str().unwrap(),
        "--data",
        dir.path().join("data.csv").to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code, 4);
    // The fit is still written, flagged as not converged.
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(doc["converged"], serde_json::Value::Bool(false));
}

#[test]
fn preprocess_learns_and_reapplies_transform() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let config = config.to_str().unwrap();

    let train = dir.path().join("train.csv");
    fs::write(
        &train,
        "subject_id,time,y,x_1,x_2\n\
         a,1,1.0,2.0,10.0\n\
         a,2,2.0,4.0,\n\
         b,1,3.0,6.0,30.0\n\
         b,2,,8.0,40.0\n\
         c,1,5.0,10.0,50.0\n",
    )
    .unwrap();
    assert_eq!(
        run(&["preprocess", "--config", config, "--data", train.to_str().unwrap(), "--out", out]),
        0
    );
    let transformed = fs::read_to_string(dir.path().join("preprocessed.csv")).unwrap();
    // The y-missing row is dropped before the transform is learned; kept x_1
    // values are {2, 4, 6, 10} with median 5 and MAD 2.
    assert_eq!(transformed.lines().count(), 5);
    let transform: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("transform.json")).unwrap())
            .unwrap();
    let cols = transform["columns"].as_array().unwrap();
    assert_eq!(cols.len(), 2);
    assert_eq!(cols[0]["median"].as_f64().unwrap(), 5.0);
    assert!((cols[0]["scale"].as_f64().unwrap() - 1.4826 * 2.0).abs() < 1e-12);

    // The x-missing cell is imputed with the training median -> exactly zero
    // after standardization (row a,2, column x_2).
    let imputed: f64 = transformed
        .lines()
        .nth(2)
        .unwrap()
        .split(',')
        .nth(4)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(imputed, 0.0);

    // Applying the stored transform to new data uses the training medians.
    let test = dir.path().join("test.csv");
    fs::write(&test, "subject_id,time,y,x_1,x_2\nq,1,0.0,5.0,30.0\n").unwrap();
    let out2 = dir.path().join("applied");
    fs::create_dir_all(&out2).unwrap();
    assert_eq!(
        run(&[
            "preprocess",
            "--config",
            config,
            "--data",
            test.to_str().unwrap(),
            "--transform",
            dir.path().join("transform.json").to_str().unwrap(),
            "--out",
            out2.to_str().unwrap(),
        ]),
        0
    );
    let applied = fs::read_to_string(out2.join("preprocessed.csv")).unwrap();
    let row = applied.lines().nth(1).unwrap();
    let x1_new: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!(x1_new.abs() < 1e-12, "training median must map to zero");
    // Applying a transform does not rewrite it.
    assert!(!out2.join("transform.json").exists());
}

#[test]
fn paper_default_simulate_writes_500_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let config = write_config(dir.path(), r#"{ "seed": 1 }"#);
    assert_eq!(run(&["simulate", "--config", config.to_str().unwrap(), "--out", out]), 0);
    let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 501, "500 data rows plus header");
    let header = data.lines().next().unwrap();
    assert!(header.starts_with("subject_id,time,y,x_1"));
    assert!(header.ends_with("z_1,z_2"));
}

#[test]
fn bench_records_error_rows_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("bench.json");
    // Two subjects cannot be split into three folds: the CV-tuned methods
    // fail per replication while the penalty-free methods still run.
    fs::write(
        &cfg,
        r#"{
            "seed": 5,
            "dgp": { "n": 2, "p": 4, "s": 2 },
            "bench": {
                "replications": 1,
                "scenarios": ["S1"],
                "methods": ["darr", "oracle_restricted"],
                "n_test": 5,
                "cv_k": 3,
                "cv_n_lambda": 4
            }
        }"#,
    )
    .unwrap();
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap(), "--out", out]), 0);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3);
    let darr_row = lines.iter().find(|l| l.contains(",darr,")).unwrap();
    assert!(
        darr_row.contains("cross-validation needs at least K subjects"),
        "error row should carry the failure message: {darr_row}"
    );
    let oracle_row = lines.iter().find(|l| l.contains(",oracle_restricted,")).unwrap();
    assert!(oracle_row.ends_with(','), "successful row has an empty error cell");
}

#[test]
fn bench_smoke_under_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("bench.json");
    fs::write(
        &cfg,
        r#"{
            "seed": 3,
            "dgp": { "n": 30, "p": 20, "s": 5 },
            "bench": {
                "replications": 2,
                "scenarios": ["S1", "S3"],
                "n_test": 20,
                "cv_k": 3,
                "cv_n_lambda": 6
            }
        }"#,
    )
    .unwrap();
    let start = std::time::Instant::now();
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap(), "--out", out]), 0);
    assert!(start.elapsed().as_secs() < 60, "smoke benchmark too slow");
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21, "header + 2 reps x 2 scenarios x 5 methods");
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    // Oracle rows always recover the full support with nothing spurious.
    for line in metrics.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells[2] == "oracle_restricted" {
            assert_eq!(cells[8], "5", "oracle TP");
            assert_eq!(cells[9], "0", "oracle FP");
        }
    }
    assert!(summary.contains("mse_active"));
}
