//! Generate a benchmark dataset with contamination and inspect it.
//!
//! ```sh
//! cargo run --release --example simulate
//! ```

use darr::simulation::{contaminate, generate, DgpConfig, Scenario, ScenarioConfig};

fn main() {
    let cfg = DgpConfig {
        n: 50,
        p: 40,
        s: 10,
        beta_star: darr::simulation::default_beta_star(40, 10),
        seed: 7,
        ..DgpConfig::default()
    };
    let (clean, truth) = generate(&cfg);
    println!(
        "clean dataset: {} subjects, {} observations, p = {}, q = {}",
        clean.n_subjects(),
        clean.total_obs(),
        clean.p,
        clean.q
    );
    println!("true support: {:?}", truth.support);

    let scenario = ScenarioConfig::new(Scenario::S2, 0.1).unwrap();
    let (contaminated, truth) = contaminate(&clean, &truth, &scenario, cfg.seed);
    println!(
        "S2 contamination: {} of {} observations shifted",
        truth.contaminated_rows.len(),
        contaminated.total_obs()
    );

    // The shifted rows stand out in the raw residuals against the truth.
    let offsets = contaminated.offsets();
    let row = truth.contaminated_rows[0];
    let i = offsets.partition_point(|&o| o <= row) - 1;
    let t = row - offsets[i];
    let s = &contaminated.subjects[i];
    let fitted: f64 = s
        .x
        .row(t)
        .iter()
        .zip(&truth.beta_star)
        .map(|(&x, &b)| x * b)
        .sum::<f64>()
        + s.z.row(t)[0] * truth.b[i][0]
        + s.z.row(t)[1] * truth.b[i][1];
    println!(
        "first contaminated row (subject {}, visit {}): y = {:.2}, clean fit = {:.2}",
        s.id,
        t + 1,
        s.y[t],
        fitted
    );

    let csv = darr::cli::io::dataset_to_csv(&contaminated);
    println!("CSV serialization: {} bytes, header:", csv.len());
    println!("{}", csv.lines().next().unwrap());
}
