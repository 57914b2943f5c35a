use std::fs;
use std::path::Path;

use lgc_core::harness::figure::{figure_data, FigureKind};
use lgc_core::harness::sweep::{sweep, SweepGrid};
use lgc_core::harness::verify::{verify, VerifyConfig};
use lgc_core::harness::{run_experiment, ExperimentConfig, LrSpec, MechanismKind, RunStatus};
use lgc_core::Error;

const SMALL: &str = r#"
[problem]
dim = 30
devices = 2
rows_per_device = 50
[federation]
horizon = 60
step_cap = 2
batch = 8
[mechanism]
kind = "lgc-fixed"
steps = 2
fraction = 0.2
[output]
metrics_every = 10
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

fn last_row(path: &Path) -> (Vec<String>, Vec<String>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    (header, rows.last().unwrap().iter().map(String::from).collect())
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(matches!(ExperimentConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    assert!(matches!(
        ExperimentConfig::from_toml("[federation]\nhorizon = 5\nhorizn = 4\n"),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_values_are_rejected() {
    let bad = [
        "[mechanism]\nsteps = 9\n",
        "[mechanism]\nfraction = 0.0\n",
        "[budget]\nweights = [0.5]\n",
        "[problem]\nkind = \"logistic\"\n",
        "channels = []\n",
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn config_round_trips_through_toml() {
    let c = small();
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(c, back);
    assert_eq!(ExperimentConfig::default().channels.len(), 3);
}

#[test]
fn shift_below_the_floor_needs_force() {
    let mut c = small();
    c.federation.lr = LrSpec::Theorem { a: Some(1.0) };
    let dir = tempfile::tempdir().unwrap();
    assert!(run_experiment(&c, 0, dir.path()).is_err());
    c.federation.force = true;
    assert!(run_experiment(&c, 0, dir.path()).is_ok());
}

#[test]
fn runs_are_deterministic_per_seed() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| fs::read(dir.path().join(name).join("metrics.csv")).unwrap();
    run_experiment(&c, 3, &dir.path().join("a")).unwrap();
    run_experiment(&c, 3, &dir.path().join("b")).unwrap();
    run_experiment(&c, 4, &dir.path().join("c")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    for file in ["config.toml", "model.json", "status.json", "trace.json"] {
        assert!(dir.path().join("a").join(file).is_file(), "{file}");
    }
}

#[test]
fn tight_budget_stops_the_run_within_its_ledger() {
    let mut c = small();
    c.budget.energy = lgc_core::harness::config::BudgetValue::PerDevice(vec![2.0, 3.0]);
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&c, 0, dir.path()).unwrap();
    assert_eq!(s.status, RunStatus::BudgetExhausted);
    assert_eq!(s.status.exit_code(), 2);
    assert!(s.steps < c.federation.horizon);
    let (header, row) = last_row(&dir.path().join("metrics.csv"));
    let col = |n: &str| row[header.iter().position(|h| h == n).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("epoch") as usize, s.steps);
    assert!(col("energy_0") <= 2.0);
    assert!(col("energy_1") <= 3.0);
}

#[test]
fn compressed_uploads_are_smaller_than_dense_ones() {
    let dir = tempfile::tempdir().unwrap();
    let lgc = run_experiment(&small(), 0, &dir.path().join("lgc")).unwrap();
    let mut c = small();
    c.mechanism.kind = MechanismKind::Fedavg;
    let dense = run_experiment(&c, 0, &dir.path().join("fedavg")).unwrap();
    let per = |s: &lgc_core::harness::RunSummary| s.bytes as f64 / s.uploads as f64;
    assert!(per(&lgc) < 0.5 * per(&dense));
    assert_eq!(lgc.status, RunStatus::Completed);
}

#[test]
fn controller_runs_write_training_curves() {
    let mut c = small();
    c.mechanism.kind = MechanismKind::LgcDdpg;
    c.mechanism.episodes = 3;
    c.ddpg.hidden = 8;
    c.ddpg.warmup = 4;
    c.ddpg.batch = 4;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&c, 0, dir.path()).unwrap();
    assert!(dir.path().join("agents").join("device-0.bin").is_file());
    let reward = figure_data(dir.path(), FigureKind::DrlReward).unwrap();
    assert_eq!(reward.len(), 3);
    assert!(reward.iter().all(|p| p.mechanism == "lgc-ddpg"));
}

#[test]
fn sweep_records_every_combination() {
    let grid = SweepGrid::from_toml("seeds = [0, 1]\n[grid]\n\"mechanism.steps\" = [1, 2, 5]\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep(SMALL, &grid, dir.path()).unwrap();
    assert_eq!(rows.len(), 6);
    // steps = 5 exceeds the step cap and is recorded as a failure.
    assert_eq!(rows.iter().filter(|r| r.outcome.is_err()).count(), 2);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);

    let loss = figure_data(dir.path(), FigureKind::LossVsEpoch).unwrap();
    assert!(!loss.is_empty());
    assert!(figure_data(dir.path(), FigureKind::DrlLoss).unwrap().is_empty());
}

#[test]
fn verify_writes_one_line_per_check() {
    let text = r#"
gammas = [0.1, 1.0]
hs = [1, 4]
horizon = 300
[[problems]]
kind = "quadratic"
dim = 20
"#;
    let config = VerifyConfig::from_toml(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let lines = verify(&config, dir.path()).unwrap();
    assert_eq!(lines.len(), 4 * 4);
    assert!(lines.iter().all(|l| l.pass), "{lines:?}");
    let written = fs::read_to_string(dir.path().join("verify.jsonl")).unwrap();
    assert_eq!(written.lines().count(), lines.len());
}
