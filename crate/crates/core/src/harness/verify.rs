//! The verification matrix: every cell run with the theorem step sizes and
//! checked against the memory, deviation and convergence bounds.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ProblemConfig, ProblemKind};
use super::run::build_problem;
use super::worker_pool;
use crate::analysis::{run_cell, CellOutcome, CellSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub problems: Vec<ProblemConfig>,
    pub gammas: Vec<f64>,
    pub hs: Vec<usize>,
    pub horizon: usize,
    /// Horizons at which the averaged iterate is checked; the horizon when empty.
    pub checkpoints: Vec<usize>,
    pub batch: usize,
    pub channels: usize,
    pub seed: u64,
    /// Factor applied to the estimated gradient bound.
    pub inflation: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let quadratic = ProblemConfig::default();
        let logistic = ProblemConfig {
            kind: ProblemKind::Logistic,
            lambda: 0.1,
            ..ProblemConfig::default()
        };
        Self {
            problems: vec![quadratic, logistic],
            gammas: vec![0.05, 0.1, 0.5, 1.0],
            hs: vec![1, 2, 4, 8],
            horizon: 2000,
            checkpoints: Vec::new(),
            batch: 8,
            channels: 3,
            seed: 0,
            inflation: 1.5,
        }
    }
}

impl VerifyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if c.problems.is_empty() || c.gammas.is_empty() || c.hs.is_empty() || c.horizon == 0 {
            return Err(Error::Config("verification needs problems, gammas, hs and a horizon".into()));
        }
        if c.gammas.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) || c.hs.contains(&0) {
            return Err(Error::Config("gammas must lie in (0, 1] and hs be positive".into()));
        }
        if c.checkpoints.iter().any(|&t| t == 0 || t > c.horizon) {
            return Err(Error::Config("checkpoints must lie in 1..=horizon".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn spec(&self, gamma: f64, h: usize) -> CellSpec {
        let mut spec = CellSpec::new(gamma, h, self.horizon, self.seed);
        if !self.checkpoints.is_empty() {
            spec.checkpoints = self.checkpoints.clone();
        }
        spec.batch = self.batch;
        spec.channels = self.channels;
        spec.inflation = self.inflation;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub problem: ProblemKind,
    pub gamma: f64,
    pub h: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyLine {
    pub check: String,
    pub config: CellConfig,
    pub measured: f64,
    pub bound: f64,
    pub ratio: f64,
    pub pass: bool,
}

fn lines(problem: ProblemKind, outcome: &std::result::Result<CellOutcome, String>, spec: &CellSpec) -> Vec<VerifyLine> {
    let config = CellConfig {
        problem,
        gamma: spec.gamma,
        h: spec.h,
        horizon: spec.horizon,
        seed: spec.seed,
    };
    let line = |check: String, measured: f64, bound: f64, ratio: f64, pass: bool| VerifyLine {
        check,
        config: config.clone(),
        measured,
        bound,
        ratio,
        pass,
    };
    match outcome {
        Err(e) => vec![line(format!("run: {e}"), f64::NAN, f64::NAN, f64::NAN, false)],
        Ok(o) => {
            let mut out: Vec<VerifyLine> = [&o.memory, &o.local_deviation, &o.virtual_distance]
                .into_iter()
                .map(|r| line(r.check.clone(), r.measured, r.bound, r.ratio, r.passed))
                .collect();
            out.extend(
                o.convergence
                    .iter()
                    .map(|c| line(format!("convergence@{}", c.horizon), c.gap, c.bound, c.ratio, c.passed)),
            );
            out
        }
    }
}

/// Runs the matrix and writes `out/verify.jsonl`. Returns every line.
pub fn verify(config: &VerifyConfig, out: &Path) -> Result<Vec<VerifyLine>> {
    let problems = config
        .problems
        .iter()
        .map(|p| Ok((p.kind, build_problem(p, config.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, CellSpec)> = (0..problems.len())
        .flat_map(|i| {
            config
                .gammas
                .iter()
                .flat_map(move |&g| config.hs.iter().map(move |&h| (i, config.spec(g, h))))
        })
        .collect();
    let pool = worker_pool()?;
    let results: Vec<Vec<VerifyLine>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(i, spec)| {
                let (kind, problem) = &problems[*i];
                lines(*kind, &run_cell(problem, spec).map_err(|e| e.to_string()), spec)
            })
            .collect()
    });
    std::fs::create_dir_all(out)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(out.join("verify.jsonl"))?);
    let all: Vec<VerifyLine> = results.into_iter().flatten().collect();
    for l in &all {
        writeln!(file, "{}", serde_json::to_string(l)?)?;
    }
    file.flush()?;
    Ok(all)
}
