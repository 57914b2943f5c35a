//! Tidy `(mechanism, x, y, seed)` series extracted from finished runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::MechanismKind;
use super::run::RunSummary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FigureKind {
    LossVsEpoch,
    AccVsEpoch,
    AccVsEnergy,
    AccVsMoney,
    DrlLoss,
    DrlReward,
}

impl FigureKind {
    pub const ALL: [FigureKind; 6] = [
        FigureKind::LossVsEpoch,
        FigureKind::AccVsEpoch,
        FigureKind::AccVsEnergy,
        FigureKind::AccVsMoney,
        FigureKind::DrlLoss,
        FigureKind::DrlReward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureKind::LossVsEpoch => "loss-vs-epoch",
            FigureKind::AccVsEpoch => "acc-vs-epoch",
            FigureKind::AccVsEnergy => "acc-vs-energy",
            FigureKind::AccVsMoney => "acc-vs-money",
            FigureKind::DrlLoss => "drl-loss",
            FigureKind::DrlReward => "drl-reward",
        }
    }

    /// Source file and `(x, y)` columns.
    fn columns(self) -> (&'static str, &'static str, &'static str) {
        match self {
            FigureKind::LossVsEpoch => ("metrics.csv", "epoch", "loss"),
            FigureKind::AccVsEpoch => ("metrics.csv", "epoch", "accuracy"),
            FigureKind::AccVsEnergy => ("metrics.csv", "energy", "accuracy"),
            FigureKind::AccVsMoney => ("metrics.csv", "money", "accuracy"),
            FigureKind::DrlLoss => ("drl.csv", "episode", "critic_loss"),
            FigureKind::DrlReward => ("drl.csv", "episode", "reward"),
        }
    }
}

impl FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown figure {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigurePoint {
    pub mechanism: String,
    pub x: f64,
    pub y: f64,
    pub seed: u64,
}

fn mechanism_name(m: MechanismKind) -> &'static str {
    match m {
        MechanismKind::Fedavg => "fedavg",
        MechanismKind::LgcFixed => "lgc-fixed",
        MechanismKind::LgcDdpg => "lgc-ddpg",
        MechanismKind::Random => "random",
    }
}

/// `runs` itself when it is a run directory, else its run subdirectories
/// in name order.
pub fn run_dirs(runs: &Path) -> Result<Vec<PathBuf>> {
    if runs.join("status.json").is_file() {
        return Ok(vec![runs.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("status.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no finished runs under {}", runs.display())));
    }
    Ok(dirs)
}

fn series(dir: &Path, kind: FigureKind) -> Result<Vec<(f64, f64)>> {
    let (file, xc, yc) = kind.columns();
    let path = dir.join(file);
    if file == "drl.csv" && !path.is_file() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(&path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no {name:?} column", path.display())))
    };
    let (xi, yi) = (col(xc)?, col(yc)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (x, y) = (&rec[xi], &rec[yi]);
        if y.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("{}: {s:?} is not a number", path.display())))
        };
        out.push((parse(x)?, parse(y)?));
    }
    if out.is_empty() && file == "metrics.csv" {
        return Err(Error::InvalidArgument(format!("{} has no {yc:?} values", path.display())));
    }
    Ok(out)
}

pub fn figure_data(runs: &Path, kind: FigureKind) -> Result<Vec<FigurePoint>> {
    let mut out = Vec::new();
    for dir in run_dirs(runs)? {
        let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join("status.json"))?)?;
        let mechanism = mechanism_name(summary.mechanism);
        out.extend(series(&dir, kind)?.into_iter().map(|(x, y)| FigurePoint {
            mechanism: mechanism.to_string(),
            x,
            y,
            seed: summary.seed,
        }));
    }
    Ok(out)
}

pub fn write_figure(path: &Path, points: &[FigurePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    if points.is_empty() {
        w.write_record(["mechanism", "x", "y", "seed"])?;
    }
    w.flush()?;
    Ok(())
}
