//! Cartesian sweeps over config overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run_experiment, RunStatus, RunSummary};
use super::worker_pool;
use crate::error::{Error, Result};

/// Overrides keyed by dotted config path, e.g. `"federation.step_cap"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            grid: BTreeMap::new(),
        }
    }
}

impl SweepGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if grid.seeds.is_empty() {
            return Err(Error::Config("a sweep needs at least one seed".into()));
        }
        if let Some((k, _)) = grid.grid.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("grid key {k:?} has no values")));
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Every combination of overrides, last key varying fastest.
    pub fn combinations(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut out = vec![Vec::new()];
        for (key, values) in &self.grid {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((key.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        out
    }
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p:?} in {path:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn apply_overrides(template: &toml::Table, overrides: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    let mut table = template.clone();
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run: String,
    pub seed: u64,
    pub overrides: Vec<(String, toml::Value)>,
    pub outcome: std::result::Result<RunSummary, String>,
}

fn describe(overrides: &[(String, toml::Value)]) -> String {
    overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Runs every (override combination, seed) pair into `out/run-NNNN` and
/// writes `out/summary.csv`. Child failures are recorded, not raised.
pub fn sweep(template: &str, grid: &SweepGrid, out: &Path) -> Result<Vec<SweepRow>> {
    let template: toml::Table = toml::from_str(template).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    let jobs: Vec<(String, PathBuf, u64, Vec<(String, toml::Value)>)> = grid
        .combinations()
        .into_iter()
        .flat_map(|o| grid.seeds.iter().map(move |&s| (o.clone(), s)))
        .enumerate()
        .map(|(i, (o, s))| {
            let name = format!("run-{i:04}");
            (name.clone(), out.join(&name), s, o)
        })
        .collect();
    let pool = worker_pool()?;
    let rows: Vec<SweepRow> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(run, dir, seed, overrides)| {
                let outcome = apply_overrides(&template, &overrides)
                    .and_then(|c| run_experiment(&c, seed, &dir))
                    .map_err(|e| e.to_string());
                SweepRow {
                    run,
                    seed,
                    overrides,
                    outcome,
                }
            })
            .collect()
    });
    write_summary(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run",
        "seed",
        "overrides",
        "status",
        "steps",
        "final_loss",
        "final_accuracy",
        "final_gap",
        "energy",
        "money",
        "energy_to_target",
        "money_to_target",
        "error",
    ])?;
    for r in rows {
        let mut rec = vec![r.run.clone(), r.seed.to_string(), describe(&r.overrides)];
        match &r.outcome {
            Ok(s) => {
                let status = match s.status {
                    RunStatus::Completed => "completed",
                    RunStatus::BudgetExhausted => "budget_exhausted",
                };
                rec.extend([
                    status.to_string(),
                    s.steps.to_string(),
                    s.final_loss.to_string(),
                    opt(s.final_accuracy),
                    opt(s.final_gap),
                    s.energy.to_string(),
                    s.money.to_string(),
                    opt(s.energy_to_target),
                    opt(s.money_to_target),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.push("error".into());
                rec.extend(std::iter::repeat_n(String::new(), 8));
                rec.push(e.clone());
            }
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_are_cartesian() {
        let g = SweepGrid::from_toml("seeds = [1, 2]\n[grid]\n\"mechanism.steps\" = [1, 2]\n\"mechanism.fraction\" = [0.1, 0.2, 0.5]\n").unwrap();
        assert_eq!(g.combinations().len(), 6);
        assert_eq!(SweepGrid::default().combinations(), vec![Vec::new()]);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let t: toml::Table = toml::from_str("[federation]\nhorizon = 10\n").unwrap();
        let c = apply_overrides(&t, &[("federation.step_cap".into(), toml::Value::Integer(3))]).unwrap();
        assert_eq!(c.federation.horizon, 10);
        assert_eq!(c.federation.step_cap, 3);
        assert!(apply_overrides(&t, &[("federation.nope".into(), toml::Value::Integer(3))]).is_err());
    }
}
