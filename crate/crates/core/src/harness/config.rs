//! Experiment configuration, loaded from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::normalize_weights;
use crate::controller::DdpgConfig;
use crate::error::{Error, Result};
use crate::federation::Participation;
use crate::netmodel::{default_channels, ChannelSpec};
use crate::problems::PartitionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub federation: FederationConfig,
    pub channels: Vec<ChannelSpec>,
    pub costs: CostConfig,
    pub budget: BudgetConfig,
    pub mechanism: MechanismConfig,
    pub ddpg: DdpgConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            federation: FederationConfig::default(),
            channels: default_channels(),
            costs: CostConfig::default(),
            budget: BudgetConfig::default(),
            mechanism: MechanismConfig::default(),
            ddpg: DdpgConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    #[default]
    Quadratic,
    LeastSquares,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Feature width; equals the model dimension except for the MLP.
    pub dim: usize,
    pub devices: usize,
    pub rows_per_device: usize,
    pub lambda: f64,
    pub noise: f64,
    pub heterogeneity: f64,
    pub curvature: [f64; 2],
    /// MLP only.
    pub classes: usize,
    pub hidden: usize,
    pub separation: f64,
    pub partition: PartitionMode,
    /// Optional labelled CSV (features then label) for the classifiers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Seed of the data; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            kind: ProblemKind::Quadratic,
            dim: 100,
            devices: 3,
            rows_per_device: 200,
            lambda: 0.0,
            noise: 1.0,
            heterogeneity: 0.5,
            curvature: [1.0, 4.0],
            classes: 3,
            hidden: 16,
            separation: 3.0,
            partition: PartitionMode::Iid,
            csv: None,
            seed: None,
        }
    }
}

/// Step-size rule. `theorem` uses `xi = 8 / mu` and, without an explicit
/// shift, the smallest admissible one for the configured plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSpec {
    Constant {
        eta: f64,
    },
    Decaying {
        xi: f64,
        a: f64,
    },
    Theorem {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Total SGD steps `T`.
    pub horizon: usize,
    /// Largest number of local steps between syncs.
    pub step_cap: usize,
    pub batch: usize,
    pub participation: Participation,
    pub lr: LrSpec,
    /// Run a theorem schedule even when its shift is below the admissible floor.
    pub force: bool,
    /// Model seconds per local step.
    pub step_time: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            step_cap: 8,
            batch: 64,
            participation: Participation::Scheduled,
            lr: LrSpec::Constant { eta: 0.01 },
            force: false,
            step_time: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Range of the per-step computation energy, J, drawn once per device.
    pub comp_energy: [f64; 2],
    /// Money per local step.
    pub comp_money: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            comp_energy: [0.05, 0.1],
            comp_money: 0.0,
        }
    }
}

/// One budget for every device, or one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetValue {
    Shared(f64),
    PerDevice(Vec<f64>),
}

impl BudgetValue {
    pub fn resolve(&self, devices: usize) -> Result<Vec<f64>> {
        let v = match self {
            BudgetValue::Shared(b) => vec![*b; devices],
            BudgetValue::PerDevice(v) if v.len() == devices => v.clone(),
            BudgetValue::PerDevice(v) => {
                return Err(Error::Config(format!("{} budgets given for {devices} devices", v.len())));
            }
        };
        if v.iter().any(|b| !(*b >= 0.0) || b.is_nan()) {
            return Err(Error::Config("budgets must be non-negative".into()));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Joules.
    pub energy: BudgetValue,
    pub money: BudgetValue,
    /// Largest number of entries per upload; the model dimension when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry_cap: Option<usize>,
    /// Reward weights of energy and money.
    pub weights: Vec<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            energy: BudgetValue::Shared(f64::INFINITY),
            money: BudgetValue::Shared(f64::INFINITY),
            entry_cap: None,
            weights: vec![0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    /// Dense single-layer uploads every `steps` local steps.
    Fedavg,
    /// Constant plan and step count.
    #[default]
    LgcFixed,
    /// One DDPG agent per device.
    LgcDdpg,
    /// Uniformly random decisions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    /// Local steps per interval for the fixed mechanisms.
    pub steps: usize,
    /// Entries per channel for `lgc-fixed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<usize>>,
    /// Share of the dimension sent by `lgc-fixed`, split evenly over the
    /// channels; ignored when `entries` is given.
    pub fraction: f64,
    /// Training episodes for `lgc-ddpg`.
    pub episodes: usize,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            kind: MechanismKind::LgcFixed,
            steps: 1,
            entries: None,
            fraction: 0.1,
            episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write a metrics row every this many steps (and after the last).
    pub metrics_every: usize,
    /// Accuracy whose first crossing is reported by sweeps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Record memory norms and deviations to `trace.json`.
    pub trace: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            metrics_every: 1,
            target_accuracy: None,
            trace: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that need no generated data.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let p = &self.problem;
        if p.devices == 0 || p.dim == 0 || p.rows_per_device == 0 {
            return fail("problem needs devices, dim and rows_per_device above zero".into());
        }
        if p.kind == ProblemKind::Logistic && p.lambda <= 0.0 {
            return fail("logistic regression needs lambda > 0".into());
        }
        if p.csv.is_some() && !matches!(p.kind, ProblemKind::Logistic | ProblemKind::Mlp) {
            return fail("csv data is only supported by the logistic and mlp problems".into());
        }
        let f = &self.federation;
        if f.horizon == 0 || f.step_cap == 0 || f.batch == 0 {
            return fail("horizon, step_cap and batch must be positive".into());
        }
        if f.batch > p.rows_per_device && p.csv.is_none() {
            return fail(format!("batch {} exceeds rows_per_device {}", f.batch, p.rows_per_device));
        }
        if !(f.step_time >= 0.0 && f.step_time.is_finite()) {
            return fail("step_time must be finite and non-negative".into());
        }
        match f.lr {
            LrSpec::Constant { eta } if !(eta > 0.0 && eta.is_finite()) => return fail("eta must be positive".into()),
            LrSpec::Decaying { xi, a } if !(xi > 0.0 && a > 0.0 && xi.is_finite() && a.is_finite()) => {
                return fail("xi and a must be positive".into());
            }
            LrSpec::Theorem { a: Some(a) } if !(a > 0.0 && a.is_finite()) => return fail("a must be positive".into()),
            _ => {}
        }
        if self.channels.is_empty() {
            return fail("at least one channel is required".into());
        }
        for ch in &self.channels {
            ch.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let [lo, hi] = self.costs.comp_energy;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) || !(self.costs.comp_money >= 0.0 && self.costs.comp_money.is_finite()) {
            return fail("computation costs must be finite, non-negative and ordered".into());
        }
        self.budget.energy.resolve(p.devices)?;
        self.budget.money.resolve(p.devices)?;
        if self.budget.weights.len() != 2 {
            return fail("weights must list energy then money".into());
        }
        normalize_weights(&self.budget.weights).map_err(|e| Error::Config(e.to_string()))?;
        let m = &self.mechanism;
        if m.steps == 0 || m.steps > f.step_cap {
            return fail(format!("steps must lie in 1..={}", f.step_cap));
        }
        if let Some(entries) = &m.entries {
            if entries.is_empty() || entries.len() > self.channels.len() {
                return fail(format!("entries must list 1..={} channels", self.channels.len()));
            }
        } else if !(m.fraction > 0.0 && m.fraction <= 1.0) {
            return fail("fraction must lie in (0, 1]".into());
        }
        if m.kind == MechanismKind::LgcDdpg {
            if m.episodes == 0 {
                return fail("lgc-ddpg needs at least one episode".into());
            }
            self.ddpg.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.output.metrics_every == 0 {
            return fail("metrics_every must be positive".into());
        }
        Ok(())
    }
}
