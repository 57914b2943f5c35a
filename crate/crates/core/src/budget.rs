//! Resource budgets, per-round spend and the utility/reward signals used by
//! the controllers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Denominator floor for utilities.
pub const SPEND_FLOOR: f64 = 1e-12;
/// Utilities smaller than this in magnitude contribute a zero ratio.
pub const UTILITY_FLOOR: f64 = 1e-12;

/// Local steps and per-channel entry counts for one device interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundDecision {
    pub steps: usize,
    pub entries: Vec<usize>,
}

impl RoundDecision {
    pub fn total_entries(&self) -> usize {
        self.entries.iter().sum()
    }
}

/// Unit costs of one device for every resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFactors {
    /// Per local step, indexed by resource.
    pub comp: Vec<f64>,
    /// Per transmitted entry, indexed by resource then channel.
    pub comm: Vec<Vec<f64>>,
    /// Per upload regardless of entry count (layer headers), by resource.
    pub fixed: Vec<f64>,
}

impl CostFactors {
    pub fn resources(&self) -> usize {
        self.comp.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let r = self.comp.len();
        if self.comm.len() != r || self.fixed.len() != r || self.comm.iter().any(|c| c.len() != channels) {
            return Err(invalid("cost factors are not shaped resources x channels"));
        }
        let all = self.comp.iter().chain(self.comm.iter().flatten()).chain(&self.fixed);
        if all.clone().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("cost factors must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Spend per resource: `comp * H + sum_n comm_n * D_n + fixed`.
pub fn round_spend(decision: &RoundDecision, costs: &CostFactors) -> Result<Vec<f64>> {
    costs.validate(decision.entries.len())?;
    Ok((0..costs.resources())
        .map(|r| {
            let comm: f64 = costs.comm[r].iter().zip(&decision.entries).map(|(c, &d)| c * d as f64).sum();
            costs.comp[r] * decision.steps as f64 + comm + costs.fixed[r]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    NoSteps,
    StepCap { requested: usize, cap: usize },
    EntryCap { requested: usize, cap: usize },
    Budget { resource: String, projected: f64, budget: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NoSteps => write!(f, "at least one local step is required"),
            Violation::StepCap { requested, cap } => write!(f, "{requested} local steps exceed the cap of {cap}"),
            Violation::EntryCap { requested, cap } => write!(f, "{requested} entries exceed the cap of {cap}"),
            Violation::Budget { resource, projected, budget } => {
                write!(f, "projected {resource} spend {projected} exceeds budget {budget}")
            }
        }
    }
}

/// Cumulative spend of every device against its budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceLedger {
    resources: Vec<String>,
    budgets: Vec<Vec<f64>>,
    spent: Vec<Vec<f64>>,
    entry_cap: usize,
    step_cap: usize,
}

impl ResourceLedger {
    /// `budgets[m][r]`; use `f64::INFINITY` for an unconstrained resource.
    pub fn new(resources: Vec<String>, budgets: Vec<Vec<f64>>, entry_cap: usize, step_cap: usize) -> Result<Self> {
        if budgets.iter().any(|b| b.len() != resources.len()) {
            return Err(invalid("every device needs one budget per resource"));
        }
        if budgets.iter().flatten().any(|b| b.is_nan() || *b < 0.0) {
            return Err(invalid("budgets must be non-negative"));
        }
        if step_cap == 0 {
            return Err(invalid("step cap must be at least 1"));
        }
        let spent = vec![vec![0.0; resources.len()]; budgets.len()];
        Ok(Self {
            resources,
            budgets,
            spent,
            entry_cap,
            step_cap,
        })
    }

    pub fn resources(&self) -> &[String] {
        &self.resources
    }

    pub fn devices(&self) -> usize {
        self.budgets.len()
    }

    pub fn entry_cap(&self) -> usize {
        self.entry_cap
    }

    pub fn step_cap(&self) -> usize {
        self.step_cap
    }

    pub fn budget(&self, m: usize) -> &[f64] {
        &self.budgets[m]
    }

    pub fn spent(&self, m: usize) -> &[f64] {
        &self.spent[m]
    }

    pub fn remaining(&self, m: usize, r: usize) -> f64 {
        self.budgets[m][r] - self.spent[m][r]
    }

    /// Cap rules first, then whether `projected` still fits every budget of
    /// device `m`. Violations are listed in that order.
    pub fn check(&self, m: usize, decision: &RoundDecision, projected: &[f64]) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if decision.steps == 0 {
            out.push(Violation::NoSteps);
        }
        if decision.steps > self.step_cap {
            out.push(Violation::StepCap {
                requested: decision.steps,
                cap: self.step_cap,
            });
        }
        if decision.total_entries() > self.entry_cap {
            out.push(Violation::EntryCap {
                requested: decision.total_entries(),
                cap: self.entry_cap,
            });
        }
        for (r, name) in self.resources.iter().enumerate() {
            let after = self.spent[m][r] + projected.get(r).copied().unwrap_or(0.0);
            if after > self.budgets[m][r] {
                out.push(Violation::Budget {
                    resource: name.clone(),
                    projected: after,
                    budget: self.budgets[m][r],
                });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Whether adding `amount` to device `m` keeps every budget.
    pub fn fits(&self, m: usize, amount: &[f64]) -> bool {
        amount.iter().enumerate().all(|(r, a)| self.spent[m][r] + a <= self.budgets[m][r])
    }

    pub fn charge(&mut self, m: usize, amount: &[f64]) {
        for (s, a) in self.spent[m].iter_mut().zip(amount) {
            *s += a;
        }
    }

    pub fn within_budget(&self) -> bool {
        (0..self.devices()).all(|m| self.fits(m, &vec![0.0; self.resources.len()]))
    }
}

/// Loss improvement per unit of spend; positive when the loss went down.
pub fn utility(loss_prev: f64, loss_now: f64, spend: f64) -> f64 {
    (loss_prev - loss_now) / spend.max(SPEND_FLOOR)
}

/// Utilities of one device interval, one per resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySnapshot {
    pub utilities: Vec<f64>,
    pub loss_delta: f64,
    pub spend: Vec<f64>,
}

impl UtilitySnapshot {
    pub fn new(loss_prev: f64, loss_now: f64, spend: Vec<f64>) -> Self {
        Self {
            utilities: spend.iter().map(|&e| utility(loss_prev, loss_now, e)).collect(),
            loss_delta: loss_prev - loss_now,
            spend,
        }
    }
}

/// Weighted sum of utility ratios `U_next / U_prev`.
pub fn reward(prev: &UtilitySnapshot, next: &UtilitySnapshot, weights: &[f64]) -> f64 {
    prev.utilities
        .iter()
        .zip(&next.utilities)
        .zip(weights)
        .map(|((&u0, &u1), &a)| if u0.abs() < UTILITY_FLOOR { 0.0 } else { a * u1 / u0 })
        .sum()
}

/// Rescales weights to sum to one.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| *w < 0.0) || !(total > 0.0) {
        return Err(invalid("reward weights must be non-negative with a positive sum"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}
