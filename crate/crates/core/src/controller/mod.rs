//! Per-device policies choosing local steps and per-channel entry counts.

pub mod checkpoint;
pub mod ddpg;
pub mod mlp;
pub mod optim;
pub mod replay;

pub use ddpg::{DdpgAgent, DdpgConfig};
pub use replay::{ReplayBuffer, Transition};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::budget::RoundDecision;
use crate::error::{invalid, Result};
use crate::seeding::Rng;

/// Consumption factors seen by an agent: the communication block (one per
/// resource) followed by the computation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState(pub Vec<f64>);

impl AgentState {
    pub fn new(comm: &[f64], comp: &[f64]) -> Result<Self> {
        if comm.len() != comp.len() {
            return Err(invalid("need one comm and one comp factor per resource"));
        }
        let v: Vec<f64> = comm.iter().chain(comp).copied().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("agent state must be finite"));
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Caps that shape raw actions into decisions. A raw action is
/// `[steps, entries on channel 0, ..]`, each component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub channels: usize,
    pub step_cap: usize,
    pub entry_cap: usize,
}

impl ActionSpace {
    pub fn new(channels: usize, step_cap: usize, entry_cap: usize) -> Result<Self> {
        if channels == 0 || step_cap == 0 {
            return Err(invalid("need at least one channel and a positive step cap"));
        }
        Ok(Self {
            channels,
            step_cap,
            entry_cap,
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.channels
    }

    /// Steps are rounded onto `1..=step_cap`. Each channel asks for up to
    /// `entry_cap` entries; if the total would exceed the cap the requests
    /// are scaled down, and integers are assigned by largest remainder.
    pub fn project(&self, raw: &[f64]) -> Result<RoundDecision> {
        if raw.len() != self.dim() {
            return Err(invalid(format!("raw action has {} components, expected {}", raw.len(), self.dim())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(invalid("raw action must be finite"));
        }
        let unit = |v: f64| v.clamp(0.0, 1.0);
        let steps = (1.0 + unit(raw[0]) * (self.step_cap - 1) as f64).round() as usize;
        let want: Vec<f64> = raw[1..].iter().map(|&v| unit(v) * self.entry_cap as f64).collect();
        let sum: f64 = want.iter().sum();
        let total = (sum.round() as usize).min(self.entry_cap);
        let mut entries = vec![0usize; self.channels];
        if total > 0 {
            let quotas: Vec<f64> = want.iter().map(|w| w * total as f64 / sum).collect();
            for (e, q) in entries.iter_mut().zip(&quotas) {
                *e = q.floor() as usize;
            }
            let mut order: Vec<usize> = (0..self.channels).collect();
            order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
            let short = total - entries.iter().sum::<usize>();
            for &c in order.iter().take(short) {
                entries[c] += 1;
            }
        }
        Ok(RoundDecision {
            steps: steps.clamp(1, self.step_cap),
            entries,
        })
    }

    /// A raw action that projects onto `decision` when it fits the caps.
    pub fn embed(&self, decision: &RoundDecision) -> Vec<f64> {
        let mut raw = Vec::with_capacity(self.dim());
        raw.push(if self.step_cap > 1 {
            (decision.steps.saturating_sub(1)) as f64 / (self.step_cap - 1) as f64
        } else {
            0.0
        });
        raw.extend(decision.entries.iter().map(|&d| {
            if self.entry_cap > 0 {
                d as f64 / self.entry_cap as f64
            } else {
                0.0
            }
        }));
        raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub raw: Vec<f64>,
    pub decision: RoundDecision,
}

pub trait Policy {
    fn act(&mut self, state: &AgentState, explore: bool) -> Result<Action>;

    /// Feeds back the outcome of the last action. Returns the critic loss
    /// when a training step happened.
    fn observe(&mut self, _transition: Transition) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Always the same decision.
#[derive(Debug, Clone)]
pub struct FixedPolicy {
    action: Action,
}

impl FixedPolicy {
    pub fn new(space: ActionSpace, decision: RoundDecision) -> Result<Self> {
        if decision.entries.len() != space.channels {
            return Err(invalid("fixed decision has the wrong channel count"));
        }
        Ok(Self {
            action: Action {
                raw: space.embed(&decision),
                decision,
            },
        })
    }
}

impl Policy for FixedPolicy {
    fn act(&mut self, _state: &AgentState, _explore: bool) -> Result<Action> {
        Ok(self.action.clone())
    }
}

/// Uniform raw actions.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    space: ActionSpace,
    rng: Rng,
}

impl RandomPolicy {
    pub fn new(space: ActionSpace, rng: Rng) -> Self {
        Self { space, rng }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _state: &AgentState, _explore: bool) -> Result<Action> {
        let raw: Vec<f64> = (0..self.space.dim()).map(|_| self.rng.gen::<f64>()).collect();
        let decision = self.space.project(&raw)?;
        Ok(Action { raw, decision })
    }
}

/// Running per-feature mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *s += d * (v - *m);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.m2)
            .map(|((&v, &m), &s)| {
                let var = if self.count > 1.0 { s / (self.count - 1.0) } else { 0.0 };
                ((v - m) / (var + 1e-8).sqrt()).clamp(-10.0, 10.0)
            })
            .collect()
    }
}
