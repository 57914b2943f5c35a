use serde::{Deserialize, Serialize};

use super::{lr_at, mean_of, server_aggregate, DeviceState, IterateAverager, LrSchedule, ServerState, SyncSchedule};
use crate::error::{invalid, Error, Result};
use crate::problems::{MinibatchOracle, Problem};
use crate::seeding::{stream, Rng, Stream};
use crate::sparsifier::{AllocationPlan, LayeredUpdate};

/// Which syncs the server folds into the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Participation {
    /// Whatever arrives, divided by the full population.
    #[default]
    Scheduled,
    /// Only steps at which every device syncs.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub lr: LrSchedule,
    pub batch: usize,
    pub horizon: usize,
    pub gap_bound: usize,
    pub participation: Participation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken; the clock now reads `t + 1`.
    pub t: usize,
    pub eta: f64,
    /// Uploads in ascending device order.
    pub updates: Vec<(usize, LayeredUpdate)>,
    pub aggregated: bool,
}

/// One federated run advanced a single SGD step at a time.
#[derive(Debug)]
pub struct Simulation<'p> {
    problem: &'p Problem,
    oracle: MinibatchOracle,
    config: SimConfig,
    devices: Vec<DeviceState>,
    server: ServerState,
    plans: Vec<AllocationPlan>,
    samplers: Vec<Rng>,
    grads: Vec<Vec<f64>>,
    averager: IterateAverager,
    pending: Option<(f64, Vec<(usize, LayeredUpdate)>)>,
    t: usize,
}

impl<'p> Simulation<'p> {
    /// `schedules` may be complete or open; open ones are extended through
    /// [`decide`](Self::decide).
    pub fn new(
        problem: &'p Problem,
        config: SimConfig,
        init: Vec<f64>,
        schedules: Vec<SyncSchedule>,
        plans: Vec<AllocationPlan>,
    ) -> Result<Self> {
        let m = problem.device_count();
        let dim = problem.dim();
        if init.len() != dim {
            return Err(invalid(format!("initial point has dimension {}, expected {dim}", init.len())));
        }
        if schedules.len() != m || plans.len() != m {
            return Err(invalid(format!("need one schedule and one plan for each of {m} devices")));
        }
        for s in &schedules {
            if s.horizon() != config.horizon || s.gap_bound() > config.gap_bound {
                return Err(invalid("schedule horizon or gap bound disagrees with the run"));
            }
        }
        for p in &plans {
            p.validate(dim)?;
        }
        let oracle = MinibatchOracle::new(config.batch)?;
        for k in 0..m {
            if problem.dataset(k)?.len() < config.batch {
                return Err(invalid(format!("device {k} holds fewer rows than the batch size")));
            }
        }
        let devices = schedules
            .into_iter()
            .enumerate()
            .map(|(id, s)| DeviceState::new(id, init.clone(), s))
            .collect();
        let samplers = (0..m).map(|k| stream(config.seed, Stream::Sampler, k as u64)).collect();
        Ok(Self {
            problem,
            oracle,
            averager: IterateAverager::new(config.lr.shift().unwrap_or(1.0), dim),
            devices,
            server: ServerState::new(init),
            plans,
            samplers,
            grads: vec![vec![0.0; dim]; m],
            pending: None,
            t: 0,
            config,
        })
    }

    pub fn problem(&self) -> &'p Problem {
        self.problem
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn finished(&self) -> bool {
        self.t >= self.config.horizon
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn global(&self) -> &[f64] {
        &self.server.global
    }

    pub fn plan(&self, m: usize) -> &AllocationPlan {
        &self.plans[m]
    }

    /// Batch gradients of the last step, per device.
    pub fn last_gradients(&self) -> &[Vec<f64>] {
        &self.grads
    }

    /// Mean of the device iterates at the current time.
    pub fn mean_local(&self) -> Vec<f64> {
        mean_of(self.devices.iter().map(|d| d.local.as_slice()))
    }

    /// `(a+t)^2`-weighted average of `mean_local` over the steps taken.
    pub fn averaged_iterate(&self) -> Result<Vec<f64>> {
        self.averager.mean()
    }

    /// Whether device `m` needs a new decision before the next step.
    pub fn needs_decision(&self, m: usize) -> bool {
        !self.finished() && self.devices[m].schedule.last() <= self.t
    }

    /// Schedules the next sync of device `m` after `steps` more steps (cut
    /// at the horizon) and sets its plan. Returns the steps granted.
    pub fn decide(&mut self, m: usize, steps: usize, plan: AllocationPlan) -> Result<usize> {
        if !self.needs_decision(m) {
            return Err(Error::ProtocolViolation(format!("device {m} already has a pending sync")));
        }
        if steps == 0 {
            return Err(invalid("at least one local step is required"));
        }
        plan.validate(self.problem.dim())?;
        let next = (self.t + steps).min(self.config.horizon);
        self.devices[m].schedule.push(next)?;
        self.plans[m] = plan;
        Ok(next - self.t)
    }

    /// Takes the local step on every device and builds the uploads of the
    /// devices that sync now. The server is untouched until
    /// [`finish_step`](Self::finish_step).
    pub fn begin_step(&mut self) -> Result<&[(usize, LayeredUpdate)]> {
        if self.pending.is_some() {
            return Err(Error::ProtocolViolation("step already in progress".into()));
        }
        if self.finished() {
            return Err(Error::ProtocolViolation("run is past its horizon".into()));
        }
        if let Some(m) = (0..self.devices.len()).find(|&m| self.devices[m].schedule.last() <= self.t) {
            return Err(Error::Precondition(format!("device {m} has no sync scheduled")));
        }
        self.averager.push(&self.mean_local());
        let eta = lr_at(&self.config.lr, self.t);
        let round = self.t + 1;
        let mut updates = Vec::new();
        for (m, dev) in self.devices.iter_mut().enumerate() {
            let size = self.problem.dataset(m)?.len();
            let rows = self.oracle.sample_rows(size, &mut self.samplers[m])?;
            let g = self.problem.batch_gradient(m, &dev.local, &rows)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of device {m} at step {}", self.t)));
            }
            dev.local_step(&g, eta)?;
            self.grads[m] = g;
            if dev.schedule.contains(round) {
                updates.push((m, dev.make_update(round, &self.plans[m])?));
            }
        }
        self.pending = Some((eta, updates));
        Ok(&self.pending.as_ref().expect("just set").1)
    }

    /// Aggregates the pending uploads and broadcasts to the devices that
    /// synced.
    pub fn finish_step(&mut self) -> Result<StepReport> {
        let (eta, updates) = self
            .pending
            .take()
            .ok_or_else(|| Error::ProtocolViolation("no step in progress".into()))?;
        let population = self.devices.len();
        let aggregated = match self.config.participation {
            Participation::Scheduled => !updates.is_empty(),
            Participation::All => updates.len() == population,
        };
        if aggregated {
            let refs: Vec<&LayeredUpdate> = updates.iter().map(|(_, u)| u).collect();
            server_aggregate(&mut self.server, &refs, population)?;
        }
        for (m, _) in &updates {
            self.devices[*m].apply_sync(&self.server.global)?;
        }
        let t = self.t;
        self.t += 1;
        self.server.round = self.t;
        Ok(StepReport {
            t,
            eta,
            updates,
            aggregated,
        })
    }

    pub fn step(&mut self) -> Result<StepReport> {
        self.begin_step()?;
        self.finish_step()
    }
}
