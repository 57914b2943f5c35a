//! Single runs: environment construction, the step loop shared by every
//! mechanism, and the files a run leaves behind.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LrSpec, MechanismKind, ProblemConfig, ProblemKind};
use crate::analysis::{even_plan, RunTrace, RunTracer};
use crate::budget::{normalize_weights, reward, round_spend, CostFactors, ResourceLedger, RoundDecision, UtilitySnapshot, Violation};
use crate::controller::{ActionSpace, AgentState, DdpgAgent, FixedPolicy, Policy, RandomPolicy, Transition};
use crate::error::{Error, Result};
use crate::federation::{theorem_shift_floor, LrSchedule, SimConfig, Simulation, SyncSchedule};
use crate::netmodel::{transmit, ChannelSpec, BYTES_PER_MB};
use crate::problems::{
    gaussian_blobs, partition_data, synthetic_least_squares, synthetic_logistic, synthetic_quadratic, Dataset, LossKind,
    Problem, SyntheticSpec,
};
use crate::seeding::{stream, Stream};
use crate::sparsifier::AllocationPlan;
use crate::wire::{ENTRY_BYTES, HEADER_BYTES};

pub const RESOURCES: [&str; 2] = ["energy", "money"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    BudgetExhausted,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Completed => 0,
            RunStatus::BudgetExhausted => 2,
        }
    }
}

/// Builds the configured problem; data is keyed by `problem.seed` or else
/// the run seed.
pub fn build_problem(config: &ProblemConfig, seed: u64) -> Result<Problem> {
    let seed = config.seed.unwrap_or(seed);
    let mut rng = stream(seed, Stream::Data, 0);
    let spec = SyntheticSpec {
        dim: config.dim,
        devices: config.devices,
        rows_per_device: config.rows_per_device,
        lambda: config.lambda,
        noise: config.noise,
        heterogeneity: config.heterogeneity,
        curvature: config.curvature,
    };
    let split = |data: &Dataset| partition_data(data, config.devices, config.partition, &mut stream(seed, Stream::Partition, 0));
    match (config.kind, &config.csv) {
        (ProblemKind::Quadratic, _) => synthetic_quadratic(&spec, &mut rng),
        (ProblemKind::LeastSquares, _) => synthetic_least_squares(&spec, &mut rng),
        (ProblemKind::Logistic, None) => synthetic_logistic(&spec, &mut rng),
        (ProblemKind::Logistic, Some(path)) => Problem::new(LossKind::Logistic, config.lambda, split(&Dataset::read_csv(path)?)?),
        (ProblemKind::Mlp, source) => {
            let data = match source {
                Some(path) => Dataset::read_csv(path)?,
                None => gaussian_blobs(config.classes, config.dim, config.devices * config.rows_per_device, config.separation, &mut rng)?,
            };
            let kind = LossKind::Mlp {
                hidden: config.hidden,
                classes: config.classes,
            };
            Problem::new(kind, config.lambda, split(&data)?)
        }
    }
}

/// A configured problem with its costs, budgets and step sizes resolved.
#[derive(Debug)]
pub struct Environment {
    config: ExperimentConfig,
    problem: Problem,
    init: Vec<f64>,
    lr: LrSchedule,
    entry_cap: usize,
    budgets: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// Per device and resource, per local step.
    comp: Vec<Vec<f64>>,
    /// Decision of the fixed mechanisms.
    fixed: Option<RoundDecision>,
}

impl Environment {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        let problem = build_problem(&config.problem, seed)?;
        let dim = problem.dim();
        let devices = problem.device_count();
        if let Some(m) = (0..devices).find(|&m| problem.devices()[m].len() < config.federation.batch) {
            return Err(Error::Config(format!("device {m} holds fewer rows than the batch size")));
        }
        let entry_cap = config.budget.entry_cap.unwrap_or(dim);
        if entry_cap == 0 || entry_cap > dim {
            return Err(Error::Config(format!("entry_cap must lie in 1..={dim}")));
        }
        config.budget.entry_cap = Some(entry_cap);
        let channels = config.channels.len();
        let mech = &mut config.mechanism;
        let fixed = match mech.kind {
            MechanismKind::Fedavg => Some(vec![dim]),
            MechanismKind::LgcFixed => {
                let entries = match &mech.entries {
                    Some(e) => e.clone(),
                    None => {
                        let k = ((mech.fraction * dim as f64).round() as usize).clamp(1, dim);
                        even_plan(k, channels)?.k().to_vec()
                    }
                };
                mech.entries = Some(entries.clone());
                Some(entries)
            }
            MechanismKind::LgcDdpg | MechanismKind::Random => None,
        }
        .map(|entries| RoundDecision {
            steps: mech.steps,
            entries,
        });
        if let Some(d) = &fixed {
            if d.total_entries() > entry_cap {
                return Err(Error::Config(format!("plan sends {} entries, above the cap {entry_cap}", d.total_entries())));
            }
        }
        let lr = resolve_lr(&mut config, &problem, fixed.as_ref())?;
        let budgets = {
            let energy = config.budget.energy.resolve(devices)?;
            let money = config.budget.money.resolve(devices)?;
            (0..devices).map(|m| vec![energy[m], money[m]]).collect()
        };
        let weights = normalize_weights(&config.budget.weights)?;
        let cost_seed = config.problem.seed.unwrap_or(seed);
        let [lo, hi] = config.costs.comp_energy;
        let comp = (0..devices)
            .map(|m| {
                let u: f64 = stream(cost_seed, Stream::CompCost, m as u64).gen();
                vec![lo + (hi - lo) * u, config.costs.comp_money]
            })
            .collect();
        let init = problem.initial_point(&mut stream(seed, Stream::Init, 0));
        Ok(Self {
            config,
            problem,
            init,
            lr,
            entry_cap,
            budgets,
            weights,
            comp,
            fixed,
        })
    }

    /// The configuration with every default and derived value filled in.
    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn lr(&self) -> LrSchedule {
        self.lr
    }

    pub fn entry_cap(&self) -> usize {
        self.entry_cap
    }

    pub fn budgets(&self) -> &[Vec<f64>] {
        &self.budgets
    }

    pub fn comp(&self, m: usize) -> &[f64] {
        &self.comp[m]
    }

    pub fn fixed_decision(&self) -> Option<&RoundDecision> {
        self.fixed.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        2 * RESOURCES.len()
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        let channels = match &self.fixed {
            Some(d) => d.entries.len(),
            None => self.config.channels.len(),
        };
        ActionSpace::new(channels, self.config.federation.step_cap, self.entry_cap)
    }

    /// Per-entry upload costs at the energy ceiling plus one header per
    /// layer, for uploads over the first `layers` channels.
    pub fn projection_costs(&self, m: usize, layers: usize) -> CostFactors {
        let channels = &self.config.channels[..layers];
        let per_mb = |ch: &ChannelSpec| [ch.energy_ceiling(), ch.price];
        let entry = ENTRY_BYTES as f64 / BYTES_PER_MB;
        let header = HEADER_BYTES as f64 / BYTES_PER_MB;
        CostFactors {
            comp: self.comp[m].clone(),
            comm: (0..RESOURCES.len())
                .map(|r| channels.iter().map(|ch| entry * per_mb(ch)[r]).collect())
                .collect(),
            fixed: (0..RESOURCES.len())
                .map(|r| channels.iter().map(|ch| header * per_mb(ch)[r]).sum())
                .collect(),
        }
    }

    pub fn fixed_policies(&self) -> Result<Vec<FixedPolicy>> {
        let decision = self
            .fixed
            .clone()
            .ok_or_else(|| Error::Config("mechanism has no fixed decision".into()))?;
        (0..self.problem.device_count())
            .map(|_| FixedPolicy::new(self.action_space()?, decision.clone()))
            .collect()
    }

    pub fn random_policies(&self, seed: u64) -> Result<Vec<RandomPolicy>> {
        (0..self.problem.device_count())
            .map(|m| Ok(RandomPolicy::new(self.action_space()?, stream(seed, Stream::Controller, m as u64))))
            .collect()
    }

    pub fn ddpg_agents(&self, seed: u64) -> Result<Vec<DdpgAgent>> {
        (0..self.problem.device_count())
            .map(|m| {
                DdpgAgent::new(
                    self.state_dim(),
                    self.action_space()?,
                    self.config.ddpg.clone(),
                    stream(seed, Stream::Controller, m as u64),
                )
            })
            .collect()
    }
}

fn resolve_lr(config: &mut ExperimentConfig, problem: &Problem, fixed: Option<&RoundDecision>) -> Result<LrSchedule> {
    let fed = &mut config.federation;
    match fed.lr {
        LrSpec::Constant { eta } => LrSchedule::constant(eta),
        LrSpec::Decaying { xi, a } => LrSchedule::decaying(xi, a),
        LrSpec::Theorem { a } => {
            let curv = problem
                .curvature()
                .filter(|c| c.mu > 0.0)
                .ok_or_else(|| Error::Config("theorem step sizes need a strongly convex problem".into()))?;
            // Controllers may pick any plan, so they are held to the sparsest one.
            let entries = fixed.map_or(1, |d| d.total_entries().max(1));
            let gamma = entries as f64 / problem.dim() as f64;
            let floor = theorem_shift_floor(fed.step_cap, gamma, curv.kappa());
            let a = match a {
                Some(a) if a <= floor && !fed.force => {
                    return Err(Error::Config(format!(
                        "shift a = {a} is not above the admissible floor {floor}; set force = true to run anyway"
                    )));
                }
                Some(a) => a,
                None => floor.floor() + 1.0,
            };
            fed.lr = LrSpec::Theorem { a: Some(a) };
            LrSchedule::theorem(curv.mu, a)
        }
    }
}

/// Per-device columns of a metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceColumns {
    /// Local steps of the current interval.
    pub steps: usize,
    /// Cumulative uplink bytes per channel.
    pub bytes: Vec<u64>,
    pub energy: f64,
    pub money: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Steps completed.
    pub epoch: usize,
    /// Model seconds: compute time plus the slowest upload of each step.
    pub time: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub gap: Option<f64>,
    pub energy: f64,
    pub money: f64,
    pub bytes: u64,
    pub uploads: usize,
    pub devices: Vec<DeviceColumns>,
}

pub fn metrics_header(devices: usize, channels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "time", "loss", "accuracy", "gap", "energy", "money", "bytes", "uploads"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in 0..devices {
        h.push(format!("steps_{m}"));
        h.extend((0..channels).map(|c| format!("bytes_{m}_{c}")));
        h.push(format!("energy_{m}"));
        h.push(format!("money_{m}"));
    }
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.time.to_string(),
            self.loss.to_string(),
            opt(self.accuracy),
            opt(self.gap),
            self.energy.to_string(),
            self.money.to_string(),
            self.bytes.to_string(),
            self.uploads.to_string(),
        ];
        for d in &self.devices {
            r.push(d.steps.to_string());
            r.extend(d.bytes.iter().map(|b| b.to_string()));
            r.push(d.energy.to_string());
            r.push(d.money.to_string());
        }
        r
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], devices: usize, channels: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metrics_header(devices, channels))?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    pub seed: u64,
    /// Add exploration noise to controller actions.
    pub explore: bool,
    /// Feed transitions back to the policies.
    pub learn: bool,
    /// Collect metrics rows and the verification trace.
    pub record: bool,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub status: RunStatus,
    pub steps: usize,
    pub rows: Vec<MetricsRow>,
    pub model: Vec<f64>,
    /// Ledger per device and resource.
    pub spent: Vec<Vec<f64>>,
    pub bytes: u64,
    pub uploads: usize,
    /// Per device: sum of clipped rewards and number of decisions.
    pub returns: Vec<f64>,
    pub decisions: Vec<usize>,
    /// Mean critic loss over the training steps taken, if any.
    pub critic_loss: Option<f64>,
    pub trace: Option<RunTrace>,
}

impl Episode {
    /// Mean return over devices.
    pub fn reward(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }
}

/// Interval in progress on one device.
#[derive(Debug, Clone)]
struct Interval {
    state: AgentState,
    raw: Vec<f64>,
    loss_start: f64,
    comm: Vec<f64>,
    comp: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct DeviceBook {
    interval: Option<Interval>,
    previous: Option<UtilitySnapshot>,
    /// Completed interval awaiting its successor state.
    held: Option<(AgentState, Vec<f64>, f64)>,
    /// Cumulative spend split into upload and compute.
    comm_total: Vec<f64>,
    comp_total: Vec<f64>,
    bytes: Vec<u64>,
    steps: usize,
}

/// Runs one episode of the configured federation driven by `policies`.
pub fn run_episode<P: Policy>(env: &Environment, policies: &mut [P], opts: EpisodeOptions) -> Result<Episode> {
    let cfg = &env.config;
    let fed = &cfg.federation;
    let problem = &env.problem;
    let devices = problem.device_count();
    let channels = cfg.channels.len();
    if policies.len() != devices {
        return Err(Error::InvalidArgument(format!("{} policies for {devices} devices", policies.len())));
    }
    let sim_config = SimConfig {
        lr: env.lr,
        batch: fed.batch,
        horizon: fed.horizon,
        gap_bound: fed.step_cap,
        participation: fed.participation,
        seed: opts.seed,
    };
    let schedules = (0..devices)
        .map(|_| SyncSchedule::open(fed.horizon, fed.step_cap))
        .collect::<Result<Vec<_>>>()?;
    let placeholder = AllocationPlan::new(vec![0])?;
    let mut sim = Simulation::new(problem, sim_config, env.init.clone(), schedules, vec![placeholder; devices])?;
    let mut tracer = (opts.record && cfg.output.trace).then(|| RunTracer::new(&sim, fed.horizon));
    let resources: Vec<String> = RESOURCES.iter().map(|s| s.to_string()).collect();
    let mut ledger = ResourceLedger::new(resources, env.budgets.clone(), env.entry_cap, fed.step_cap)?;
    let mut chan_rngs: Vec<_> = (0..devices).map(|m| stream(opts.seed, Stream::Channel, m as u64)).collect();
    let mut books: Vec<DeviceBook> = (0..devices)
        .map(|_| DeviceBook {
            comm_total: vec![0.0; RESOURCES.len()],
            comp_total: vec![0.0; RESOURCES.len()],
            bytes: vec![0; channels],
            ..DeviceBook::default()
        })
        .collect();
    let mut returns = vec![0.0; devices];
    let mut decisions = vec![0usize; devices];
    let mut losses = Vec::new();
    let mut rows = Vec::new();
    let (mut time, mut bytes, mut uploads) = (0.0f64, 0u64, 0usize);
    let mut status = RunStatus::Completed;
    let clip = cfg.ddpg.reward_clip;

    // Consumption so far as a share of each budget, upload block first.
    let state_of = |book: &DeviceBook, m: usize| {
        let share = |spent: &[f64]| -> Vec<f64> {
            spent
                .iter()
                .zip(&env.budgets[m])
                .map(|(s, b)| if b.is_finite() && *b > 0.0 { s / b } else { *s })
                .collect()
        };
        AgentState::new(&share(&book.comm_total), &share(&book.comp_total))
    };
    let row = |sim: &Simulation<'_>, ledger: &ResourceLedger, books: &[DeviceBook], time: f64, bytes: u64, uploads: usize| -> Result<MetricsRow> {
        let w = sim.global();
        let loss = problem.loss(w)?;
        Ok(MetricsRow {
            epoch: sim.t(),
            time,
            loss,
            accuracy: problem.accuracy(w)?,
            gap: problem.optimum().map(|o| loss - o.f),
            energy: (0..devices).map(|m| ledger.spent(m)[0]).sum(),
            money: (0..devices).map(|m| ledger.spent(m)[1]).sum(),
            bytes,
            uploads,
            devices: books
                .iter()
                .enumerate()
                .map(|(m, b)| DeviceColumns {
                    steps: b.steps,
                    bytes: b.bytes.clone(),
                    energy: ledger.spent(m)[0],
                    money: ledger.spent(m)[1],
                })
                .collect(),
        })
    };
    if opts.record {
        rows.push(row(&sim, &ledger, &books, time, bytes, uploads)?);
    }

    'run: while !sim.finished() {
        for m in 0..devices {
            if !sim.needs_decision(m) {
                continue;
            }
            let state = state_of(&books[m], m)?;
            if let Some((s, a, r)) = books[m].held.take() {
                if opts.learn {
                    let t = Transition {
                        state: s.0,
                        action: a,
                        reward: r,
                        next_state: state.0.clone(),
                        terminal: false,
                    };
                    losses.extend(policies[m].observe(t)?);
                }
            }
            let action = policies[m].act(&state, opts.explore)?;
            let decision = RoundDecision {
                steps: action.decision.steps.min(fed.horizon - sim.t()),
                entries: action.decision.entries.clone(),
            };
            let projected = round_spend(&decision, &env.projection_costs(m, decision.entries.len()))?;
            if let Err(v) = ledger.check(m, &decision, &projected) {
                if v.iter().all(|v| matches!(v, Violation::Budget { .. })) {
                    status = RunStatus::BudgetExhausted;
                    break 'run;
                }
                let list: Vec<String> = v.iter().map(|v| v.to_string()).collect();
                return Err(Error::Precondition(format!("device {m} decision rejected: {}", list.join("; "))));
            }
            sim.decide(m, decision.steps, AllocationPlan::new(decision.entries.clone())?)?;
            books[m].steps = decision.steps;
            books[m].interval = Some(Interval {
                state,
                raw: action.raw,
                loss_start: problem.device_loss(m, sim.global())?,
                comm: vec![0.0; RESOURCES.len()],
                comp: vec![0.0; RESOURCES.len()],
            });
            decisions[m] += 1;
        }

        let updates = sim.begin_step()?.to_vec();
        let mut comm = vec![vec![0.0; RESOURCES.len()]; devices];
        let mut transfer = 0.0f64;
        let mut receipts = Vec::with_capacity(updates.len());
        for (m, update) in &updates {
            let receipt = transmit(update, &cfg.channels, &mut chan_rngs[*m])?;
            comm[*m] = vec![receipt.total_energy(), receipt.total_money()];
            transfer = transfer.max(receipt.transfer_time);
            receipts.push((*m, receipt));
        }
        let amounts: Vec<Vec<f64>> = (0..devices)
            .map(|m| env.comp[m].iter().zip(&comm[m]).map(|(a, b)| a + b).collect())
            .collect();
        if (0..devices).any(|m| !ledger.fits(m, &amounts[m])) {
            status = RunStatus::BudgetExhausted;
            break 'run;
        }
        for m in 0..devices {
            ledger.charge(m, &amounts[m]);
            let book = &mut books[m];
            for r in 0..RESOURCES.len() {
                book.comp_total[r] += env.comp[m][r];
                book.comm_total[r] += comm[m][r];
            }
            if let Some(iv) = book.interval.as_mut() {
                for r in 0..RESOURCES.len() {
                    iv.comp[r] += env.comp[m][r];
                    iv.comm[r] += comm[m][r];
                }
            }
        }
        for (m, receipt) in &receipts {
            for (acc, b) in books[*m].bytes.iter_mut().zip(&receipt.bytes) {
                *acc += b;
            }
            bytes += receipt.total_bytes();
            uploads += 1;
        }
        time += fed.step_time + transfer;

        let report = sim.finish_step()?;
        if let Some(tr) = tracer.as_mut() {
            tr.observe(&sim, &report)?;
        }
        for (m, _) in &report.updates {
            let book = &mut books[*m];
            let Some(iv) = book.interval.take() else {
                continue;
            };
            let now = problem.device_loss(*m, sim.global())?;
            let spend: Vec<f64> = iv.comm.iter().zip(&iv.comp).map(|(a, b)| a + b).collect();
            let snap = UtilitySnapshot::new(iv.loss_start, now, spend);
            if let Some(prev) = &book.previous {
                let r = reward(prev, &snap, &env.weights).clamp(-clip, clip);
                returns[*m] += r;
                book.held = Some((iv.state, iv.raw, r));
            }
            book.previous = Some(snap);
        }
        if opts.record && (sim.t() % cfg.output.metrics_every == 0 || sim.finished()) {
            rows.push(row(&sim, &ledger, &books, time, bytes, uploads)?);
        }
    }

    if opts.record && rows.last().map(|r| r.epoch) != Some(sim.t()) {
        rows.push(row(&sim, &ledger, &books, time, bytes, uploads)?);
    }
    if opts.learn {
        for m in 0..devices {
            if let Some((s, a, r)) = books[m].held.take() {
                let next = state_of(&books[m], m)?;
                let t = Transition {
                    state: s.0,
                    action: a,
                    reward: r,
                    next_state: next.0,
                    terminal: true,
                };
                losses.extend(policies[m].observe(t)?);
            }
        }
    }
    let trace = tracer.map(|t| t.finish(&sim).0);
    Ok(Episode {
        status,
        steps: sim.t(),
        rows,
        model: sim.global().to_vec(),
        spent: (0..devices).map(|m| ledger.spent(m).to_vec()).collect(),
        bytes,
        uploads,
        returns,
        decisions,
        critic_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        trace,
    })
}

/// Seed of training episode `e` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    stream(seed, Stream::Controller, (1u64 << 32) | e as u64).gen()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub episode: usize,
    pub reward: f64,
    pub critic_loss: Option<f64>,
    pub steps: usize,
    pub decisions: usize,
    pub status: RunStatus,
}

fn stat(e: usize, ep: &Episode) -> EpisodeStat {
    EpisodeStat {
        episode: e,
        reward: ep.reward(),
        critic_loss: ep.critic_loss,
        steps: ep.steps,
        decisions: ep.decisions.iter().sum(),
        status: ep.status,
    }
}

/// Trains one DDPG agent per device over `episodes` exploring episodes.
pub fn train_agents(env: &Environment, seed: u64, episodes: usize) -> Result<(Vec<DdpgAgent>, Vec<EpisodeStat>)> {
    let mut agents = env.ddpg_agents(seed)?;
    let mut stats = Vec::with_capacity(episodes);
    for e in 0..episodes {
        for a in agents.iter_mut() {
            a.begin_episode(e);
        }
        let opts = EpisodeOptions {
            seed: episode_seed(seed, e),
            explore: true,
            learn: true,
            record: false,
        };
        stats.push(stat(e, &run_episode(env, &mut agents, opts)?));
    }
    Ok((agents, stats))
}

/// Episodes of the random policy on the same episode seeds as training.
pub fn random_episodes(env: &Environment, seed: u64, episodes: usize) -> Result<Vec<EpisodeStat>> {
    let mut policies = env.random_policies(seed)?;
    (0..episodes)
        .map(|e| {
            let opts = EpisodeOptions {
                seed: episode_seed(seed, e),
                explore: false,
                learn: false,
                record: false,
            };
            Ok(stat(e, &run_episode(env, &mut policies, opts)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub mechanism: MechanismKind,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub final_gap: Option<f64>,
    pub energy: f64,
    pub money: f64,
    pub bytes: u64,
    pub uploads: usize,
    pub energy_to_target: Option<f64>,
    pub money_to_target: Option<f64>,
}

/// Runs `config` with `seed` and writes `config.toml`, `metrics.csv`,
/// `model.json`, `status.json` and, when enabled, `trace.json` into `out`.
/// Controller runs also write `drl.csv` and the agent checkpoints.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let env = Environment::new(config, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), env.config.to_toml()?)?;
    let opts = EpisodeOptions {
        seed,
        explore: false,
        learn: false,
        record: true,
    };
    let mech = env.config.mechanism.kind;
    let episode = match mech {
        MechanismKind::Fedavg | MechanismKind::LgcFixed => run_episode(&env, &mut env.fixed_policies()?, opts)?,
        MechanismKind::Random => run_episode(&env, &mut env.random_policies(seed)?, opts)?,
        MechanismKind::LgcDdpg => {
            let (mut agents, stats) = train_agents(&env, seed, env.config.mechanism.episodes)?;
            write_drl(&out.join("drl.csv"), &stats)?;
            let dir = out.join("agents");
            fs::create_dir_all(&dir)?;
            for (m, a) in agents.iter().enumerate() {
                a.save(&dir.join(format!("device-{m}.bin")))?;
            }
            run_episode(&env, &mut agents, opts)?
        }
    };
    let devices = env.problem.device_count();
    write_metrics(&out.join("metrics.csv"), &episode.rows, devices, env.config.channels.len())?;
    fs::write(out.join("model.json"), serde_json::to_string(&episode.model)?)?;
    if let Some(trace) = &episode.trace {
        fs::write(out.join("trace.json"), serde_json::to_string(trace)?)?;
    }
    let last = episode.rows.last().expect("recorded runs emit a row");
    let hit = env
        .config
        .output
        .target_accuracy
        .and_then(|target| episode.rows.iter().find(|r| r.accuracy.is_some_and(|a| a >= target)));
    let summary = RunSummary {
        status: episode.status,
        mechanism: mech,
        seed,
        steps: episode.steps,
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        final_gap: last.gap,
        energy: last.energy,
        money: last.money,
        bytes: episode.bytes,
        uploads: episode.uploads,
        energy_to_target: hit.map(|r| r.energy),
        money_to_target: hit.map(|r| r.money),
    };
    fs::write(out.join("status.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn write_drl(path: &Path, stats: &[EpisodeStat]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "reward", "critic_loss", "steps", "decisions", "status"])?;
    for s in stats {
        let status = match s.status {
            RunStatus::Completed => "completed",
            RunStatus::BudgetExhausted => "budget_exhausted",
        };
        w.write_record([
            s.episode.to_string(),
            s.reward.to_string(),
            opt(s.critic_loss),
            s.steps.to_string(),
            s.decisions.to_string(),
            status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
