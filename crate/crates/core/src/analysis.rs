//! Empirical checks of the convergence theory: memory contraction, local
//! deviation, virtual-sequence distance and the averaged-iterate bound.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::federation::{
    lr_at, mean_of, theorem_shift_floor, LrSchedule, Participation, SimConfig, Simulation, StepReport, SyncSchedule,
};
use crate::problems::{estimate_constants, AssumptionConstants, Curvature, MinibatchOracle, Problem};
use crate::seeding::{stream, Stream};
use crate::sparsifier::{contraction_factor, norm_sq, AllocationPlan};

/// Everything the bounds depend on. `g2` is the squared gradient bound
/// actually used (already inflated); `sigma2` holds per-example variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub l: f64,
    pub mu: f64,
    pub gammas: Vec<f64>,
    pub h: usize,
    pub a: f64,
    pub g2: f64,
    pub sigma2: Vec<f64>,
    pub batch: usize,
}

impl TheoremConstants {
    /// Builds constants from estimates. Batch-gradient variances are scaled
    /// up by the batch size, and `G` is multiplied by `inflation`.
    pub fn from_estimates(
        curvature: Curvature,
        estimates: &AssumptionConstants,
        inflation: f64,
        gammas: Vec<f64>,
        h: usize,
        a: f64,
        batch: usize,
    ) -> Result<Self> {
        let c = Self {
            l: curvature.l,
            mu: curvature.mu,
            gammas,
            h,
            a,
            g2: estimates.g2 * inflation * inflation,
            sigma2: estimates.sigma2.iter().map(|s| s * batch as f64).collect(),
            batch,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn devices(&self) -> usize {
        self.gammas.len()
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    pub fn gamma(&self) -> f64 {
        self.gammas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.l >= self.mu && self.l.is_finite()) {
            return Err(invalid("need 0 < mu <= L < inf"));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) {
            return Err(invalid("every contraction factor must lie in (0, 1]"));
        }
        if self.sigma2.len() != self.gammas.len() {
            return Err(invalid("need one variance per device"));
        }
        if self.h == 0 || self.batch == 0 || !(self.g2 >= 0.0) {
            return Err(invalid("H and b must be positive and G^2 non-negative"));
        }
        let floor = theorem_shift_floor(self.h, self.gamma(), self.kappa());
        if !(self.a > floor && self.a > 1.0) {
            return Err(Error::Precondition(format!("shift a = {} must exceed {floor}", self.a)));
        }
        Ok(())
    }

    /// `4 a g (1 - g^2) / (a g - 4 H)` for one contraction factor.
    pub fn c_for(&self, gamma: f64) -> f64 {
        let h = self.h as f64;
        4.0 * self.a * gamma * (1.0 - gamma * gamma) / (self.a * gamma - 4.0 * h)
    }

    pub fn c(&self) -> f64 {
        self.gammas.iter().map(|&g| self.c_for(g)).fold(f64::INFINITY, f64::min)
    }

    fn weighted_sum(&self) -> f64 {
        let c = self.c();
        self.gammas.iter().map(|&g| (4.0 - 2.0 * g) * (1.0 + c / (g * g))).sum::<f64>() / self.devices() as f64
    }

    pub fn c1(&self) -> f64 {
        192.0 * self.weighted_sum()
    }

    pub fn c2(&self) -> f64 {
        8.0 * self.weighted_sum()
    }

    pub fn a_term(&self) -> f64 {
        let m = self.devices() as f64;
        self.sigma2.iter().sum::<f64>() / (self.batch as f64 * m * m)
    }

    pub fn eta(&self, t: usize) -> f64 {
        8.0 / (self.mu * (self.a + t as f64))
    }

    /// The step size inside is taken at `t = 0`, its largest value.
    pub fn b_term(&self) -> f64 {
        let (h, g2, gamma) = (self.h as f64, self.g2, self.gamma());
        let eta0 = self.eta(0);
        (1.5 * self.mu + 3.0 * self.l) * (12.0 * self.c() * g2 * h * h / (gamma * gamma) + self.c1() * eta0 * eta0 * h.powi(4) * g2)
            + 24.0 * (1.0 + self.c2() * h * h) * self.l * g2 * h * h
    }

    /// `sum_{t<T} (a+t)^2`.
    pub fn s(&self, horizon: usize) -> f64 {
        (0..horizon).map(|t| (self.a + t as f64).powi(2)).sum()
    }

    /// Memory bound for device `m` at step size `eta`.
    pub fn memory_bound(&self, m: usize, eta: f64) -> f64 {
        let (g, h) = (self.gammas[m], self.h as f64);
        4.0 * eta * eta / (g * g) * self.c_for(g) * h * h * self.g2
    }

    pub fn local_deviation_bound(&self, eta: f64) -> f64 {
        let h = self.h as f64;
        8.0 * (1.0 + self.c2() * h * h) * eta * eta * self.g2 * h * h
    }

    pub fn virtual_distance_bound(&self, eta: f64) -> f64 {
        let (h, gamma) = (self.h as f64, self.gamma());
        self.c1() * eta * eta * h.powi(4) * self.g2 + 12.0 * self.c() * eta * eta * self.g2 * h * h / (gamma * gamma)
    }
}

/// Right-hand side of the convergence bound after `horizon` steps from an
/// initial squared distance `w0_gap` to the optimum.
pub fn theorem1_bound(c: &TheoremConstants, w0_gap: f64, horizon: usize) -> Result<f64> {
    c.validate()?;
    if horizon == 0 {
        return Err(invalid("horizon must be positive"));
    }
    let t = horizon as f64;
    let s = c.s(horizon);
    if s < t * t * t / 3.0 {
        return Err(Error::Precondition("weight sum below T^3/3".into()));
    }
    Ok(c.l * c.a.powi(3) / (4.0 * s) * w0_gap
        + 8.0 * c.l * t * (t + 2.0 * c.a) / (c.mu * c.mu * s) * c.a_term()
        + 128.0 * c.l * t / (c.mu.powi(3) * s) * c.b_term())
}

/// Shadow iterates that apply every stochastic gradient uncompressed.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTrace {
    pub per_device: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Largest relative gap between the recursion and the closed form
    /// `global - mean(e)` at common syncs.
    pub max_drift: f64,
}

impl VirtualTrace {
    pub fn new(sim: &Simulation<'_>) -> Self {
        Self {
            per_device: sim.devices().iter().map(|d| d.local.clone()).collect(),
            mean: sim.mean_local(),
            max_drift: 0.0,
        }
    }

    /// Applies the gradients of the step just finished. When every device
    /// synced into a fresh global model the mean is re-anchored to its
    /// closed form.
    pub fn advance(&mut self, sim: &Simulation<'_>, report: &StepReport) -> Result<()> {
        let grads = sim.last_gradients();
        let m = grads.len() as f64;
        for (w, g) in self.per_device.iter_mut().zip(grads) {
            for (x, gi) in w.iter_mut().zip(g) {
                *x -= report.eta * gi;
            }
        }
        for (j, x) in self.mean.iter_mut().enumerate() {
            let q = grads.iter().map(|g| g[j]).sum::<f64>() / m;
            *x -= report.eta * q;
        }
        if report.aggregated && report.updates.len() == grads.len() {
            let e = mean_of(sim.devices().iter().map(|d| d.memory.as_slice()));
            let anchored: Vec<f64> = sim.global().iter().zip(&e).map(|(w, e)| w - e).collect();
            let diff: f64 = self.mean.iter().zip(&anchored).map(|(a, b)| (a - b) * (a - b)).sum();
            let drift = diff.sqrt() / norm_sq(&anchored).sqrt().max(1.0);
            self.max_drift = self.max_drift.max(drift);
            if drift > 1e-9 {
                return Err(Error::ProtocolViolation(format!(
                    "virtual sequence drifted {drift:e} from its closed form at step {}",
                    report.t + 1
                )));
            }
            self.mean = anchored;
        }
        Ok(())
    }
}

/// Per-step measurements of a run, indexed by `t - 1` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub lr: LrSchedule,
    pub etas: Vec<f64>,
    pub memory_sq: Vec<Vec<f64>>,
    pub local_deviation: Vec<f64>,
    pub virtual_distance: Vec<f64>,
    pub syncs: usize,
    pub max_gap: usize,
    pub max_drift: f64,
}

/// Records a [`RunTrace`] and probe iterates while a simulation runs.
#[derive(Debug)]
pub struct RunTracer {
    trace: RunTrace,
    virt: VirtualTrace,
    probe_every: usize,
    probes: Vec<Vec<f64>>,
}

impl RunTracer {
    pub fn new(sim: &Simulation<'_>, probe_every: usize) -> Self {
        Self {
            trace: RunTrace {
                lr: sim.config().lr,
                etas: Vec::new(),
                memory_sq: Vec::new(),
                local_deviation: Vec::new(),
                virtual_distance: Vec::new(),
                syncs: 0,
                max_gap: 0,
                max_drift: 0.0,
            },
            virt: VirtualTrace::new(sim),
            probe_every: probe_every.max(1),
            probes: sim.devices().iter().map(|d| d.local.clone()).collect(),
        }
    }

    pub fn observe(&mut self, sim: &Simulation<'_>, report: &StepReport) -> Result<()> {
        self.virt.advance(sim, report)?;
        let t = sim.t();
        let mean = sim.mean_local();
        let devices = sim.devices();
        let dev: f64 = devices
            .iter()
            .map(|d| d.local.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / devices.len() as f64;
        let dist: f64 = mean.iter().zip(&self.virt.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        self.trace.etas.push(lr_at(&self.trace.lr, t));
        self.trace.memory_sq.push(devices.iter().map(|d| norm_sq(&d.memory)).collect());
        self.trace.local_deviation.push(dev);
        self.trace.virtual_distance.push(dist);
        self.trace.syncs += report.updates.len();
        self.trace.max_drift = self.virt.max_drift;
        if t.is_multiple_of(self.probe_every) {
            self.probes.extend(devices.iter().map(|d| d.local.clone()));
        }
        Ok(())
    }

    pub fn virtual_trace(&self) -> &VirtualTrace {
        &self.virt
    }

    /// Trace plus the probe iterates, schedule gaps filled in from `sim`.
    pub fn finish(mut self, sim: &Simulation<'_>) -> (RunTrace, Vec<Vec<f64>>) {
        self.trace.max_gap = sim.devices().iter().map(|d| d.schedule.gap()).max().unwrap_or(0);
        (self.trace, self.probes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub steps: usize,
    /// Largest measured value and the bound at the same point.
    pub measured: f64,
    pub bound: f64,
    /// Largest measured/bound ratio over all points.
    pub ratio: f64,
    pub violations: usize,
    pub passed: bool,
}

fn ratio(measured: f64, bound: f64) -> f64 {
    if measured == 0.0 {
        0.0
    } else if bound > 0.0 {
        measured / bound
    } else {
        f64::INFINITY
    }
}

fn summarize(check: &str, points: impl Iterator<Item = (f64, f64)>) -> CheckReport {
    let mut r = CheckReport {
        check: check.into(),
        steps: 0,
        measured: 0.0,
        bound: 0.0,
        ratio: 0.0,
        violations: 0,
        passed: true,
    };
    for (measured, bound) in points {
        r.steps += 1;
        if measured > bound {
            r.violations += 1;
        }
        if measured >= r.measured {
            r.measured = measured;
            r.bound = bound;
        }
        r.ratio = r.ratio.max(ratio(measured, bound));
    }
    r.passed = r.violations == 0;
    r
}

fn check_preconditions(trace: &RunTrace, c: &TheoremConstants) -> Result<()> {
    c.validate()?;
    match trace.lr {
        LrSchedule::Decaying { a, .. } if a == c.a => {}
        LrSchedule::Decaying { a, .. } => {
            return Err(Error::Precondition(format!("run used shift {a}, constants assume {}", c.a)));
        }
        LrSchedule::Constant { .. } => {
            return Err(Error::Precondition("bounds need a step size of the form xi / (a + t)".into()));
        }
    }
    if trace.max_gap > c.h {
        return Err(Error::Precondition(format!("schedule gap {} exceeds H = {}", trace.max_gap, c.h)));
    }
    if trace.memory_sq.first().is_some_and(|m| m.len() != c.devices()) {
        return Err(invalid("trace and constants disagree on the device count"));
    }
    Ok(())
}

pub fn check_memory_contraction(trace: &RunTrace, c: &TheoremConstants) -> Result<CheckReport> {
    check_preconditions(trace, c)?;
    let points = trace
        .etas
        .iter()
        .zip(&trace.memory_sq)
        .flat_map(|(&eta, mem)| mem.iter().enumerate().map(move |(m, &e)| (e, c.memory_bound(m, eta))));
    Ok(summarize("memory-contraction", points))
}

/// Local-deviation and virtual-distance reports, in that order.
pub fn check_deviation_bounds(trace: &RunTrace, c: &TheoremConstants) -> Result<(CheckReport, CheckReport)> {
    check_preconditions(trace, c)?;
    let local = trace
        .etas
        .iter()
        .zip(&trace.local_deviation)
        .map(|(&eta, &d)| (d, c.local_deviation_bound(eta)));
    let virt = trace
        .etas
        .iter()
        .zip(&trace.virtual_distance)
        .map(|(&eta, &d)| (d, c.virtual_distance_bound(eta)));
    Ok((summarize("local-deviation", local), summarize("virtual-distance", virt)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub horizon: usize,
    pub gap: f64,
    pub bound: f64,
    pub ratio: f64,
    pub passed: bool,
}

/// Optimality gap of `averaged` against the bound after `horizon` steps
/// from `w0`.
pub fn convergence_report(
    problem: &Problem,
    averaged: &[f64],
    w0: &[f64],
    c: &TheoremConstants,
    horizon: usize,
) -> Result<ConvergenceReport> {
    let opt = problem
        .optimum()
        .ok_or_else(|| Error::Precondition("optimum unavailable for this problem".into()))?;
    let gap = problem.loss(averaged)? - opt.f;
    let w0_gap: f64 = w0.iter().zip(&opt.w).map(|(a, b)| (a - b) * (a - b)).sum();
    let bound = theorem1_bound(c, w0_gap, horizon)?;
    Ok(ConvergenceReport {
        horizon,
        gap,
        bound,
        ratio: ratio(gap.max(0.0), bound),
        passed: gap <= bound,
    })
}

/// One cell of the verification matrix: common periodic schedules, every
/// device with the same plan split evenly over `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub gamma: f64,
    pub h: usize,
    pub horizon: usize,
    /// Horizons at which the averaged iterate is checked against the bound.
    pub checkpoints: Vec<usize>,
    pub batch: usize,
    pub channels: usize,
    pub seed: u64,
    pub inflation: f64,
    pub probe_every: usize,
    pub estimate_samples: usize,
}

impl CellSpec {
    pub fn new(gamma: f64, h: usize, horizon: usize, seed: u64) -> Self {
        Self {
            gamma,
            h,
            horizon,
            checkpoints: vec![horizon],
            batch: 8,
            channels: 3,
            seed,
            inflation: 1.5,
            probe_every: 50,
            estimate_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub constants: TheoremConstants,
    pub memory: CheckReport,
    pub local_deviation: CheckReport,
    pub virtual_distance: CheckReport,
    pub convergence: Vec<ConvergenceReport>,
    pub syncs: usize,
    pub max_drift: f64,
}

impl CellOutcome {
    pub fn passed(&self) -> bool {
        self.memory.passed
            && self.local_deviation.passed
            && self.virtual_distance.passed
            && self.convergence.iter().all(|c| c.passed)
    }
}

/// Splits `total` entries as evenly as possible, earlier channels first.
pub fn even_plan(total: usize, channels: usize) -> Result<AllocationPlan> {
    if channels == 0 {
        return Err(invalid("need at least one channel"));
    }
    AllocationPlan::new((0..channels).map(|c| total / channels + usize::from(c < total % channels)).collect())
}

/// Runs one cell with the step sizes of the convergence theorem and checks
/// every bound. `a` is set just above its admissible floor.
pub fn run_cell(problem: &Problem, spec: &CellSpec) -> Result<CellOutcome> {
    let curvature = problem
        .curvature()
        .ok_or_else(|| Error::Precondition("bounds need a strongly convex problem".into()))?;
    let dim = problem.dim();
    let k = ((spec.gamma * dim as f64).round() as usize).clamp(1, dim);
    let plan = even_plan(k, spec.channels)?;
    let gamma = contraction_factor(&plan, dim)?;
    let a = theorem_shift_floor(spec.h, gamma, curvature.kappa()).floor() + 1.0;
    let config = SimConfig {
        lr: LrSchedule::theorem(curvature.mu, a)?,
        batch: spec.batch,
        horizon: spec.horizon,
        gap_bound: spec.h,
        participation: Participation::Scheduled,
        seed: spec.seed,
    };
    let m = problem.device_count();
    let init = problem.initial_point(&mut stream(spec.seed, Stream::Init, 1));
    let schedules = (0..m).map(|_| SyncSchedule::periodic(spec.h, spec.horizon)).collect::<Result<Vec<_>>>()?;
    let mut sim = Simulation::new(problem, config, init.clone(), schedules, vec![plan; m])?;
    let mut tracer = RunTracer::new(&sim, spec.probe_every);
    let mut averages = Vec::new();
    while !sim.finished() {
        let report = sim.step()?;
        tracer.observe(&sim, &report)?;
        if spec.checkpoints.contains(&sim.t()) {
            averages.push((sim.t(), sim.averaged_iterate()?));
        }
    }
    let (trace, probes) = tracer.finish(&sim);
    let oracle = MinibatchOracle::new(spec.batch)?;
    let estimates = estimate_constants(
        problem,
        oracle,
        &probes,
        spec.estimate_samples,
        &mut stream(spec.seed, Stream::Estimate, 0),
    )?;
    let constants = TheoremConstants::from_estimates(curvature, &estimates, spec.inflation, vec![gamma; m], spec.h, a, spec.batch)?;
    let memory = check_memory_contraction(&trace, &constants)?;
    let (local_deviation, virtual_distance) = check_deviation_bounds(&trace, &constants)?;
    let convergence = averages
        .iter()
        .map(|(t, avg)| convergence_report(problem, avg, &init, &constants, *t))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellOutcome {
        spec: spec.clone(),
        constants,
        memory,
        local_deviation,
        virtual_distance,
        convergence,
        syncs: trace.syncs,
        max_drift: trace.max_drift,
    })
}
