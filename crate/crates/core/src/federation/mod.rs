//! Device and server state machines, sync schedules and step-size schedules.
//!
//! Time `t` counts single SGD steps. A device communicates after step `t`
//! when `t + 1` is in its sync schedule.

mod sim;

pub use sim::{Participation, SimConfig, Simulation, StepReport};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sparsifier::{lgc_decode, lgc_encode, AllocationPlan, LayeredUpdate};

/// Sorted sync rounds in `[1, T]` with bounded gaps.
///
/// A schedule may be built whole or grown one sync at a time; in both cases
/// the gap from the previous member (or from 0) never exceeds the bound, and
/// a complete schedule ends at the horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSchedule {
    rounds: Vec<usize>,
    horizon: usize,
    gap_bound: usize,
}

impl SyncSchedule {
    pub fn new(rounds: Vec<usize>, horizon: usize, gap_bound: usize) -> Result<Self> {
        let mut s = Self::open(horizon, gap_bound)?;
        for r in rounds {
            s.push(r)?;
        }
        if !s.is_complete() {
            return Err(invalid(format!("schedule must contain the horizon {horizon}")));
        }
        Ok(s)
    }

    /// Empty schedule to be grown with [`push`](Self::push).
    pub fn open(horizon: usize, gap_bound: usize) -> Result<Self> {
        if horizon == 0 || gap_bound == 0 {
            return Err(invalid("horizon and gap bound must be positive"));
        }
        Ok(Self {
            rounds: Vec::new(),
            horizon,
            gap_bound,
        })
    }

    /// `h, 2h, ...` plus the horizon.
    pub fn periodic(period: usize, horizon: usize) -> Result<Self> {
        if period == 0 {
            return Err(invalid("period must be positive"));
        }
        let mut rounds: Vec<usize> = (1..=horizon / period).map(|i| i * period).collect();
        if rounds.last() != Some(&horizon) {
            rounds.push(horizon);
        }
        Self::new(rounds, horizon, period)
    }

    pub fn every_round(horizon: usize) -> Result<Self> {
        Self::periodic(1, horizon)
    }

    pub fn push(&mut self, round: usize) -> Result<()> {
        let last = self.last();
        if round <= last || round > self.horizon {
            return Err(Error::ProtocolViolation(format!(
                "sync round {round} must lie in ({last}, {}]",
                self.horizon
            )));
        }
        if round - last > self.gap_bound {
            return Err(Error::ProtocolViolation(format!(
                "gap {} from round {last} exceeds the bound {}",
                round - last,
                self.gap_bound
            )));
        }
        self.rounds.push(round);
        Ok(())
    }

    pub fn rounds(&self) -> &[usize] {
        &self.rounds
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gap_bound(&self) -> usize {
        self.gap_bound
    }

    /// Last member, or 0 when empty.
    pub fn last(&self) -> usize {
        self.rounds.last().copied().unwrap_or(0)
    }

    pub fn contains(&self, round: usize) -> bool {
        self.rounds.binary_search(&round).is_ok()
    }

    pub fn is_complete(&self) -> bool {
        self.last() == self.horizon
    }

    /// Largest spacing between consecutive members, counting from 0.
    pub fn gap(&self) -> usize {
        let mut prev = 0;
        let mut gap = 0;
        for &r in &self.rounds {
            gap = gap.max(r - prev);
            prev = r;
        }
        gap
    }
}

/// Local iterate, anchor and error memory of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub id: usize,
    pub local: Vec<f64>,
    pub anchor: Vec<f64>,
    pub memory: Vec<f64>,
    pub schedule: SyncSchedule,
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(invalid(format!("{what} has dimension {got}, expected {want}")));
    }
    Ok(())
}

impl DeviceState {
    pub fn new(id: usize, init: Vec<f64>, schedule: SyncSchedule) -> Self {
        Self {
            id,
            anchor: init.clone(),
            memory: vec![0.0; init.len()],
            local: init,
            schedule,
        }
    }

    pub fn dim(&self) -> usize {
        self.local.len()
    }

    /// `local -= eta * grad`.
    pub fn local_step(&mut self, grad: &[f64], eta: f64) -> Result<()> {
        check_len("gradient", grad.len(), self.dim())?;
        if !(eta > 0.0) {
            return Err(invalid(format!("step size must be positive, got {eta}")));
        }
        for (w, g) in self.local.iter_mut().zip(grad) {
            *w -= eta * g;
        }
        Ok(())
    }

    /// Compresses `u = e + w - local` (with `local` holding the half step)
    /// for the sync at `round`, keeping the residual as the new memory.
    pub fn make_update(&mut self, round: usize, plan: &AllocationPlan) -> Result<LayeredUpdate> {
        if !self.schedule.contains(round) {
            return Err(Error::ProtocolViolation(format!(
                "device {} is not scheduled to sync at round {round}",
                self.id
            )));
        }
        let u: Vec<f64> = self
            .memory
            .iter()
            .zip(&self.anchor)
            .zip(&self.local)
            .map(|((e, w), h)| (e + w) - h)
            .collect();
        let update = lgc_encode(&u, plan)?;
        let sent = lgc_decode(&update)?;
        for ((e, &ui), &si) in self.memory.iter_mut().zip(&u).zip(&sent) {
            *e = ui - si;
        }
        let intact = u.iter().zip(&sent).zip(&self.memory).all(|((&ui, &si), &ei)| si + ei == ui);
        if !intact {
            return Err(Error::ProtocolViolation(format!(
                "error-feedback identity broken on device {}",
                self.id
            )));
        }
        Ok(update)
    }

    /// Adopts the broadcast model as both local iterate and anchor.
    pub fn apply_sync(&mut self, global: &[f64]) -> Result<()> {
        check_len("global model", global.len(), self.dim())?;
        self.local.copy_from_slice(global);
        self.anchor.copy_from_slice(global);
        Ok(())
    }

    /// Keeps the half step as the next local iterate.
    pub fn skip_sync(&mut self, half: &[f64]) -> Result<()> {
        check_len("half iterate", half.len(), self.dim())?;
        self.local.copy_from_slice(half);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: Vec<f64>,
    pub round: usize,
}

impl ServerState {
    pub fn new(init: Vec<f64>) -> Self {
        Self { global: init, round: 0 }
    }
}

/// `global -= (1/M) * sum decode(g_m)`, summing in the given order. Nothing
/// changes unless every update decodes cleanly.
pub fn server_aggregate(server: &mut ServerState, updates: &[&LayeredUpdate], population: usize) -> Result<()> {
    if population == 0 {
        return Err(invalid("population must be positive"));
    }
    if updates.is_empty() {
        return Ok(());
    }
    let dim = server.global.len();
    let mut acc = vec![0.0; dim];
    for u in updates {
        check_len("update", u.dim(), dim)?;
        let dense = lgc_decode(u)?;
        for (a, d) in acc.iter_mut().zip(&dense) {
            *a += d;
        }
    }
    let scale = population as f64;
    for (w, a) in server.global.iter_mut().zip(&acc) {
        *w -= a / scale;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "form")]
pub enum LrSchedule {
    Constant { eta: f64 },
    /// `xi / (a + t)`.
    Decaying { xi: f64, a: f64 },
}

impl LrSchedule {
    /// `8 / (mu (a + t))`.
    pub fn theorem(mu: f64, a: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(invalid("strong convexity constant must be positive"));
        }
        Self::decaying(8.0 / mu, a)
    }

    pub fn decaying(xi: f64, a: f64) -> Result<Self> {
        if !(xi > 0.0 && a > 0.0 && xi.is_finite() && a.is_finite()) {
            return Err(invalid("decaying schedule needs xi > 0 and a > 0"));
        }
        Ok(Self::Decaying { xi, a })
    }

    pub fn constant(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(invalid("constant step size must be positive"));
        }
        Ok(Self::Constant { eta })
    }

    pub fn shift(&self) -> Option<f64> {
        match *self {
            LrSchedule::Decaying { a, .. } => Some(a),
            LrSchedule::Constant { .. } => None,
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, t: usize) -> f64 {
    match *schedule {
        LrSchedule::Constant { eta } => eta,
        LrSchedule::Decaying { xi, a } => xi / (a + t as f64),
    }
}

/// Smallest admissible shift `a` for the convergence guarantee is strictly
/// above this value.
pub fn theorem_shift_floor(gap_bound: usize, gamma: f64, kappa: f64) -> f64 {
    (4.0 * gap_bound as f64 / gamma).max(32.0 * kappa).max(gap_bound as f64)
}

/// Running `(a+t)^2`-weighted mean of iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateAverager {
    a: f64,
    sum: Vec<f64>,
    weight: f64,
    count: usize,
}

impl IterateAverager {
    pub fn new(a: f64, dim: usize) -> Self {
        Self {
            a,
            sum: vec![0.0; dim],
            weight: 0.0,
            count: 0,
        }
    }

    /// Adds the iterate of step `count()`.
    pub fn push(&mut self, w: &[f64]) {
        let s = (self.a + self.count as f64).powi(2);
        for (acc, x) in self.sum.iter_mut().zip(w) {
            *acc += s * x;
        }
        self.weight += s;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(invalid("no iterates recorded"));
        }
        let t = self.count as f64;
        if self.weight < t * t * t / 3.0 {
            return Err(Error::Precondition(format!(
                "weight sum {} below T^3/3 = {}",
                self.weight,
                t * t * t / 3.0
            )));
        }
        Ok(self.sum.iter().map(|x| x / self.weight).collect())
    }
}

/// `(1/S) sum_t (a+t)^2 w_t`.
pub fn averaged_iterate(history: &[Vec<f64>], a: f64) -> Result<Vec<f64>> {
    let dim = history.first().map(Vec::len).ok_or_else(|| invalid("empty history"))?;
    let mut avg = IterateAverager::new(a, dim);
    for w in history {
        check_len("iterate", w.len(), dim)?;
        avg.push(w);
    }
    avg.mean()
}

/// Mean of equal-length vectors, shifted by the first so that identical
/// inputs average to themselves exactly.
pub fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut it = vectors.into_iter();
    let Some(first) = it.next() else { return Vec::new() };
    let mut acc = vec![0.0; first.len()];
    let mut n = 1usize;
    for v in it {
        for ((a, x), f) in acc.iter_mut().zip(v).zip(first) {
            *a += x - f;
        }
        n += 1;
    }
    first.iter().zip(&acc).map(|(f, a)| f + a / n as f64).collect()
}
