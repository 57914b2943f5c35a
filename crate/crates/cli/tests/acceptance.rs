//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lgc_core::analysis::{even_plan, run_cell, CellOutcome, CellSpec};
use lgc_core::controller::ddpg::{actor_objective_and_grad, critic_loss_and_grad};
use lgc_core::controller::mlp::{Activation, Mlp};
use lgc_core::federation::{lr_at, theorem_shift_floor, LrSchedule, Participation, SimConfig, Simulation, SyncSchedule};
use lgc_core::harness::verify::VerifyConfig;
use lgc_core::harness::{build_problem, random_episodes, train_agents, Environment, ExperimentConfig};
use lgc_core::netmodel::{default_channels, transmit_bytes};
use lgc_core::problems::{synthetic_quadratic, MinibatchOracle, Problem, SyntheticSpec};
use lgc_core::seeding::{stream, Stream};
use lgc_core::sparsifier::{contraction_factor, lgc_decode, lgc_encode, top_k, AllocationPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random plan over 1 to 3 channels with total in `1..=dim`.
fn random_plan(rng: &mut ChaCha8Rng, dim: usize) -> AllocationPlan {
    let channels = rng.gen_range(1..=3);
    let total = rng.gen_range(1..=dim);
    let mut cuts: Vec<usize> = (0..channels - 1).map(|_| rng.gen_range(0..=total)).collect();
    cuts.push(0);
    cuts.push(total);
    cuts.sort_unstable();
    AllocationPlan::new(cuts.windows(2).map(|w| w[1] - w[0]).collect()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [10, 100, 10_000];
    let mut mismatches = 0;
    let mut overlaps = 0;
    for i in 0..1000 {
        let dim = dims[i % 3];
        let x = gaussian(&mut rng, dim);
        let plan = random_plan(&mut rng, dim);
        let update = lgc_encode(&x, &plan).map_err(|e| e.to_string())?;
        let decoded = lgc_decode(&update).map_err(|e| e.to_string())?;
        let oracle = top_k(&x, plan.total()).map_err(|e| e.to_string())?.to_dense();
        if decoded != oracle {
            mismatches += 1;
        }
        let mut seen = vec![false; dim];
        for layer in update.layers() {
            for &j in layer.indices() {
                overlaps += usize::from(std::mem::replace(&mut seen[j as usize], true));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && overlaps == 0 && elapsed < Duration::from_secs(10),
        format!("1000 vectors, {mismatches} mismatches, {overlaps} shared indices, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let dim = rng.gen_range(1..=300);
        let x = gaussian(&mut rng, dim);
        let plan = random_plan(&mut rng, dim);
        let decoded = lgc_decode(&lgc_encode(&x, &plan).unwrap()).unwrap();
        let residual: f64 = x.iter().zip(&decoded).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm: f64 = x.iter().map(|a| a * a).sum();
        let bound = (1.0 - plan.total() as f64 / dim as f64) * norm;
        if residual > bound {
            violations += 1;
        }
        if bound > 0.0 {
            worst = worst.max(residual / bound);
        }
    }
    check(violations == 0, format!("10000 cases, {violations} violations, max residual/bound {worst:.4}"))
}

fn quadratic() -> Problem {
    synthetic_quadratic(&SyntheticSpec::default(), &mut stream(0, Stream::Data, 0)).unwrap()
}

fn lossless_reduction() -> Outcome {
    let problem = quadratic();
    let (m, rounds, seed) = (problem.device_count(), 500, 11);
    let lr = LrSchedule::constant(0.05).unwrap();
    let config = SimConfig {
        lr,
        batch: 8,
        horizon: rounds,
        gap_bound: 1,
        participation: Participation::Scheduled,
        seed,
    };
    let init = problem.initial_point(&mut stream(seed, Stream::Init, 0));
    let schedules = (0..m).map(|_| SyncSchedule::every_round(rounds).unwrap()).collect();
    let plans = vec![AllocationPlan::new(vec![40, 35, 25]).unwrap(); m];
    let mut sim = Simulation::new(&problem, config, init.clone(), schedules, plans).map_err(|e| e.to_string())?;

    // Plain minibatch SGD: each device steps from the global model and the
    // server subtracts the mean of the device deltas.
    let oracle = MinibatchOracle::new(8).unwrap();
    let mut samplers: Vec<_> = (0..m).map(|k| stream(seed, Stream::Sampler, k as u64)).collect();
    let mut w = init;
    let mut first_mismatch = None;
    for t in 0..rounds {
        let eta = lr_at(&lr, t);
        let mut acc = vec![0.0; w.len()];
        for (k, sampler) in samplers.iter_mut().enumerate() {
            let rows = oracle.sample_rows(problem.dataset(k).unwrap().len(), sampler).unwrap();
            let g = problem.batch_gradient(k, &w, &rows).unwrap();
            for ((a, wi), gi) in acc.iter_mut().zip(&w).zip(&g) {
                let half = wi - eta * gi;
                *a += wi - half;
            }
        }
        for (wi, a) in w.iter_mut().zip(&acc) {
            *wi -= a / m as f64;
        }
        sim.step().map_err(|e| e.to_string())?;
        let same = sim.global().iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same && first_mismatch.is_none() {
            first_mismatch = Some(t + 1);
        }
    }
    check(
        first_mismatch.is_none(),
        match first_mismatch {
            None => format!("{rounds} rounds bit-identical to reference SGD"),
            Some(t) => format!("diverged from reference SGD at round {t}"),
        },
    )
}

/// Replays a matrix cell step by step and checks `u = decode(g) + e'`
/// bitwise at every sync from the outside.
fn identity_syncs(problem: &Problem, spec: &CellSpec) -> Result<(usize, usize), String> {
    let curvature = problem.curvature().ok_or("no curvature")?;
    let dim = problem.dim();
    let k = ((spec.gamma * dim as f64).round() as usize).clamp(1, dim);
    let plan = even_plan(k, spec.channels).map_err(|e| e.to_string())?;
    let gamma = contraction_factor(&plan, dim).map_err(|e| e.to_string())?;
    let a = theorem_shift_floor(spec.h, gamma, curvature.kappa()).floor() + 1.0;
    let config = SimConfig {
        lr: LrSchedule::theorem(curvature.mu, a).map_err(|e| e.to_string())?,
        batch: spec.batch,
        horizon: spec.horizon,
        gap_bound: spec.h,
        participation: Participation::Scheduled,
        seed: spec.seed,
    };
    let m = problem.device_count();
    let init = problem.initial_point(&mut stream(spec.seed, Stream::Init, 1));
    let schedules = (0..m).map(|_| SyncSchedule::periodic(spec.h, spec.horizon).unwrap()).collect();
    let mut sim = Simulation::new(problem, config, init, schedules, vec![plan; m]).map_err(|e| e.to_string())?;
    let (mut syncs, mut broken) = (0, 0);
    while !sim.finished() {
        let before: Vec<(Vec<f64>, Vec<f64>)> = sim.devices().iter().map(|d| (d.memory.clone(), d.anchor.clone())).collect();
        let updates = sim.begin_step().map_err(|e| e.to_string())?.to_vec();
        for (k, update) in &updates {
            let dev = &sim.devices()[*k];
            let (memory, anchor) = &before[*k];
            let sent = lgc_decode(update).map_err(|e| e.to_string())?;
            let intact = (0..dim).all(|j| {
                let u = (memory[j] + anchor[j]) - dev.local[j];
                sent[j] + dev.memory[j] == u
            });
            syncs += 1;
            broken += usize::from(!intact);
        }
        sim.finish_step().map_err(|e| e.to_string())?;
    }
    Ok((syncs, broken))
}

const GAMMAS: [f64; 4] = [0.05, 0.1, 0.5, 1.0];
const HS: [usize; 4] = [1, 2, 4, 8];

struct Matrix {
    /// Quadratic cells over T = 2000, checked at 1000 and 2000.
    short: Vec<Result<(CellOutcome, Duration), String>>,
    /// Quadratic cells over T = 4000, checked at 1000 and 4000.
    long: Vec<Result<CellOutcome, String>>,
}

fn cell_spec(gamma: f64, h: usize, horizon: usize, checkpoints: Vec<usize>) -> CellSpec {
    let mut spec = CellSpec::new(gamma, h, horizon, 0);
    spec.checkpoints = checkpoints;
    spec
}

fn run_matrix(problem: &Problem) -> Matrix {
    let mut short = Vec::new();
    let mut long = Vec::new();
    for &g in &GAMMAS {
        for &h in &HS {
            let start = Instant::now();
            short.push(
                run_cell(problem, &cell_spec(g, h, 2000, vec![1000, 2000]))
                    .map(|o| (o, start.elapsed()))
                    .map_err(|e| e.to_string()),
            );
            long.push(run_cell(problem, &cell_spec(g, h, 4000, vec![1000, 4000])).map_err(|e| e.to_string()));
        }
    }
    Matrix { short, long }
}

fn error_feedback(matrix: &Matrix) -> Outcome {
    let failed = matrix.short.iter().filter(|r| r.is_err()).count() + matrix.long.iter().filter(|r| r.is_err()).count();
    let cell_syncs: usize = matrix.short.iter().filter_map(|r| r.as_ref().ok()).map(|(o, _)| o.syncs).sum::<usize>()
        + matrix.long.iter().filter_map(|r| r.as_ref().ok()).map(|o| o.syncs).sum::<usize>();
    let mut replayed = 0;
    let mut broken = 0;
    for problem in &VerifyConfig::default().problems {
        let problem = build_problem(problem, 0).map_err(|e| e.to_string())?;
        for &g in &GAMMAS {
            for &h in &HS {
                let (s, b) = identity_syncs(&problem, &cell_spec(g, h, 2000, vec![2000]))?;
                replayed += s;
                broken += b;
            }
        }
    }
    check(
        failed == 0 && broken == 0 && replayed > 0,
        format!("{cell_syncs} syncs in matrix runs without a violation ({failed} runs failed); {replayed} replayed syncs on quadratic and logistic, {broken} broken"),
    )
}

fn memory_bound(matrix: &Matrix) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    let mut slowest = Duration::ZERO;
    for r in &matrix.short {
        match r {
            Ok((o, t)) => {
                worst = worst.max(o.memory.ratio);
                slowest = slowest.max(*t);
                if !o.memory.passed || *t >= Duration::from_secs(120) {
                    bad.push(format!("gamma={} H={}", o.spec.gamma, o.spec.h));
                }
            }
            Err(e) => bad.push(e.clone()),
        }
    }
    check(
        bad.is_empty(),
        format!("16 cells, max measured/bound {worst:.2e}, slowest cell {:.2}s, failing {bad:?}", slowest.as_secs_f64()),
    )
}

fn deviation_bounds(matrix: &Matrix) -> Outcome {
    let (mut local, mut virt) = (0.0f64, 0.0f64);
    let mut bad = Vec::new();
    let mut exact = None;
    for r in &matrix.short {
        let Ok((o, _)) = r else {
            bad.push("run failed".to_string());
            continue;
        };
        local = local.max(o.local_deviation.ratio);
        virt = virt.max(o.virtual_distance.ratio);
        if !o.local_deviation.passed || !o.virtual_distance.passed {
            bad.push(format!("gamma={} H={}", o.spec.gamma, o.spec.h));
        }
        if o.spec.gamma == 1.0 && o.spec.h == 1 {
            exact = Some((o.local_deviation.measured, o.virtual_distance.measured));
        }
    }
    let zero = exact == Some((0.0, 0.0));
    check(
        bad.is_empty() && zero,
        format!("max ratios local {local:.2e} virtual {virt:.2e}; (1,1) cell maxima {exact:?}; failing {bad:?}"),
    )
}

fn convergence(matrix: &Matrix) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut decay: f64 = 0.0;
    let mut bad = Vec::new();
    let short = matrix.short.iter().map(|r| r.as_ref().map(|(o, _)| o));
    let long = matrix.long.iter().map(|r| r.as_ref());
    for r in short.clone().chain(long.clone()) {
        match r {
            Ok(o) => {
                for c in &o.convergence {
                    worst = worst.max(c.ratio);
                    if !c.passed {
                        bad.push(format!("bound gamma={} H={} T={}", o.spec.gamma, o.spec.h, c.horizon));
                    }
                }
            }
            Err(e) => bad.push(e.clone()),
        }
    }
    for o in long.flatten() {
        let gap = |t: usize| o.convergence.iter().find(|c| c.horizon == t).map(|c| c.gap);
        match (gap(1000), gap(4000)) {
            (Some(g1), Some(g4)) => {
                decay = decay.max(g4 / g1);
                if g4 > 0.5 * g1 {
                    bad.push(format!("decay gamma={} H={}: {g4:.3e} vs {g1:.3e}", o.spec.gamma, o.spec.h));
                }
            }
            _ => bad.push("missing checkpoint".into()),
        }
    }
    check(
        bad.is_empty(),
        format!("32 runs, max gap/bound {worst:.2e}, max gap(4000)/gap(1000) {decay:.3}, failing {bad:?}"),
    )
}

fn lgc_bin() -> &'static str {
    env!("CARGO_BIN_EXE_lgc")
}

/// Runs the CLI and returns its exit code.
fn cli_run(config: &Path, seed: u64, out: &Path) -> Result<i32, String> {
    let output = Command::new(lgc_bin())
        .args(["run", "--config"])
        .arg(config)
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    output
        .status
        .code()
        .ok_or_else(|| "terminated by signal".to_string())
        .and_then(|c| match c {
            0 | 2 => Ok(c),
            _ => Err(String::from_utf8_lossy(&output.stderr).into_owned()),
        })
}

fn status(dir: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(dir.join("status.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

const COMPRESSED: &str = r#"
[problem]
dim = 1000
[federation]
horizon = 4000
step_cap = 1
lr = { form = "theorem" }
[mechanism]
kind = "lgc-fixed"
fraction = 0.1
[output]
metrics_every = 100
trace = false
"#;

const FEDAVG: &str = r#"
[problem]
dim = 1000
[federation]
horizon = 4000
step_cap = 1
lr = { form = "theorem", a = 129.0 }
[mechanism]
kind = "fedavg"
[output]
metrics_every = 100
trace = false
"#;

/// The uncompressed run shares the step sizes of the compressed one.
const UNCOMPRESSED: &str = r#"
[problem]
dim = 1000
[federation]
horizon = 4000
step_cap = 1
lr = { form = "theorem", a = 129.0 }
[mechanism]
kind = "lgc-fixed"
fraction = 1.0
[output]
metrics_every = 100
trace = false
"#;

const PIPELINE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Runs the three configs over the pipeline seeds under `root`.
fn pipeline(root: &Path) -> Result<Vec<(String, u64, PathBuf)>, String> {
    let mut runs = Vec::new();
    for (name, text) in [("compressed", COMPRESSED), ("uncompressed", UNCOMPRESSED), ("fedavg", FEDAVG)] {
        let config = root.join(format!("{name}.toml"));
        std::fs::write(&config, text).map_err(|e| e.to_string())?;
        for &seed in &PIPELINE_SEEDS {
            let out = root.join(format!("{name}-{seed}"));
            let code = cli_run(&config, seed, &out)?;
            if code != 0 {
                return Err(format!("{name} seed {seed} exited with {code}"));
            }
            runs.push((name.to_string(), seed, out));
        }
    }
    Ok(runs)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn compression_efficiency(runs: &[(String, u64, PathBuf)]) -> Outcome {
    let mut per_upload: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut gaps: BTreeMap<(&str, u64), f64> = BTreeMap::new();
    for (name, seed, dir) in runs {
        let s = status(dir)?;
        let bytes = s["bytes"].as_f64().ok_or("no bytes")?;
        let uploads = s["uploads"].as_f64().ok_or("no uploads")?;
        per_upload.entry(name).or_default().push(bytes / uploads);
        gaps.insert((name, *seed), s["final_gap"].as_f64().ok_or("no gap")?);
    }
    let max = |n: &str| per_upload[n].iter().cloned().fold(0.0, f64::max);
    let min = |n: &str| per_upload[n].iter().cloned().fold(f64::INFINITY, f64::min);
    let bytes_ratio = max("compressed") / min("fedavg");
    let ratios: Vec<f64> = PIPELINE_SEEDS.iter().map(|&s| gaps[&("compressed", s)] / gaps[&("uncompressed", s)]).collect();
    let gap_ratio = median(ratios.clone());
    check(
        bytes_ratio <= 0.11 && gap_ratio <= 2.0,
        format!(
            "bytes per upload {:.0} vs {:.0} (ratio {bytes_ratio:.4}); median gap ratio {gap_ratio:.3} over seeds {ratios:.3?}",
            max("compressed"),
            min("fedavg")
        ),
    )
}

fn energy_fidelity() -> Outcome {
    let mut channels = default_channels();
    for c in &mut channels {
        c.energy_std = 0.0;
    }
    let mut rng = stream(0, Stream::Channel, 0);
    let mut got = Vec::new();
    for c in 0..channels.len() {
        let mut bytes = vec![0; channels.len()];
        bytes[c] = 1_000_000;
        got.push(transmit_bytes(&bytes, &channels, &mut rng).map_err(|e| e.to_string())?.energy[c]);
    }
    check(got == [1296.0, 2851.2, 7128.0], format!("1 MB costs {got:?} J"))
}

struct BudgetCase {
    devices: usize,
    energy: Vec<f64>,
    money: Vec<f64>,
    text: String,
}

fn budget_value(rng: &mut ChaCha8Rng, devices: usize, lo: f64, hi: f64) -> (Vec<f64>, Option<String>) {
    let draw = |rng: &mut ChaCha8Rng| (rng.gen_range(lo.ln()..hi.ln())).exp();
    match rng.gen_range(0..3) {
        0 => (vec![f64::INFINITY; devices], None),
        1 => {
            let v = draw(rng);
            (vec![v; devices], Some(format!("{v:e}")))
        }
        _ => {
            let v: Vec<f64> = (0..devices).map(|_| draw(rng)).collect();
            let s = v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(", ");
            (v, Some(format!("[{s}]")))
        }
    }
}

fn budget_case(rng: &mut ChaCha8Rng) -> BudgetCase {
    let devices = rng.gen_range(2..=4);
    let dim = rng.gen_range(20..=100);
    let horizon = rng.gen_range(50..=300);
    let step_cap = rng.gen_range(1..=4);
    let kind = ["fedavg", "lgc-fixed", "random", "lgc-ddpg"][rng.gen_range(0..4)];
    let steps = rng.gen_range(1..=step_cap);
    let fraction = rng.gen_range(0.05..0.5);
    let (energy, e_text) = budget_value(rng, devices, 2.0, 2000.0);
    let (money, m_text) = budget_value(rng, devices, 1e-5, 1.0);
    let mut text = format!(
        "[problem]\ndim = {dim}\ndevices = {devices}\nrows_per_device = 100\n\
         [federation]\nhorizon = {horizon}\nstep_cap = {step_cap}\nbatch = 16\n\
         [mechanism]\nkind = \"{kind}\"\nsteps = {steps}\nfraction = {fraction}\nepisodes = 2\n\
         [ddpg]\nhidden = 8\nwarmup = 4\nbatch = 4\n\
         [output]\nmetrics_every = 10\ntrace = false\n[budget]\n"
    );
    if let Some(e) = e_text {
        text.push_str(&format!("energy = {e}\n"));
    }
    if let Some(m) = m_text {
        text.push_str(&format!("money = {m}\n"));
    }
    BudgetCase {
        devices,
        energy,
        money,
        text,
    }
}

/// Checks one finished run; returns whether it stopped on its budget.
fn audit_budget_run(case: &BudgetCase, code: i32, dir: &Path) -> Result<bool, String> {
    let s = status(dir)?;
    let stopped = s["status"] == "budget_exhausted";
    if code != if stopped { 2 } else { 0 } {
        return Err(format!("exit code {code} for status {}", s["status"]));
    }
    let steps = s["steps"].as_u64().ok_or("no steps")?;
    let mut reader = csv::Reader::from_path(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let last = rows.last().ok_or("metrics file has no rows")?;
    let col = |name: &str| -> Result<f64, String> {
        let i = header.iter().position(|h| h == name).ok_or(format!("no column {name}"))?;
        last[i].parse::<f64>().map_err(|e| e.to_string())
    };
    if col("epoch")? as u64 != steps {
        return Err(format!("metrics end at epoch {} but the run took {steps} steps", col("epoch")?));
    }
    for m in 0..case.devices {
        let (e, c) = (col(&format!("energy_{m}"))?, col(&format!("money_{m}"))?);
        if e > case.energy[m] || c > case.money[m] {
            return Err(format!("device {m} spent {e} J and {c} against {} J and {}", case.energy[m], case.money[m]));
        }
    }
    Ok(stopped)
}

fn budget_enforcement(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut stopped = 0;
    let mut problems = Vec::new();
    for i in 0..50 {
        let case = budget_case(&mut rng);
        let config = root.join(format!("budget-{i:02}.toml"));
        std::fs::write(&config, &case.text).map_err(|e| e.to_string())?;
        let dir = root.join(format!("budget-{i:02}"));
        match cli_run(&config, i, &dir).and_then(|code| audit_budget_run(&case, code, &dir)) {
            Ok(s) => stopped += usize::from(s),
            Err(e) => problems.push(format!("run {i}: {e}")),
        }
    }
    check(
        problems.is_empty() && stopped > 0,
        format!("50 runs, {stopped} stopped on budget, problems {problems:?}"),
    )
}

/// Largest per-parameter relative error between `grad` and central
/// differences of `f` around `params`. The step keeps roundoff small next
/// to gradients near 1e-9.
fn fd_error(params: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale > 0.0 {
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    worst
}

fn gradient_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut actor_worst, mut critic_worst): (f64, f64) = (0.0, 0.0);
    for trial in 0..20 {
        let s_dim = rng.gen_range(1..=5);
        let a_dim = rng.gen_range(1..=4);
        let hidden = rng.gen_range(2..=8);
        let act = if trial % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let actor = Mlp::random(&[s_dim, hidden, hidden, a_dim], act, Activation::Sigmoid, &mut rng).unwrap();
        let critic = Mlp::random(&[s_dim + a_dim, hidden, hidden, 1], act, Activation::Identity, &mut rng).unwrap();
        let n = rng.gen_range(1..=5);
        let states: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut rng, s_dim)).collect();
        let samples: Vec<(Vec<f64>, f64)> = (0..n).map(|_| (gaussian(&mut rng, s_dim + a_dim), rng.gen_range(-2.0..2.0))).collect();

        let (_, cg) = critic_loss_and_grad(&critic, &samples).unwrap();
        critic_worst = critic_worst.max(fd_error(&critic.params(), &cg.0, |p| {
            let mut c = critic.clone();
            c.set_params(p).unwrap();
            critic_loss_and_grad(&c, &samples).unwrap().0
        }));
        let (_, ag) = actor_objective_and_grad(&actor, &critic, &states).unwrap();
        actor_worst = actor_worst.max(fd_error(&actor.params(), &ag.0, |p| {
            let mut a = actor.clone();
            a.set_params(p).unwrap();
            actor_objective_and_grad(&a, &critic, &states).unwrap().0
        }));
    }
    check(
        actor_worst <= 1e-4 && critic_worst <= 1e-4,
        format!("20 networks, max relative error actor {actor_worst:.2e} critic {critic_worst:.2e}"),
    )
}

const DRL_ENV: &str = r#"
[problem]
seed = 7
[federation]
horizon = 200
step_cap = 4
[budget]
energy = 60.0
[mechanism]
kind = "lgc-ddpg"
episodes = 100
"#;

fn quartiles(losses: &[f64]) -> (f64, f64) {
    let q = losses.len() / 4;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..q]), mean(&losses[losses.len() - q..]))
}

fn learning_signal() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::from_toml(DRL_ENV).map_err(|e| e.to_string())?;
    let episodes = config.mechanism.episodes;
    let mut wins = 0;
    let mut curves: Vec<Vec<Option<f64>>> = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..5 {
        let env = Environment::new(&config, seed).map_err(|e| e.to_string())?;
        let (_, stats) = train_agents(&env, seed, episodes).map_err(|e| e.to_string())?;
        let random = random_episodes(&env, seed, 10).map_err(|e| e.to_string())?;
        let trained = stats[episodes - 10..].iter().map(|s| s.reward).sum::<f64>() / 10.0;
        let baseline = random.iter().map(|s| s.reward).sum::<f64>() / random.len() as f64;
        wins += usize::from(trained > baseline);
        detail.push(format!("{trained:.2}/{baseline:.2}"));
        curves.push(stats.iter().map(|s| s.critic_loss).collect());
    }
    // Seed-averaged loss over the episodes in which every seed trained.
    let mean_curve: Vec<f64> = (0..episodes)
        .filter_map(|e| curves.iter().map(|c| c[e]).sum::<Option<f64>>().map(|s| s / curves.len() as f64))
        .collect();
    let (first, last) = quartiles(&mean_curve);
    let falling = curves
        .iter()
        .filter(|c| {
            let l: Vec<f64> = c.iter().flatten().copied().collect();
            let (a, b) = quartiles(&l);
            b < a
        })
        .count();
    let elapsed = start.elapsed();
    check(
        wins >= 4 && last < first && elapsed < Duration::from_secs(600),
        format!(
            "trained beats random in {wins}/5 seeds (last-10 mean/random {}); mean critic loss {first:.4} -> {last:.4} by quartile, falling in {falling}/5 seeds; {:.0}s",
            detail.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn reproducibility(first: &[(String, u64, PathBuf)], root: &Path) -> Outcome {
    let second = pipeline(root)?;
    let mut differing = Vec::new();
    for ((name, seed, a), (_, _, b)) in first.iter().zip(&second) {
        for file in ["metrics.csv", "status.json"] {
            let read = |d: &Path| std::fs::read(d.join(file)).map_err(|e| e.to_string());
            if read(a)? != read(b)? {
                differing.push(format!("{name}-{seed}/{file}"));
            }
        }
    }
    check(
        differing.is_empty(),
        format!("{} runs repeated, differing files {differing:?}", second.len()),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let dir = |name: &str| {
        let p = scratch.path().join(name);
        std::fs::create_dir_all(&p).expect("scratch directory");
        p
    };
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, outcome: Outcome| {
        let (tag, text) = match &outcome {
            Ok(t) => ("PASS", t),
            Err(t) => ("FAIL", t),
        };
        println!("[{tag}] {id:>2} {name}: {text}");
        results.push((id, name, outcome));
    };

    report(1, "compressor matches top-k", oracle_equivalence());
    report(2, "deterministic contraction", contraction());
    report(3, "lossless reduction to SGD", lossless_reduction());
    let matrix = run_matrix(&quadratic_matrix_problem());
    report(4, "error-feedback identity", error_feedback(&matrix));
    report(5, "memory bound", memory_bound(&matrix));
    report(6, "deviation bounds", deviation_bounds(&matrix));
    report(7, "convergence bound and decay", convergence(&matrix));
    let first_pipeline = pipeline(&dir("pipeline-a"));
    report(
        8,
        "compression efficiency",
        first_pipeline.as_ref().map_err(|e| e.clone()).and_then(|r| compression_efficiency(r)),
    );
    report(9, "energy model fidelity", energy_fidelity());
    report(10, "budget enforcement", budget_enforcement(&dir("budget")));
    report(11, "controller gradients", gradient_exactness());
    report(12, "controller learning signal", learning_signal());
    report(
        13,
        "reproducibility",
        first_pipeline.as_ref().map_err(|e| e.clone()).and_then(|r| reproducibility(r, &dir("pipeline-b"))),
    );

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn quadratic_matrix_problem() -> Problem {
    build_problem(&VerifyConfig::default().problems[0], 0).expect("quadratic problem")
}
