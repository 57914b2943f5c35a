//! Experiment orchestration: configs, single runs, sweeps, figure data and
//! the verification matrix.

pub mod config;
pub mod figure;
mod run;
pub mod sweep;
pub mod verify;

pub use config::{ExperimentConfig, LrSpec, MechanismKind, ProblemKind};
pub use run::{
    build_problem, episode_seed, metrics_header, random_episodes, run_episode, run_experiment, train_agents, write_drl,
    write_metrics, DeviceColumns, Environment, Episode, EpisodeOptions, EpisodeStat, MetricsRow, RunStatus, RunSummary,
    RESOURCES,
};

/// Worker cap for sweeps and the verification matrix.
pub const WORKERS_ENV: &str = "LGC_WORKERS";

pub(crate) fn worker_pool() -> crate::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| crate::Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| crate::Error::Config(e.to_string()))
}
