//! Training loops, evaluation and verification utilities.
//!
//! Every phase is a pure function of its inputs and seeds. Work that can run
//! per scene (superpixels, pseudo labels, inference) is spread over a worker
//! pool; results are gathered in scene order, so the worker count never
//! changes an artifact.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod pretrain;
pub mod probe;
pub mod report;
pub mod selftrain;

pub use config::{OptimizerKind, RunConfig, ScheduleConfig, TrainConfig};
pub use metrics::{evaluate, ConfusionMatrix, EvalReport};
pub use pretrain::{initial_checkpoint, pretrain, PretrainResult};
pub use probe::{linear_probe, ProbeResult};
pub use selftrain::{selftrain, SelftrainResult};

/// Environment variable that forces deterministic mode.
pub const DETERMINISTIC_ENV: &str = "PIXFUSE_DETERMINISTIC";

/// True when `PIXFUSE_DETERMINISTIC=1`.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Worker count after applying deterministic mode, which serialises
/// everything.
pub fn effective_workers(requested: usize) -> usize {
    if deterministic_mode() {
        1
    } else {
        requested.max(1)
    }
}

/// Maps `f` over `items` on `workers` threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(workers: usize, items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = effective_workers(workers);
    if workers == 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// Per-epoch progress reported by the training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub aa: Option<f64>,
    pub miou: Option<f64>,
}
