//! Experiment driver and metrics engine.
//!
//! A run pushes a seeded transaction stream through a query at a fixed
//! open-loop rate and records every result's arrival. The query runs either
//! `direct` (a built-in operator inside the harness) or `cepless` (the same
//! operator as a worker process behind its queue pair). Metrics exclude the
//! warmup period.

mod experiment;
pub mod generator;
mod report;
pub mod stats;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use experiment::{run_experiment, run_update_experiment, Services};
pub use generator::TransactionGenerator;
pub use report::{aggregate, emit_report, render_table, AggregateRow};
pub use stats::Summary;

use crate::node_manager::{NodeError, UpdateReport};
use crate::queue_client::{BatchingConfig, ClientError, DEFAULT_BACKOFF_CAP, DEFAULT_SEND_BUFFER_LIMIT};
use crate::registry::RegistryError;
use crate::udo::UdoError;

/// Allowed deviation of the achieved producer rate from the target.
pub const RATE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Cepless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Query {
    Forward,
    Fraud,
}

/// How the operator is replaced at `update_at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UpdateStrategy {
    /// Hot update through the node manager; queues stay.
    Hot,
    /// Stop the whole pipeline, start it again with the new version, and
    /// replay the source from where it stopped.
    Redeploy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub query: Query,
    /// Target events per second.
    pub rate: u64,
    /// Measured seconds, after the warmup.
    pub duration_s: f64,
    pub warmup_s: f64,
    pub in_batch_size: usize,
    pub out_batch_size: usize,
    pub backoff_ns: u64,
    /// Seconds after the start of the run at which the operator is replaced.
    pub update_at_s: Option<f64>,
    pub update_strategy: UpdateStrategy,
    /// Fraud threshold, and the one the update switches to.
    pub threshold: f64,
    pub update_threshold: f64,
    pub runs: u32,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Cepless,
            query: Query::Forward,
            rate: 1000,
            duration_s: 30.0,
            warmup_s: 5.0,
            in_batch_size: 1000,
            out_batch_size: 1000,
            backoff_ns: 50_000,
            update_at_s: None,
            update_strategy: UpdateStrategy::Hot,
            threshold: 0.78,
            update_threshold: 0.5,
            runs: 1,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn batching(&self) -> BatchingConfig {
        let inc = Duration::from_nanos(self.backoff_ns);
        BatchingConfig {
            out_batch_size: self.out_batch_size,
            in_batch_size: self.in_batch_size,
            backoff_increment: inc,
            backoff_cap: DEFAULT_BACKOFF_CAP.max(inc),
            send_buffer_limit: DEFAULT_SEND_BUFFER_LIMIT,
            shutdown_timeout: Duration::from_secs(10),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_owned()));
        if self.rate == 0 {
            return bad("rate must be positive");
        }
        if !(self.duration_s >= 1.0 && self.warmup_s >= 0.0) {
            return bad("duration must be at least 1 s and warmup non-negative");
        }
        if let Some(at) = self.update_at_s {
            if self.mode != Mode::Cepless {
                return bad("updates need cepless mode");
            }
            if !(at > 0.0 && at < self.warmup_s + self.duration_s) {
                return bad("update_at must fall inside the run");
            }
        }
        for t in [self.threshold, self.update_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return bad("thresholds must lie in [0, 1]");
            }
        }
        self.batching().validate().map_err(|e| BenchError::InvalidConfig(e.to_string()))
    }

    /// Seed of the `run`-th repetition.
    pub fn run_seed(&self, run: u32) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

/// The operator swap during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub strategy: UpdateStrategy,
    /// Seconds since the start of the run.
    pub issued_at_s: f64,
    /// Hot: the node manager's update duration. Redeploy: teardown until the
    /// new pipeline accepts events.
    pub update_time_ms: f64,
    pub report: Option<UpdateReport>,
    /// Output rates outside a one-second guard band around the swap.
    pub rate_before: f64,
    pub rate_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    pub run: u32,
    pub sent: u64,
    /// Producer rate actually achieved.
    pub achieved_rate: f64,
    pub rate_ok: bool,
    pub received: u64,
    /// Results received inside the measurement window, per second.
    pub total_rate: f64,
    pub throughput_bins: Vec<u64>,
    pub throughput: Option<Summary>,
    /// Producer timestamp to arrival, for events produced after the warmup.
    pub latency_us: Vec<i64>,
    /// Latency summary in milliseconds.
    pub latency_ms: Option<Summary>,
    /// Longest interval inside the window without any result.
    pub downtime_ms: f64,
    pub expected: u64,
    pub loss: u64,
    pub duplicates: u64,
    /// Results that should not have been produced at all.
    pub unexpected: u64,
    pub update: Option<UpdateOutcome>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("producer reached {achieved:.0} ev/s of {target} ev/s")]
    Rate { target: u64, achieved: f64, metrics: Box<RunMetrics> },
    #[error("cannot find the cepless-worker binary; set CEPLESS_WORKER_BIN")]
    WorkerBinary,
    #[error(transparent)]
    Udo(#[from] UdoError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Finds the worker binary: `CEPLESS_WORKER_BIN`, else next to the running
/// executable (or one directory up, for test binaries under `deps/`).
pub fn locate_worker_binary() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("CEPLESS_WORKER_BIN") {
        return Some(PathBuf::from(p));
    }
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    [dir, dir.parent().unwrap_or(dir)]
        .iter()
        .map(|d| d.join("cepless-worker"))
        .find(|p| p.is_file())
}

fn worker_binary(explicit: Option<&Path>) -> Result<PathBuf, BenchError> {
    explicit.map(Path::to_path_buf).or_else(locate_worker_binary).ok_or(BenchError::WorkerBinary)
}
