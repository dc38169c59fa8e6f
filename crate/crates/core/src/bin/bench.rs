//! Benchmark driver: runs experiments, renders reports, or starts every
//! service for manual use.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing::{error, info, warn};
use tracing_subscriber::EnvFilter;

use cepless::bench::{self, BenchError, Mode, Query, RunConfig, RunMetrics, UpdateStrategy};
use cepless::canonical::to_canonical;
use cepless::node_manager::{ControlServer, NodeManager, NodeManagerConfig};
use cepless::queue_server::{QueueServer, ServerConfig};
use cepless::registry::{NewOperator, Registry};

#[derive(Debug, Parser)]
#[command(about = "Throughput, latency and update experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run an experiment and write its metrics.
    Run(RunArgs),
    /// Aggregate metrics files into tables.
    Report {
        files: Vec<PathBuf>,
        /// Also write per-run documents and the aggregate here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Start a queue server, a node manager with its control port, and a
    /// registry holding the stock operators.
    ServeAll {
        #[arg(long, default_value = "127.0.0.1:6480")]
        queue_bind: String,
        #[arg(long, default_value = "127.0.0.1:6481")]
        control_bind: String,
        #[arg(long, env = "CEPLESS_REGISTRY")]
        registry_root: PathBuf,
        #[arg(long, env = "CEPLESS_WORKER_BIN")]
        worker_bin: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "cepless")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "forward")]
    query: Query,
    /// Events per second.
    #[arg(long, default_value_t = 1000)]
    rate: u64,
    /// Measured seconds.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    #[arg(long, default_value_t = 5.0)]
    warmup: f64,
    #[arg(long, default_value_t = 1000)]
    in_batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    out_batch_size: usize,
    #[arg(long, default_value_t = 50_000)]
    backoff_ns: u64,
    /// Seconds into the run at which the operator is replaced.
    #[arg(long)]
    update_at: Option<f64>,
    #[arg(long, value_enum, default_value = "hot")]
    update_strategy: UpdateStrategy,
    /// Fraud threshold; defaults to 0.9 for update runs and 0.78 otherwise.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    update_threshold: f64,
    #[arg(long, default_value_t = 1)]
    runs: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Metrics file (a canonical JSON list of runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "CEPLESS_WORKER_BIN")]
    worker_bin: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            mode: self.mode,
            query: self.query,
            rate: self.rate,
            duration_s: self.duration,
            warmup_s: self.warmup,
            in_batch_size: self.in_batch_size,
            out_batch_size: self.out_batch_size,
            backoff_ns: self.backoff_ns,
            update_at_s: self.update_at,
            update_strategy: self.update_strategy,
            threshold: self.threshold.unwrap_or(if self.update_at.is_some() { 0.9 } else { 0.78 }),
            update_threshold: self.update_threshold,
            runs: self.runs,
            seed: self.seed,
        }
    }
}

fn run(args: &RunArgs) -> Result<bool, Box<dyn std::error::Error>> {
    let cfg = args.config();
    cfg.validate()?;
    let mut all: Vec<RunMetrics> = Vec::new();
    let mut rate_ok = true;
    for i in 0..cfg.runs {
        match bench::run_experiment(&cfg, i, args.worker_bin.as_deref()) {
            Ok(m) => all.push(m),
            Err(BenchError::Rate { target, achieved, metrics }) => {
                warn!(run = i, target, achieved, "producer could not hold the rate; run flagged");
                rate_ok = false;
                all.push(*metrics);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(out) = &args.out {
        std::fs::write(out, to_canonical(&all)?)?;
        info!(file = %out.display(), "metrics written");
    }
    print!("{}", bench::emit_report(&all, None)?);
    Ok(rate_ok)
}

fn report(files: &[PathBuf], out_dir: Option<&Path>) -> Result<(), Box<dyn std::error::Error>> {
    let mut all: Vec<RunMetrics> = Vec::new();
    for f in files {
        let runs: Vec<RunMetrics> = serde_json::from_slice(&std::fs::read(f)?)?;
        all.extend(runs);
    }
    print!("{}", bench::emit_report(&all, out_dir)?);
    Ok(())
}

fn serve_all(
    queue_bind: &str,
    control_bind: &str,
    registry_root: &Path,
    worker_bin: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let server = QueueServer::bind(queue_bind, ServerConfig::default())?.spawn()?;
    let registry = Registry::open(registry_root)?;
    match worker_bin.map(Path::to_path_buf).or_else(bench::locate_worker_binary) {
        Some(bin) => {
            let pkg = tempfile::TempDir::new()?;
            std::fs::write(pkg.path().join("README"), "built-in operator worker\n")?;
            let bin = bin.to_string_lossy().into_owned();
            for (name, version, args) in [
                ("forward", "1", vec!["--op", "forward"]),
                ("fraud", "0.78", vec!["--op", "fraud", "--threshold", "0.78"]),
            ] {
                let cmd = std::iter::once(bin.as_str()).chain(args).map(String::from).collect();
                if let Err(e) = registry.publish(&NewOperator::new(name, version, cmd), pkg.path()) {
                    warn!(name, error = %e, "stock operator not published");
                }
            }
        }
        None => warn!("cepless-worker not found; registry left as is"),
    }
    let manager = Arc::new(NodeManager::new(registry, NodeManagerConfig::new(server.addr().to_string())));
    let control = ControlServer::bind(control_bind, manager)?;
    info!(queue = %server.addr(), control = %control.local_addr()?, registry = %registry_root.display(), "serving");
    control.run()?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(args) => run(args).map(|ok| if ok { ExitCode::SUCCESS } else { ExitCode::from(3) }),
        Cmd::Report { files, out_dir } => report(files, out_dir.as_deref()).map(|_| ExitCode::SUCCESS),
        Cmd::ServeAll { queue_bind, control_bind, registry_root, worker_bin } => {
            serve_all(queue_bind, control_bind, registry_root, worker_bin.as_deref()).map(|_| ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        error!("{e}");
        ExitCode::FAILURE
    })
}
