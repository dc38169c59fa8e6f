//! Runs one of the built-in operators as a worker process.
//!
//! Queue addresses and names come from the `CEPLESS_*` environment set by
//! the node manager.

use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use tracing::error;
use tracing_subscriber::EnvFilter;

use cepless::worker::{ExitReason, Forward, FraudFilter, OperatorFn, Slowed, Worker, WorkerContext};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Op {
    Forward,
    Fraud,
}

#[derive(Debug, Parser)]
#[command(about = "Built-in operator worker")]
struct Args {
    #[arg(long, value_enum, default_value = "forward")]
    op: Op,
    /// Fraud filter threshold; events with amount strictly above it pass.
    #[arg(long, default_value_t = 0.78)]
    threshold: f64,
    /// Artificial per-event processing delay.
    #[arg(long, default_value_t = 0)]
    delay_us: u64,
}

fn run<O: OperatorFn>(ctx: WorkerContext, op: O, delay_us: u64) -> Result<ExitReason, Box<dyn std::error::Error>> {
    if delay_us > 0 {
        let op = Slowed { inner: op, per_event: Duration::from_micros(delay_us) };
        return Ok(Worker::connect(ctx, op)?.run()?);
    }
    Ok(Worker::connect(ctx, op)?.run()?)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let ctx = match WorkerContext::from_env() {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("cepless-worker: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match args.op {
        Op::Forward => run(ctx, Forward, args.delay_us),
        Op::Fraud => run(ctx, FraudFilter { threshold: args.threshold }, args.delay_us),
    };
    match result {
        Ok(ExitReason::Drained) => ExitCode::SUCCESS,
        Err(e) => {
            error!(error = %e, "worker failed");
            eprintln!("cepless-worker: {e}");
            ExitCode::FAILURE
        }
    }
}
