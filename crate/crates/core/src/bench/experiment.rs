use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use tempfile::TempDir;
use tracing::{info, warn};

use super::generator::TransactionGenerator;
use super::stats::{longest_gap, per_second_bins, Summary};
use super::{worker_binary, BenchError, Mode, Query, RunConfig, RunMetrics, UpdateOutcome, UpdateStrategy, RATE_TOLERANCE};
use crate::clock;
use crate::event::Scalar;
use crate::node_manager::{NodeManager, NodeManagerConfig};
use crate::queue_server::{QueueServer, ServerConfig, ServerHandle};
use crate::registry::{NewOperator, Registry};
use crate::udo::{Delivered, Predicate, QueryGraph, RunningQuery, UdoRuntime, Vertex};

const DRAIN_TIMEOUT: Duration = Duration::from_secs(30);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn fraud_version(threshold: f64) -> String {
    format!("{threshold}")
}

/// A queue server, a scratch registry holding the stock operators, a node
/// manager and an operator runtime, all in this process.
pub struct Services {
    runtime: UdoRuntime,
    manager: Arc<NodeManager>,
    server: ServerHandle,
    _registry_dir: TempDir,
}

impl Services {
    pub fn start(cfg: &RunConfig, worker_bin: &Path) -> Result<Self, BenchError> {
        let server = QueueServer::bind("127.0.0.1:0", ServerConfig::default())?.spawn()?;
        let registry_dir = TempDir::new()?;
        let registry = Registry::open(registry_dir.path())?;
        let pkg = TempDir::new()?;
        std::fs::write(pkg.path().join("README"), "built-in operator worker\n")?;
        let bin = worker_bin.to_string_lossy().into_owned();
        let cmd = |args: &[&str]| std::iter::once(bin.as_str()).chain(args.iter().copied()).map(String::from).collect();
        registry.publish(&NewOperator::new("forward", "1", cmd(&["--op", "forward"])), pkg.path())?;
        for t in [cfg.threshold, cfg.update_threshold] {
            let v = fraud_version(t);
            registry.publish(&NewOperator::new("fraud", &v, cmd(&["--op", "fraud", "--threshold", &v])), pkg.path())?;
        }
        let mut nm = NodeManagerConfig::new(server.addr().to_string());
        nm.batch_size = cfg.in_batch_size;
        nm.backoff_ns = cfg.backoff_ns;
        let manager = Arc::new(NodeManager::new(registry, nm));
        let runtime = UdoRuntime::new(manager.clone(), cfg.batching());
        Ok(Services { runtime, manager, server, _registry_dir: registry_dir })
    }

    pub fn runtime(&self) -> &UdoRuntime {
        &self.runtime
    }

    pub fn manager(&self) -> &Arc<NodeManager> {
        &self.manager
    }

    pub fn queue_addr(&self) -> SocketAddr {
        self.server.addr()
    }
}

impl Drop for Services {
    fn drop(&mut self) {
        self.manager.shutdown();
    }
}

fn graph(cfg: &RunConfig, threshold: f64) -> QueryGraph {
    QueryGraph::linear(match (cfg.mode, cfg.query) {
        (Mode::Direct, Query::Forward) => Vertex::Forward,
        (Mode::Direct, Query::Fraud) => Vertex::Filter(Predicate::amount_above(threshold)),
        (Mode::Cepless, Query::Forward) => Vertex::Udo("forward@1".into()),
        (Mode::Cepless, Query::Fraud) => Vertex::Udo(format!("fraud@{}", fraud_version(threshold))),
    })
}

#[derive(Default)]
struct Stage {
    query: Option<RunningQuery>,
    services: Option<Services>,
}

impl Stage {
    fn build(cfg: &RunConfig, bin: Option<&Path>, threshold: f64, tx: Sender<Delivered>) -> Result<Stage, BenchError> {
        let services = match cfg.mode {
            Mode::Direct => None,
            Mode::Cepless => Some(Services::start(cfg, bin.expect("cepless mode has a worker binary"))?),
        };
        let query = RunningQuery::start_with_sink(&graph(cfg, threshold), services.as_ref().map(Services::runtime), tx)?;
        Ok(Stage { query: Some(query), services })
    }

    fn teardown(&mut self) -> Result<(), BenchError> {
        let stopped = match self.query.take() {
            Some(q) => q.stop(DRAIN_TIMEOUT),
            None => Ok(()),
        };
        drop(self.services.take());
        Ok(stopped?)
    }
}

struct Produced {
    sent: u64,
    elapsed: Duration,
}

/// Open-loop producer: event `i` is due at `i / rate` seconds and carries
/// that scheduled instant as its production time, so a late producer shows
/// up as latency instead of a slower stream.
fn produce(stage: &Mutex<Stage>, cfg: &RunConfig, seed: u64, start: Instant) -> Result<Produced, BenchError> {
    let total = ((cfg.warmup_s + cfg.duration_s) * cfg.rate as f64).round() as u64;
    let ns_per_event = 1e9 / cfg.rate as f64;
    let mut gen = TransactionGenerator::new(seed);
    let mut i = 0u64;
    let mut last_send = Duration::ZERO;
    while i < total {
        let now_ns = start.elapsed().as_nanos() as f64;
        let due = ((now_ns / ns_per_event).floor() as u64 + 1).min(total);
        if i >= due {
            let wait = (i as f64 * ns_per_event - now_ns).max(0.0);
            if wait >= 100_000.0 {
                thread::sleep(Duration::from_nanos(wait as u64));
            } else {
                thread::yield_now();
            }
            continue;
        }
        let st = lock(stage);
        let q = st.query.as_ref().expect("query is running");
        while i < due {
            let ts = clock::micros_at(start + Duration::from_nanos((i as f64 * ns_per_event) as u64));
            q.push(&gen.next_at(ts))?;
            i += 1;
        }
        drop(st);
        last_send = start.elapsed();
    }
    Ok(Produced { sent: total, elapsed: last_send })
}

struct Swap {
    issued_us: i64,
    done_us: i64,
    report: Option<crate::node_manager::UpdateReport>,
}

fn swap(
    stage: &Mutex<Stage>,
    cfg: &RunConfig,
    bin: Option<&Path>,
    tx: Sender<Delivered>,
    at: Instant,
) -> Result<Swap, BenchError> {
    if let Some(d) = at.checked_duration_since(Instant::now()) {
        thread::sleep(d);
    }
    let issued_us = clock::now_micros();
    match cfg.update_strategy {
        UpdateStrategy::Hot => {
            let (manager, id) = {
                let st = lock(stage);
                let q = st.query.as_ref().expect("query is running");
                let manager = st.services.as_ref().expect("cepless mode").manager().clone();
                (manager, q.operators()[0].instance_id.clone())
            };
            let version = match cfg.query {
                Query::Forward => "1".to_owned(),
                Query::Fraud => fraud_version(cfg.update_threshold),
            };
            let report = manager.update(&id, &version)?;
            info!(ms = report.update_duration_ms, "hot update done");
            Ok(Swap { issued_us, done_us: clock::now_micros(), report: Some(report) })
        }
        UpdateStrategy::Redeploy => {
            // The producer blocks on the stage lock: the source is paused and
            // resumes from where it stopped once the new pipeline is up.
            let mut st = lock(stage);
            st.teardown()?;
            *st = Stage::build(cfg, bin, cfg.update_threshold, tx)?;
            let done_us = clock::now_micros();
            info!(ms = (done_us - issued_us) / 1000, "pipeline redeployed");
            Ok(Swap { issued_us, done_us, report: None })
        }
    }
}

fn amount(e: &crate::event::Event) -> f64 {
    match e.attr("amount") {
        Some(Scalar::Float(f)) => *f,
        _ => f64::NAN,
    }
}

/// Seq accounting. Returns (expected, loss, duplicates, unexpected).
///
/// With a threshold switch the exact swap point is unknown up front, so it
/// is inferred: the stream must be explained by one cut seq, before which
/// the old threshold applies and from which the new one does.
fn account(cfg: &RunConfig, seed: u64, sent: u64, received: &[u64], switched: bool) -> (u64, u64, u64, u64) {
    let mut distinct = HashSet::with_capacity(received.len());
    let mut duplicates = 0u64;
    for &s in received {
        if !distinct.insert(s) {
            duplicates += 1;
        }
    }
    let expected: Vec<bool> = match cfg.query {
        Query::Forward => vec![true; sent as usize],
        Query::Fraud => {
            let amounts: Vec<f64> = TransactionGenerator::new(seed).take(sent as usize).map(|e| amount(&e)).collect();
            let (old, new) = (cfg.threshold, if switched { cfg.update_threshold } else { cfg.threshold });
            let (lo, hi) = (old.min(new), old.max(new));
            let in_band = |a: f64| a > lo && a <= hi;
            let band_received = || amounts.iter().enumerate().filter(|&(s, &a)| in_band(a) && distinct.contains(&(s as u64)));
            let cut = if new < old {
                // More output after the cut: band events appear from it on.
                band_received().map(|(s, _)| s).min().unwrap_or(sent as usize)
            } else {
                band_received().map(|(s, _)| s + 1).max().unwrap_or(0)
            };
            amounts
                .iter()
                .enumerate()
                .map(|(s, &a)| a > hi || (in_band(a) && ((new < old) == (s >= cut))))
                .collect()
        }
    };
    let n_expected = expected.iter().filter(|&&x| x).count() as u64;
    let loss = expected.iter().enumerate().filter(|&(s, &x)| x && !distinct.contains(&(s as u64))).count() as u64;
    let unexpected = distinct.iter().filter(|&&s| !expected.get(s as usize).copied().unwrap_or(false)).count() as u64;
    (n_expected, loss, duplicates, unexpected)
}

fn rate_between(sorted: &[i64], from: i64, to: i64) -> f64 {
    if to <= from {
        return 0.0;
    }
    let n = sorted.partition_point(|&t| t < to) - sorted.partition_point(|&t| t < from);
    n as f64 * 1e6 / (to - from) as f64
}

fn run_once(cfg: &RunConfig, run: u32, worker_bin: Option<&Path>) -> Result<RunMetrics, BenchError> {
    cfg.validate()?;
    let bin = match cfg.mode {
        Mode::Cepless => Some(worker_binary(worker_bin)?),
        Mode::Direct => None,
    };
    let seed = cfg.run_seed(run);
    let (tx, rx) = mpsc::channel::<Delivered>();
    let collector = thread::Builder::new()
        .name("collector".into())
        .spawn(move || rx.iter().map(|d| (d.event.seq, d.event.ts_produced, d.received_at)).collect::<Vec<_>>())?;
    let stage = Arc::new(Mutex::new(Stage::build(cfg, bin.as_deref(), cfg.threshold, tx.clone())?));

    // Pin the clock anchor before `start` so micros_at never saturates.
    clock::now_micros();
    let start = Instant::now();
    let start_us = clock::micros_at(start);
    let swapper = cfg.update_at_s.map(|at| {
        let (stage, cfg, bin, tx) = (stage.clone(), cfg.clone(), bin.clone(), tx.clone());
        let when = start + Duration::from_secs_f64(at);
        thread::spawn(move || swap(&stage, &cfg, bin.as_deref(), tx, when))
    });
    let produced = produce(&stage, cfg, seed, start);
    let swapped = swapper.map(|h| h.join().expect("swap thread panicked")).transpose();

    let finished = {
        let mut st = lock(&stage);
        let quiet = match &st.query {
            Some(q) => q.quiesce(DRAIN_TIMEOUT).map_err(BenchError::from),
            None => Ok(true),
        };
        if let Ok(false) = quiet {
            warn!("operators did not drain before the end of the run");
        }
        let down = st.teardown();
        quiet.and(down)
    };
    drop(tx);
    drop(stage);
    let samples = collector.join().expect("collector panicked");
    let produced = produced?;
    let swapped = swapped?;
    finished?;

    let window_start = start_us + (cfg.warmup_s * 1e6) as i64;
    let window_end = window_start + (cfg.duration_s * 1e6) as i64;
    let mut arrivals: Vec<i64> = samples.iter().map(|s| s.2).collect();
    arrivals.sort_unstable();
    let bins = per_second_bins(arrivals.iter().copied(), window_start, cfg.duration_s.floor() as u64);
    let in_window = arrivals.partition_point(|&t| t < window_end) - arrivals.partition_point(|&t| t < window_start);
    let latency_us: Vec<i64> = samples
        .iter()
        .filter(|s| s.1 >= window_start && s.1 < window_end)
        .map(|s| s.2 - s.1)
        .collect();
    let seqs: Vec<u64> = samples.iter().map(|s| s.0).collect();
    let (expected, loss, duplicates, unexpected) = account(cfg, seed, produced.sent, &seqs, swapped.is_some());

    let nominal = cfg.warmup_s + cfg.duration_s;
    let elapsed = (produced.elapsed.as_secs_f64() + 1.0 / cfg.rate as f64).max(nominal);
    let achieved_rate = produced.sent as f64 / elapsed;
    let rate_ok = (achieved_rate / cfg.rate as f64 - 1.0).abs() <= RATE_TOLERANCE;

    let update = swapped.map(|s| {
        let guard = 1_000_000;
        UpdateOutcome {
            strategy: cfg.update_strategy,
            issued_at_s: (s.issued_us - start_us) as f64 / 1e6,
            update_time_ms: match &s.report {
                Some(r) => r.update_duration_ms as f64,
                None => (s.done_us - s.issued_us) as f64 / 1000.0,
            },
            report: s.report,
            rate_before: rate_between(&arrivals, window_start, s.issued_us - guard),
            rate_after: rate_between(&arrivals, s.done_us + guard, window_end),
        }
    });

    let metrics = RunMetrics {
        config: cfg.clone(),
        run,
        sent: produced.sent,
        achieved_rate,
        rate_ok,
        received: samples.len() as u64,
        total_rate: in_window as f64 / cfg.duration_s,
        throughput: Summary::of(bins.iter().map(|&b| b as f64)),
        throughput_bins: bins,
        latency_ms: Summary::of(latency_us.iter().map(|&l| l as f64 / 1000.0)),
        latency_us,
        downtime_ms: longest_gap(&arrivals, window_start, window_end) as f64 / 1000.0,
        expected,
        loss,
        duplicates,
        unexpected,
        update,
    };
    info!(
        mode = ?cfg.mode, query = ?cfg.query, rate = cfg.rate, run,
        total_rate = metrics.total_rate, loss, duplicates, "run finished"
    );
    if !rate_ok {
        return Err(BenchError::Rate { target: cfg.rate, achieved: achieved_rate, metrics: Box::new(metrics) });
    }
    Ok(metrics)
}

/// Runs repetition `run` of `cfg`. An `update_at` in the config swaps the
/// operator mid-run. A producer that cannot hold the rate yields
/// [`BenchError::Rate`], which still carries the metrics.
pub fn run_experiment(cfg: &RunConfig, run: u32, worker_bin: Option<&Path>) -> Result<RunMetrics, BenchError> {
    run_once(cfg, run, worker_bin)
}

/// A cepless run with an operator swap at `update_at` (default: the middle
/// of the measurement window).
pub fn run_update_experiment(cfg: &RunConfig, run: u32, worker_bin: Option<&Path>) -> Result<RunMetrics, BenchError> {
    let mut cfg = cfg.clone();
    if cfg.mode != Mode::Cepless {
        return Err(BenchError::InvalidConfig("updates need cepless mode".into()));
    }
    cfg.update_at_s.get_or_insert(cfg.warmup_s + cfg.duration_s / 2.0);
    run_once(&cfg, run, worker_bin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accounting_finds_the_cut() {
        let cfg = RunConfig { query: Query::Fraud, threshold: 0.9, update_threshold: 0.5, ..RunConfig::default() };
        let amounts: Vec<f64> = TransactionGenerator::new(3).take(2000).map(|e| amount(&e)).collect();
        let cut = 800;
        let received: Vec<u64> = amounts
            .iter()
            .enumerate()
            .filter(|&(s, &a)| a > if s < cut { 0.9 } else { 0.5 })
            .map(|(s, _)| s as u64)
            .collect();
        let (expected, loss, dup, unexpected) = account(&cfg, 3, 2000, &received, true);
        assert_eq!((expected, loss, dup, unexpected), (received.len() as u64, 0, 0, 0));

        // Dropping one post-cut band event is loss; an early band event is
        // explained by moving the cut, so a late one is missing instead.
        let band_after: u64 = received.iter().copied().find(|&s| s as usize > cut + 5 && amounts[s as usize] <= 0.9).unwrap();
        let fewer: Vec<u64> = received.iter().copied().filter(|&s| s != band_after).collect();
        assert_eq!(account(&cfg, 3, 2000, &fewer, true).1, 1);
        let mut dup = received.clone();
        dup.push(received[10]);
        assert_eq!(account(&cfg, 3, 2000, &dup, true).2, 1);
    }

    #[test]
    fn forward_accounting() {
        let cfg = RunConfig::default();
        assert_eq!(account(&cfg, 1, 5, &[0, 1, 2, 2, 4, 9], false), (5, 1, 1, 1));
    }
}
