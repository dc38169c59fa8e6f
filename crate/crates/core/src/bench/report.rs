use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::Summary;
use super::{Mode, Query, RunMetrics, UpdateStrategy};
use crate::canonical::to_canonical;

/// Pooled statistics for all runs sharing mode, query, rate and update strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: Mode,
    pub query: Query,
    pub rate: u64,
    pub update: Option<UpdateStrategy>,
    pub runs: u32,
    /// Over every per-second bin of every run.
    pub throughput: Option<Summary>,
    /// Over every latency sample of every run, in milliseconds.
    pub latency_ms: Option<Summary>,
    pub total_rate_mean: f64,
    pub loss: u64,
    pub duplicates: u64,
    pub downtime_ms_max: f64,
    pub update_time_ms_mean: Option<f64>,
}

type GroupKey = (Mode, Query, u64, Option<UpdateStrategy>);

pub fn aggregate(runs: &[RunMetrics]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunMetrics>> = BTreeMap::new();
    for m in runs {
        let c = &m.config;
        let key = (c.mode, c.query, c.rate, m.update.as_ref().map(|u| u.strategy));
        groups.entry(key).or_default().push(m);
    }
    groups
        .into_iter()
        .map(|((mode, query, rate, update), ms)| {
            let n = ms.len();
            let updates: Vec<f64> = ms.iter().filter_map(|m| m.update.as_ref().map(|u| u.update_time_ms)).collect();
            AggregateRow {
                mode,
                query,
                rate,
                update,
                runs: n as u32,
                throughput: Summary::of(ms.iter().flat_map(|m| m.throughput_bins.iter().map(|&b| b as f64))),
                latency_ms: Summary::of(ms.iter().flat_map(|m| m.latency_us.iter().map(|&l| l as f64 / 1000.0))),
                total_rate_mean: ms.iter().map(|m| m.total_rate).sum::<f64>() / n as f64,
                loss: ms.iter().map(|m| m.loss).sum(),
                duplicates: ms.iter().map(|m| m.duplicates).sum(),
                downtime_ms_max: ms.iter().map(|m| m.downtime_ms).fold(0.0, f64::max),
                update_time_ms_mean: (!updates.is_empty()).then(|| updates.iter().sum::<f64>() / updates.len() as f64),
            }
        })
        .collect()
}

fn cells(s: &Option<Summary>, prec: usize) -> String {
    match s {
        Some(s) => format!(
            "{:>10.p$} {:>10.p$} {:>10.p$} {:>10.p$} {:>10.p$} {:>10.p$}",
            s.mean,
            s.min,
            s.max,
            s.p90,
            s.p95,
            s.p99,
            p = prec
        ),
        None => format!("{:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "-", "-", "-", "-", "-", "-"),
    }
}

/// Throughput (events/s) and latency (ms) tables.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    let head = format!("{:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "mean", "min", "max", "p90", "p95", "p99");
    let label = |r: &AggregateRow| {
        let upd = r.update.map(|u| format!("/{u:?}").to_lowercase()).unwrap_or_default();
        format!("{:?}/{:?}{upd}", r.mode, r.query).to_lowercase()
    };
    let _ = writeln!(out, "Throughput (events/s per second bin)");
    let _ = writeln!(out, "{:<24} {:>7} {:>4} {head} {:>10} {:>6} {:>6}", "setup", "rate", "runs", "total/s", "loss", "dups");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>4} {} {:>10.1} {:>6} {:>6}",
            label(r),
            r.rate,
            r.runs,
            cells(&r.throughput, 1),
            r.total_rate_mean,
            r.loss,
            r.duplicates
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Latency (ms)");
    let _ = writeln!(out, "{:<24} {:>7} {:>4} {head} {:>10} {:>10}", "setup", "rate", "runs", "downtime", "update");
    for r in rows {
        let upd = r.update_time_ms_mean.map(|u| format!("{u:.1}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>4} {} {:>10.1} {:>10}",
            label(r),
            r.rate,
            r.runs,
            cells(&r.latency_ms, 3),
            r.downtime_ms_max,
            upd
        );
    }
    out
}

/// Writes one canonical metrics document per run plus the aggregate into
/// `out_dir` (when given) and returns the rendered table.
pub fn emit_report(runs: &[RunMetrics], out_dir: Option<&Path>) -> io::Result<String> {
    let rows = aggregate(runs);
    let table = render_table(&rows);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (i, m) in runs.iter().enumerate() {
            let c = &m.config;
            let name = format!("run-{:03}-{:?}-{:?}-{}-{}.json", i, c.mode, c.query, c.rate, m.run).to_lowercase();
            std::fs::write(dir.join(name), to_canonical(m)?)?;
        }
        std::fs::write(dir.join("aggregate.json"), to_canonical(&rows)?)?;
        std::fs::write(dir.join("report.txt"), &table)?;
    }
    Ok(table)
}
