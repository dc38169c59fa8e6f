//! Summary statistics over raw samples.

use serde::{Deserialize, Serialize};

/// Zero-based index of the nearest-rank `pct`-th percentile in a sorted
/// sample of size `n`: `ceil(pct/100 * n) - 1`, in integer arithmetic.
pub fn nearest_rank_index(n: usize, pct: u32) -> usize {
    assert!(n > 0 && (1..=100).contains(&pct));
    (pct as usize * n).div_ceil(100) - 1
}

/// The nearest-rank percentile of an ascending sample.
pub fn percentile(sorted: &[f64], pct: u32) -> Option<f64> {
    (!sorted.is_empty()).then(|| sorted[nearest_rank_index(sorted.len(), pct)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Summary> {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let sum: f64 = v.iter().sum();
        Some(Summary {
            count: v.len() as u64,
            mean: sum / v.len() as f64,
            min: v[0],
            max: v[v.len() - 1],
            p90: percentile(&v, 90)?,
            p95: percentile(&v, 95)?,
            p99: percentile(&v, 99)?,
        })
    }
}

/// Counts timestamps (µs) into one-second bins covering `[start, start + secs)`.
/// Timestamps outside the window are ignored.
pub fn per_second_bins(timestamps: impl IntoIterator<Item = i64>, start: i64, secs: u64) -> Vec<u64> {
    let mut bins = vec![0u64; secs as usize];
    for t in timestamps {
        if t < start {
            continue;
        }
        let k = ((t - start) / 1_000_000) as usize;
        if let Some(b) = bins.get_mut(k) {
            *b += 1;
        }
    }
    bins
}

/// Longest interval in `[start, end]` with no timestamp in it, in µs.
/// Window edges count as boundaries, so an empty window is one long gap.
pub fn longest_gap(sorted: &[i64], start: i64, end: i64) -> i64 {
    let mut prev = start;
    let mut gap = 0;
    for &t in sorted.iter().filter(|&&t| t >= start && t <= end) {
        gap = gap.max(t - prev);
        prev = t;
    }
    gap.max(end - prev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_small_cases() {
        assert_eq!(nearest_rank_index(1, 99), 0);
        assert_eq!(nearest_rank_index(100, 99), 98);
        assert_eq!(nearest_rank_index(100, 90), 89);
        assert_eq!(nearest_rank_index(101, 99), 99);
        assert_eq!(nearest_rank_index(10, 95), 9);
        assert_eq!(nearest_rank_index(20, 95), 18);
    }

    #[test]
    fn summary_of_known_sample() {
        let s = Summary::of((1..=100).map(f64::from)).unwrap();
        assert_eq!((s.count, s.mean, s.min, s.max), (100, 50.5, 1.0, 100.0));
        assert_eq!((s.p90, s.p95, s.p99), (90.0, 95.0, 99.0));
        assert!(Summary::of(Vec::new()).is_none());
    }

    #[test]
    fn bins_and_gaps() {
        let ts = [0, 10, 999_999, 1_000_000, 2_500_000, 7_000_000];
        assert_eq!(per_second_bins(ts, 0, 3), vec![3, 1, 1]);
        assert_eq!(longest_gap(&[100, 400, 500], 0, 1000), 500);
        assert_eq!(longest_gap(&[], 0, 1000), 1000);
    }
}
