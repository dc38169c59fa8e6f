//! One monotonic clock domain for producer and consumer timestamps.
//!
//! Timestamps are epoch microseconds, but they advance with
//! [`Instant`](std::time::Instant) after a process-wide anchor, so latency
//! differences taken within one process never go backwards.

use std::sync::OnceLock;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

struct Anchor {
    instant: Instant,
    epoch_micros: i64,
}

fn anchor() -> &'static Anchor {
    static ANCHOR: OnceLock<Anchor> = OnceLock::new();
    ANCHOR.get_or_init(|| Anchor {
        instant: Instant::now(),
        epoch_micros: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO)
            .as_micros() as i64,
    })
}

/// Current time in epoch microseconds, monotonic within this process.
pub fn now_micros() -> i64 {
    let a = anchor();
    a.epoch_micros + a.instant.elapsed().as_micros() as i64
}

/// `at` in the same domain as [`now_micros`].
pub fn micros_at(at: Instant) -> i64 {
    let a = anchor();
    a.epoch_micros + at.saturating_duration_since(a.instant).as_micros() as i64
}
