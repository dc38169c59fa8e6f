use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

/// Linear poll back-off: the k-th consecutive empty poll sleeps
/// `k * increment`, capped at `cap`; any non-empty poll resets to zero.
#[derive(Debug, Clone)]
pub struct Backoff {
    increment: Duration,
    cap: Duration,
    current: Duration,
}

impl Backoff {
    pub fn new(increment: Duration, cap: Duration) -> Self {
        Backoff { increment, cap, current: Duration::ZERO }
    }

    /// Registers an empty poll and returns how long to sleep.
    pub fn on_empty(&mut self) -> Duration {
        self.current = (self.current + self.increment).min(self.cap);
        self.current
    }

    pub fn reset(&mut self) {
        self.current = Duration::ZERO;
    }

    pub fn current(&self) -> Duration {
        self.current
    }
}

/// Where poll loops sleep. Injected so tests can observe the schedule.
pub trait Sleeper: Send + 'static {
    fn sleep(&mut self, d: Duration);
}

/// Sleeps on the OS timer. Durations below `min_sleep` are realized as a
/// yield: the timer cannot express them, and a zero back-off means "poll
/// again right away".
#[derive(Debug, Clone)]
pub struct RealSleeper {
    pub min_sleep: Duration,
}

impl Default for RealSleeper {
    fn default() -> Self {
        RealSleeper { min_sleep: Duration::from_micros(50) }
    }
}

impl Sleeper for RealSleeper {
    fn sleep(&mut self, d: Duration) {
        if d < self.min_sleep {
            thread::yield_now();
        } else {
            thread::sleep(d);
        }
    }
}

/// Records requested sleeps instead of sleeping; clones share the record.
#[derive(Debug, Clone, Default)]
pub struct FakeClock {
    sleeps: Arc<Mutex<Vec<Duration>>>,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Sum of all recorded sleeps.
    pub fn elapsed(&self) -> Duration {
        self.sleeps().iter().sum()
    }
}

impl Sleeper for FakeClock {
    fn sleep(&mut self, d: Duration) {
        self.sleeps.lock().unwrap_or_else(|p| p.into_inner()).push(d);
    }
}
