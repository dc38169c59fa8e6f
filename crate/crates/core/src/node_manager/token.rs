//! Consumer tokens: at most one worker holds consume rights on an input
//! queue at any instant.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("queue {queue} is already consumed by worker generation {holder}")]
    Held { queue: String, holder: u64 },
    #[error("worker generation {generation} does not hold the token for {queue}")]
    NotHolder { queue: String, generation: u64 },
}

/// Token table keyed by input queue; holders are worker generations.
#[derive(Debug, Default)]
pub struct ConsumerTokens {
    holders: Mutex<HashMap<String, u64>>,
    grants: AtomicU64,
    refusals: AtomicU64,
}

impl ConsumerTokens {
    pub fn grant(&self, queue: &str, generation: u64) -> Result<(), TokenError> {
        let mut h = self.holders.lock().unwrap_or_else(|p| p.into_inner());
        match h.get(queue) {
            Some(&holder) if holder != generation => {
                self.refusals.fetch_add(1, Ordering::Relaxed);
                Err(TokenError::Held { queue: queue.to_owned(), holder })
            }
            _ => {
                h.insert(queue.to_owned(), generation);
                self.grants.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
        }
    }

    pub fn release(&self, queue: &str, generation: u64) -> Result<(), TokenError> {
        let mut h = self.holders.lock().unwrap_or_else(|p| p.into_inner());
        match h.get(queue) {
            Some(&holder) if holder == generation => {
                h.remove(queue);
                Ok(())
            }
            _ => Err(TokenError::NotHolder { queue: queue.to_owned(), generation }),
        }
    }

    pub fn holder(&self, queue: &str) -> Option<u64> {
        self.holders.lock().unwrap_or_else(|p| p.into_inner()).get(queue).copied()
    }

    pub fn grants(&self) -> u64 {
        self.grants.load(Ordering::Relaxed)
    }

    /// Grants refused because another worker still held the token. Always
    /// zero when the handoff protocol is followed.
    pub fn refusals(&self) -> u64 {
        self.refusals.load(Ordering::Relaxed)
    }
}
