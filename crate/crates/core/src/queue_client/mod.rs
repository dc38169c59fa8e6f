//! The batching queue client.
//!
//! A host-side client owns two background workers. The send worker drains
//! the [`SendBuffer`] in batches of at most `out_batch_size` events, compiles
//! each batch into one pipelined burst of `PUSH` frames and flushes it with
//! a single write. The receive worker ranges up to `in_batch_size` results
//! at a time from the output queue and hands them to a callback. Both back
//! off linearly while their queue is empty and reset after any activity.
//!
//! Consumption is `RANGE` followed by `TRIM` of exactly the number of items
//! received. The trim rides along with the next `RANGE` in the same flush,
//! so each poll is still one round trip. If a flush fails midway, the
//! unconfirmed trim is dropped: delivery is at-least-once across transport
//! failures, and callers can de-duplicate on `seq`.

mod backoff;
mod buffer;
mod client;
mod transport;

use std::time::Duration;

use thiserror::Error;

pub use backoff::{Backoff, FakeClock, RealSleeper, Sleeper};
pub use buffer::SendBuffer;
pub use client::{
    BatchingReceiver, BatchingSender, CallbackError, QueueClient, ReceiveLoop, ReceiverStats, RecvStep, SendLoop,
    SendStep,
};
pub use transport::{Connection, Transport};

use crate::event::EncodingError;
use crate::wire::FrameError;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("send buffer full ({limit} events); slow down")]
    Backpressure { limit: usize },
    #[error("client is stopped")]
    Stopped,
    #[error("client already stopped")]
    AlreadyStopped,
    #[error("shutdown timed out with {unflushed} events unflushed")]
    ShutdownTimeout { unflushed: usize },
    #[error("invalid batching config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

impl From<FrameError> for ClientError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Io(e) => ClientError::Io(e),
            other => ClientError::Protocol(other.to_string()),
        }
    }
}

/// Batching and back-off parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchingConfig {
    /// Most events compiled into one send flush.
    pub out_batch_size: usize,
    /// Most events fetched by one range query.
    pub in_batch_size: usize,
    /// Added to the sleep on every consecutive empty poll. Zero polls
    /// again right away (with a yield).
    pub backoff_increment: Duration,
    pub backoff_cap: Duration,
    /// Send-side buffer bound; beyond it `receive_event` reports backpressure.
    pub send_buffer_limit: usize,
    /// How long `stop` waits for the send buffer to flush.
    pub shutdown_timeout: Duration,
}

pub const DEFAULT_BACKOFF_CAP: Duration = Duration::from_millis(10);
pub const DEFAULT_SEND_BUFFER_LIMIT: usize = 1_000_000;

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            out_batch_size: 1000,
            in_batch_size: 1000,
            backoff_increment: Duration::from_nanos(1),
            backoff_cap: DEFAULT_BACKOFF_CAP,
            send_buffer_limit: DEFAULT_SEND_BUFFER_LIMIT,
            shutdown_timeout: Duration::from_secs(5),
        }
    }
}

impl BatchingConfig {
    /// One event per flush, one event per range, no back-off.
    pub fn unbatched() -> Self {
        BatchingConfig {
            out_batch_size: 1,
            in_batch_size: 1,
            backoff_increment: Duration::ZERO,
            backoff_cap: Duration::ZERO,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.out_batch_size == 0 || self.in_batch_size == 0 {
            return Err(ClientError::InvalidConfig("batch sizes must be at least 1".into()));
        }
        if self.backoff_cap < self.backoff_increment {
            return Err(ClientError::InvalidConfig("backoff cap must not be below the increment".into()));
        }
        if self.send_buffer_limit == 0 {
            return Err(ClientError::InvalidConfig("send buffer limit must be at least 1".into()));
        }
        Ok(())
    }

    pub fn backoff(&self) -> Backoff {
        Backoff::new(self.backoff_increment, self.backoff_cap)
    }
}
