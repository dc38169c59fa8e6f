//! The operator worker loop and the built-in reference operators.
//!
//! A worker is configured entirely through environment variables:
//!
//! | variable             | meaning                                   |
//! |----------------------|-------------------------------------------|
//! | `CEPLESS_QUEUE_ADDR` | queue server `host:port`                  |
//! | `CEPLESS_IN_QUEUE`   | queue to consume events from              |
//! | `CEPLESS_OUT_QUEUE`  | queue to push results to                  |
//! | `CEPLESS_CTL_QUEUE`  | lifecycle handshake queue                 |
//! | `CEPLESS_BATCH_SIZE` | most events ranged per poll               |
//! | `CEPLESS_BACKOFF_NS` | linear back-off increment in nanoseconds  |
//!
//! Lifecycle on the control queue (payloads are plain ASCII):
//!
//! 1. the worker pushes `__ready__` once connected;
//! 2. it waits, without consuming, until `__start__` is visible;
//! 3. it pushes `__started__` and begins processing;
//! 4. when `__drain__` becomes visible it completes the batch in hand,
//!    pushes `__drained__` and exits with status 0.
//!
//! Workers only peek at the control queue (`RANGE`, never `TRIM`); the node
//! manager owns clearing it.

use std::collections::BTreeMap;
use std::env;
use std::thread;
use std::time::Duration;

use thiserror::Error;
use tracing::{info, warn};

use crate::event::{dead_letter_queue, decode_event, Scalar};
use crate::queue_client::{Backoff, ClientError, Connection, RealSleeper, Sleeper, Transport, DEFAULT_BACKOFF_CAP};
use crate::wire::{self, Reply};

pub const ENV_QUEUE_ADDR: &str = "CEPLESS_QUEUE_ADDR";
pub const ENV_IN_QUEUE: &str = "CEPLESS_IN_QUEUE";
pub const ENV_OUT_QUEUE: &str = "CEPLESS_OUT_QUEUE";
pub const ENV_CTL_QUEUE: &str = "CEPLESS_CTL_QUEUE";
pub const ENV_BATCH_SIZE: &str = "CEPLESS_BATCH_SIZE";
pub const ENV_BACKOFF_NS: &str = "CEPLESS_BACKOFF_NS";

const PAUSED_POLL: Duration = Duration::from_millis(1);

pub const CTL_READY: &[u8] = b"__ready__";
pub const CTL_START: &[u8] = b"__start__";
pub const CTL_STARTED: &[u8] = b"__started__";
pub const CTL_DRAIN: &[u8] = b"__drain__";
pub const CTL_DRAINED: &[u8] = b"__drained__";

/// How many control payloads a worker peeks at per poll.
const CTL_PEEK: &str = "64";

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("invalid value for {0}: {1}")]
    InvalidEnv(&'static str, String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Everything a worker learns from its environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerContext {
    pub queue_addr: String,
    pub in_queue: String,
    pub out_queue: String,
    pub ctl_queue: String,
    pub batch_size: usize,
    pub backoff_increment: Duration,
}

impl WorkerContext {
    pub fn from_env() -> Result<Self, WorkerError> {
        Self::from_lookup(|k| env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, WorkerError> {
        let req = |k: &'static str| get(k).filter(|v| !v.is_empty()).ok_or(WorkerError::MissingEnv(k));
        let queue_addr = req(ENV_QUEUE_ADDR)?;
        let in_queue = req(ENV_IN_QUEUE)?;
        let out_queue = req(ENV_OUT_QUEUE)?;
        let ctl_queue = req(ENV_CTL_QUEUE)?;
        let batch_raw = req(ENV_BATCH_SIZE)?;
        let backoff_raw = req(ENV_BACKOFF_NS)?;
        let batch_size = batch_raw
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or(WorkerError::InvalidEnv(ENV_BATCH_SIZE, batch_raw))?;
        let backoff_ns = backoff_raw.parse::<u64>().map_err(|_| WorkerError::InvalidEnv(ENV_BACKOFF_NS, backoff_raw))?;
        Ok(WorkerContext {
            queue_addr,
            in_queue,
            out_queue,
            ctl_queue,
            batch_size,
            backoff_increment: Duration::from_nanos(backoff_ns),
        })
    }

    /// The variables a node manager passes to a worker.
    pub fn to_env(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            (ENV_QUEUE_ADDR, self.queue_addr.clone()),
            (ENV_IN_QUEUE, self.in_queue.clone()),
            (ENV_OUT_QUEUE, self.out_queue.clone()),
            (ENV_CTL_QUEUE, self.ctl_queue.clone()),
            (ENV_BATCH_SIZE, self.batch_size.to_string()),
            (ENV_BACKOFF_NS, self.backoff_increment.as_nanos().to_string()),
        ])
    }

    /// Instance id, taken from the input queue name.
    pub fn instance_id(&self) -> &str {
        self.in_queue.strip_suffix("-in").unwrap_or(&self.in_queue)
    }
}

/// Why an event could not be processed; the payload goes to the dead-letter queue.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct OperatorError(pub String);

/// The user function of an operator: zero or more outputs per input.
pub trait OperatorFn: Send {
    fn apply(&mut self, payload: &[u8], out: &mut Vec<Vec<u8>>) -> Result<(), OperatorError>;
}

/// Emits every input unchanged.
#[derive(Debug, Default, Clone)]
pub struct Forward;

impl OperatorFn for Forward {
    fn apply(&mut self, payload: &[u8], out: &mut Vec<Vec<u8>>) -> Result<(), OperatorError> {
        out.push(payload.to_vec());
        Ok(())
    }
}

/// The fraud filter predicate: strictly above the threshold.
pub fn is_fraud(amount: f64, threshold: f64) -> bool {
    amount > threshold
}

/// Emits an event, byte-for-byte, iff its `amount` exceeds the threshold.
#[derive(Debug, Clone)]
pub struct FraudFilter {
    pub threshold: f64,
}

impl OperatorFn for FraudFilter {
    fn apply(&mut self, payload: &[u8], out: &mut Vec<Vec<u8>>) -> Result<(), OperatorError> {
        let e = decode_event(payload).map_err(|e| OperatorError(e.to_string()))?;
        let amount = match e.attr("amount") {
            Some(Scalar::Float(f)) => *f,
            Some(Scalar::Int(i)) => *i as f64,
            _ => return Err(OperatorError("event has no numeric `amount`".into())),
        };
        if is_fraud(amount, self.threshold) {
            out.push(payload.to_vec());
        }
        Ok(())
    }
}

/// Wraps an operator and sleeps per event; used to model slow operators.
pub struct Slowed<O> {
    pub inner: O,
    pub per_event: Duration,
}

impl<O: OperatorFn> OperatorFn for Slowed<O> {
    fn apply(&mut self, payload: &[u8], out: &mut Vec<Vec<u8>>) -> Result<(), OperatorError> {
        thread::sleep(self.per_event);
        self.inner.apply(payload, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    Drained,
}

fn expect_ok(replies: &[Reply]) -> Result<(), ClientError> {
    match replies.iter().find(|r| matches!(r, Reply::Err(_))) {
        Some(Reply::Err(msg)) => Err(ClientError::Server(msg.clone())),
        _ => Ok(()),
    }
}

fn has_ctl(items: &[Vec<u8>], msg: &[u8]) -> bool {
    items.iter().any(|p| p == msg)
}

/// One operator instance's processing loop.
pub struct Worker<O, T = Connection, S = RealSleeper> {
    ctx: WorkerContext,
    op: O,
    transport: T,
    sleeper: S,
    backoff: Backoff,
    dlq: String,
}

impl<O: OperatorFn> Worker<O> {
    pub fn connect(ctx: WorkerContext, op: O) -> Result<Self, WorkerError> {
        let conn = Connection::connect(ctx.queue_addr.as_str())?;
        Ok(Self::with_transport(ctx, op, conn, RealSleeper::default()))
    }
}

impl<O: OperatorFn, T: Transport, S: Sleeper> Worker<O, T, S> {
    pub fn with_transport(ctx: WorkerContext, op: O, transport: T, sleeper: S) -> Self {
        let backoff = Backoff::new(ctx.backoff_increment, DEFAULT_BACKOFF_CAP.max(ctx.backoff_increment));
        let dlq = dead_letter_queue(ctx.instance_id());
        Worker { ctx, op, transport, sleeper, backoff, dlq }
    }

    fn push_ctl(&mut self, msg: &[u8]) -> Result<(), ClientError> {
        let mut frame = Vec::new();
        wire::encode_request(&[b"PUSH".as_slice(), self.ctx.ctl_queue.as_bytes(), msg], &mut frame);
        expect_ok(&self.transport.round_trip(&frame, 1)?)
    }

    fn peek_ctl(&mut self) -> Result<Vec<Vec<u8>>, ClientError> {
        let mut frame = Vec::new();
        wire::encode_request(&["RANGE", self.ctx.ctl_queue.as_str(), "0", CTL_PEEK], &mut frame);
        match self.transport.round_trip(&frame, 1)?.pop() {
            Some(Reply::Array(items)) => Ok(items),
            other => Err(ClientError::Protocol(format!("control RANGE replied {other:?}"))),
        }
    }

    /// Announces readiness and blocks until activated.
    pub fn await_start(&mut self) -> Result<(), WorkerError> {
        self.push_ctl(CTL_READY)?;
        loop {
            if has_ctl(&self.peek_ctl()?, CTL_START) {
                self.push_ctl(CTL_STARTED)?;
                self.backoff.reset();
                return Ok(());
            }
            // Paused workers poll gently; only the processing loop is latency-bound.
            let d = self.backoff.on_empty().max(PAUSED_POLL);
            self.sleeper.sleep(d);
        }
    }

    /// Processes batches until drained.
    pub fn process(&mut self) -> Result<ExitReason, WorkerError> {
        let batch = self.ctx.batch_size.to_string();
        let mut frames = Vec::new();
        let mut outputs: Vec<Vec<u8>> = Vec::new();
        let mut dead: Vec<Vec<u8>> = Vec::new();
        let mut consumed = 0usize;
        loop {
            // Results and the trim of the batch they came from go out in the
            // same flush as the next poll.
            frames.clear();
            let mut expected = 2;
            for p in outputs.drain(..) {
                wire::encode_request(&[b"PUSH".as_slice(), self.ctx.out_queue.as_bytes(), &p], &mut frames);
                expected += 1;
            }
            for p in dead.drain(..) {
                wire::encode_request(&[b"PUSH".as_slice(), self.dlq.as_bytes(), &p], &mut frames);
                expected += 1;
            }
            if consumed > 0 {
                wire::encode_request(&["TRIM", self.ctx.in_queue.as_str(), &consumed.to_string()], &mut frames);
                expected += 1;
                consumed = 0;
            }
            wire::encode_request(&["RANGE", self.ctx.in_queue.as_str(), "0", batch.as_str()], &mut frames);
            wire::encode_request(&["RANGE", self.ctx.ctl_queue.as_str(), "0", CTL_PEEK], &mut frames);
            let mut replies = self.transport.round_trip(&frames, expected)?;
            let ctl = match replies.pop() {
                Some(Reply::Array(items)) => items,
                other => return Err(ClientError::Protocol(format!("control RANGE replied {other:?}")).into()),
            };
            let input = match replies.pop() {
                Some(Reply::Array(items)) => items,
                other => return Err(ClientError::Protocol(format!("RANGE replied {other:?}")).into()),
            };
            expect_ok(&replies)?;
            if has_ctl(&ctl, CTL_DRAIN) {
                // The batch just ranged stays untrimmed for the successor.
                self.push_ctl(CTL_DRAINED)?;
                return Ok(ExitReason::Drained);
            }
            if input.is_empty() {
                let d = self.backoff.on_empty();
                self.sleeper.sleep(d);
                continue;
            }
            for payload in &input {
                if let Err(e) = self.op.apply(payload, &mut outputs) {
                    warn!(error = %e, "operator rejected event; dead-lettering");
                    dead.push(payload.clone());
                }
            }
            consumed = input.len();
            self.backoff.reset();
        }
    }

    pub fn run(&mut self) -> Result<ExitReason, WorkerError> {
        self.await_start()?;
        info!(queue = %self.ctx.in_queue, "worker started");
        self.process()
    }
}
