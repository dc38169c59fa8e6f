use std::net::ToSocketAddrs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, warn};

use super::{Backoff, BatchingConfig, ClientError, Connection, RealSleeper, SendBuffer, Sleeper, Transport};
use crate::event::{encode_event, Event, QueuePair};
use crate::wire::{self, Reply};

pub type CallbackError = Box<dyn std::error::Error + Send + Sync>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

struct SendShared {
    buffer: Mutex<SendBuffer<Vec<u8>>>,
    stopping: AtomicBool,
    abort: AtomicBool,
    done: Mutex<bool>,
    done_cv: Condvar,
    flushes: AtomicU64,
    flushed_events: AtomicU64,
}

/// What one pass of the send loop did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendStep {
    /// A batch of this many events was flushed and acknowledged.
    Flushed(usize),
    /// The buffer was empty; slept for the given back-off.
    Idle(Duration),
    /// The flush failed; the batch went back to the front of the buffer.
    Retrying(String),
}

/// The send worker's state machine, one [`step`](Self::step) per loop pass.
pub struct SendLoop<T: Transport, S: Sleeper> {
    shared: Arc<SendShared>,
    queue: String,
    out_batch_size: usize,
    backoff: Backoff,
    transport: T,
    sleeper: S,
    frames: Vec<u8>,
}

impl<T: Transport, S: Sleeper> SendLoop<T, S> {
    pub fn step(&mut self) -> SendStep {
        let batch = lock(&self.shared.buffer).take_front(self.out_batch_size);
        if batch.is_empty() {
            let d = self.backoff.on_empty();
            self.sleeper.sleep(d);
            return SendStep::Idle(d);
        }
        self.frames.clear();
        for payload in &batch {
            wire::encode_request(&[b"PUSH".as_slice(), self.queue.as_bytes(), payload], &mut self.frames);
        }
        let failure = match self.transport.round_trip(&self.frames, batch.len()) {
            Ok(replies) => {
                let rejected: Vec<usize> = replies
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| matches!(r, Reply::Err(_)).then_some(i))
                    .collect();
                if rejected.is_empty() {
                    let n = batch.len();
                    self.shared.flushes.fetch_add(1, Ordering::Relaxed);
                    self.shared.flushed_events.fetch_add(n as u64, Ordering::Relaxed);
                    self.backoff.reset();
                    return SendStep::Flushed(n);
                }
                // Requeue only what the server refused (e.g. `queue full`).
                let msg = format!("{:?}", replies[rejected[0]]);
                let accepted = batch.len() - rejected.len();
                self.shared.flushed_events.fetch_add(accepted as u64, Ordering::Relaxed);
                let mut batch: Vec<Option<Vec<u8>>> = batch.into_iter().map(Some).collect();
                let retry = rejected.iter().map(|&i| batch[i].take().expect("unique index")).collect();
                lock(&self.shared.buffer).restore_front(retry);
                msg
            }
            Err(e) => {
                lock(&self.shared.buffer).restore_front(batch);
                if let Err(e) = self.transport.reconnect() {
                    debug!(error = %e, "reconnect failed");
                }
                e.to_string()
            }
        };
        warn!(queue = %self.queue, reason = %failure, "send flush failed; retrying");
        let d = self.backoff.on_empty().max(Duration::from_millis(1));
        self.sleeper.sleep(d);
        SendStep::Retrying(failure)
    }

    fn run(mut self) {
        loop {
            if self.shared.abort.load(Ordering::SeqCst) {
                break;
            }
            if self.shared.stopping.load(Ordering::SeqCst) && lock(&self.shared.buffer).is_empty() {
                break;
            }
            self.step();
        }
        *lock(&self.shared.done) = true;
        self.shared.done_cv.notify_all();
    }
}

/// Host-side sender to one queue: `receive_event` buffers, a background
/// worker flushes.
pub struct BatchingSender {
    shared: Arc<SendShared>,
    stopped: AtomicBool,
    shutdown_timeout: Duration,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl BatchingSender {
    pub fn start(addr: impl ToSocketAddrs, queue: &str, config: &BatchingConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let conn = Connection::connect(addr)?;
        Self::start_with(conn, RealSleeper::default(), queue, config)
    }

    pub fn start_with<T: Transport, S: Sleeper>(
        transport: T,
        sleeper: S,
        queue: &str,
        config: &BatchingConfig,
    ) -> Result<Self, ClientError> {
        let (sender, send_loop) = Self::detached(transport, sleeper, queue, config)?;
        let handle = thread::Builder::new()
            .name(format!("send-{queue}"))
            .spawn(move || send_loop.run())?;
        *lock(&sender.worker) = Some(handle);
        Ok(sender)
    }

    /// Builds the sender and its loop without starting a thread; the caller
    /// drives [`SendLoop::step`] by hand.
    pub fn detached<T: Transport, S: Sleeper>(
        transport: T,
        sleeper: S,
        queue: &str,
        config: &BatchingConfig,
    ) -> Result<(Self, SendLoop<T, S>), ClientError> {
        config.validate()?;
        let shared = Arc::new(SendShared {
            buffer: Mutex::new(SendBuffer::new(config.send_buffer_limit)),
            stopping: AtomicBool::new(false),
            abort: AtomicBool::new(false),
            done: Mutex::new(false),
            done_cv: Condvar::new(),
            flushes: AtomicU64::new(0),
            flushed_events: AtomicU64::new(0),
        });
        let send_loop = SendLoop {
            shared: shared.clone(),
            queue: queue.to_owned(),
            out_batch_size: config.out_batch_size,
            backoff: config.backoff(),
            transport,
            sleeper,
            frames: Vec::new(),
        };
        let sender = BatchingSender {
            shared,
            stopped: AtomicBool::new(false),
            shutdown_timeout: config.shutdown_timeout,
            worker: Mutex::new(None),
        };
        Ok((sender, send_loop))
    }

    /// Buffers one event for sending; never touches the network.
    pub fn receive_event(&self, e: &Event) -> Result<(), ClientError> {
        self.receive_payload(encode_event(e)?)
    }

    /// Buffers an already encoded payload.
    pub fn receive_payload(&self, payload: Vec<u8>) -> Result<(), ClientError> {
        if self.stopped.load(Ordering::SeqCst) {
            return Err(ClientError::Stopped);
        }
        let mut buf = lock(&self.shared.buffer);
        let limit = buf.limit();
        buf.push(payload).map_err(|_| ClientError::Backpressure { limit })
    }

    pub fn buffered(&self) -> usize {
        lock(&self.shared.buffer).len()
    }

    pub fn high_water(&self) -> usize {
        lock(&self.shared.buffer).high_water()
    }

    /// Number of acknowledged flushes so far.
    pub fn flushes(&self) -> u64 {
        self.shared.flushes.load(Ordering::Relaxed)
    }

    pub fn flushed_events(&self) -> u64 {
        self.shared.flushed_events.load(Ordering::Relaxed)
    }

    /// Flushes what is buffered, then joins the worker.
    pub fn stop(&self) -> Result<(), ClientError> {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return Err(ClientError::AlreadyStopped);
        }
        self.shared.stopping.store(true, Ordering::SeqCst);
        let Some(handle) = lock(&self.worker).take() else {
            return Ok(());
        };
        let deadline = Instant::now() + self.shutdown_timeout;
        let mut done = lock(&self.shared.done);
        while !*done {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            done = self.shared.done_cv.wait_timeout(done, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
        let finished = *done;
        drop(done);
        if !finished {
            self.shared.abort.store(true, Ordering::SeqCst);
            let _ = handle.join();
            return Err(ClientError::ShutdownTimeout { unflushed: self.buffered() });
        }
        let _ = handle.join();
        Ok(())
    }
}

impl Drop for BatchingSender {
    fn drop(&mut self) {
        if !self.stopped.load(Ordering::SeqCst) {
            self.shared.abort.store(true, Ordering::SeqCst);
            if let Some(h) = lock(&self.worker).take() {
                let _ = h.join();
            }
        }
    }
}

/// Round-trip and delivery counters of a receive worker.
#[derive(Debug, Default)]
pub struct ReceiverStats {
    pub round_trips: AtomicU64,
    pub delivered: AtomicU64,
    pub callback_failures: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecvStep {
    Delivered(usize),
    Idle(Duration),
    CallbackFailed(usize),
    Retrying(String),
}

/// The receive worker's state machine.
pub struct ReceiveLoop<T: Transport, S: Sleeper, F> {
    queue: String,
    in_batch_size: usize,
    backoff: Backoff,
    transport: T,
    sleeper: S,
    on_events: F,
    /// Items delivered but not yet trimmed server-side.
    pending_trim: usize,
    /// A batch whose callback failed; redelivered before any new range.
    retry: Option<Vec<Vec<u8>>>,
    stats: Arc<ReceiverStats>,
    frames: Vec<u8>,
}

impl<T, S, F> ReceiveLoop<T, S, F>
where
    T: Transport,
    S: Sleeper,
    F: FnMut(&[Vec<u8>]) -> Result<(), CallbackError> + Send + 'static,
{
    pub fn new(transport: T, sleeper: S, queue: &str, config: &BatchingConfig, on_events: F) -> Self {
        ReceiveLoop {
            queue: queue.to_owned(),
            in_batch_size: config.in_batch_size,
            backoff: config.backoff(),
            transport,
            sleeper,
            on_events,
            pending_trim: 0,
            retry: None,
            stats: Arc::new(ReceiverStats::default()),
            frames: Vec::new(),
        }
    }

    pub fn stats(&self) -> Arc<ReceiverStats> {
        self.stats.clone()
    }

    fn deliver(&mut self, batch: Vec<Vec<u8>>) -> RecvStep {
        let n = batch.len();
        match (self.on_events)(&batch) {
            Ok(()) => {
                self.stats.delivered.fetch_add(n as u64, Ordering::Relaxed);
                self.backoff.reset();
                RecvStep::Delivered(n)
            }
            Err(e) => {
                warn!(queue = %self.queue, error = %e, "event callback failed; will redeliver");
                self.stats.callback_failures.fetch_add(1, Ordering::Relaxed);
                self.retry = Some(batch);
                let d = self.backoff.on_empty().max(Duration::from_millis(1));
                self.sleeper.sleep(d);
                RecvStep::CallbackFailed(n)
            }
        }
    }

    pub fn step(&mut self) -> RecvStep {
        if let Some(batch) = self.retry.take() {
            return self.deliver(batch);
        }
        self.frames.clear();
        let mut expected = 1;
        let trim = self.pending_trim.to_string();
        if self.pending_trim > 0 {
            wire::encode_request(&["TRIM", self.queue.as_str(), trim.as_str()], &mut self.frames);
            expected += 1;
        }
        wire::encode_request(&["RANGE", self.queue.as_str(), "0", &self.in_batch_size.to_string()], &mut self.frames);
        self.stats.round_trips.fetch_add(1, Ordering::Relaxed);
        let replies = match self.transport.round_trip(&self.frames, expected) {
            Ok(r) => r,
            Err(e) => {
                // Unknown whether the trim landed; re-reading beats losing items.
                self.pending_trim = 0;
                if let Err(e) = self.transport.reconnect() {
                    debug!(error = %e, "reconnect failed");
                }
                let d = self.backoff.on_empty().max(Duration::from_millis(1));
                self.sleeper.sleep(d);
                return RecvStep::Retrying(e.to_string());
            }
        };
        self.pending_trim = 0;
        match replies.into_iter().last() {
            Some(Reply::Array(items)) if items.is_empty() => {
                let d = self.backoff.on_empty();
                self.sleeper.sleep(d);
                RecvStep::Idle(d)
            }
            Some(Reply::Array(items)) => {
                self.pending_trim = items.len();
                self.deliver(items)
            }
            other => {
                let msg = format!("unexpected RANGE reply {other:?}");
                let d = self.backoff.on_empty().max(Duration::from_millis(1));
                self.sleeper.sleep(d);
                RecvStep::Retrying(msg)
            }
        }
    }

    /// Trims anything delivered but not yet trimmed.
    pub fn finish(&mut self) -> Result<(), ClientError> {
        if let Some(batch) = self.retry.take() {
            // Never delivered, so it stays in the queue.
            self.pending_trim -= batch.len();
            warn!(queue = %self.queue, left = batch.len(), "stopping with an undelivered batch");
        }
        if self.pending_trim > 0 {
            let mut frame = Vec::new();
            wire::encode_request(&["TRIM", self.queue.as_str(), &self.pending_trim.to_string()], &mut frame);
            self.transport.round_trip(&frame, 1)?;
            self.pending_trim = 0;
        }
        Ok(())
    }
}

/// Host-side receiver from one queue, delivering batches on its own thread.
pub struct BatchingReceiver {
    stopping: Arc<AtomicBool>,
    stopped: AtomicBool,
    stats: Arc<ReceiverStats>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl BatchingReceiver {
    pub fn start<F>(addr: impl ToSocketAddrs, queue: &str, config: &BatchingConfig, on_events: F) -> Result<Self, ClientError>
    where
        F: FnMut(&[Vec<u8>]) -> Result<(), CallbackError> + Send + 'static,
    {
        config.validate()?;
        let conn = Connection::connect(addr)?;
        Self::start_with(conn, RealSleeper::default(), queue, config, on_events)
    }

    pub fn start_with<T, S, F>(transport: T, sleeper: S, queue: &str, config: &BatchingConfig, on_events: F) -> Result<Self, ClientError>
    where
        T: Transport,
        S: Sleeper,
        F: FnMut(&[Vec<u8>]) -> Result<(), CallbackError> + Send + 'static,
    {
        config.validate()?;
        let mut recv_loop = ReceiveLoop::new(transport, sleeper, queue, config, on_events);
        let stats = recv_loop.stats();
        let stopping = Arc::new(AtomicBool::new(false));
        let flag = stopping.clone();
        let handle = thread::Builder::new().name(format!("recv-{queue}")).spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                recv_loop.step();
            }
            if let Err(e) = recv_loop.finish() {
                warn!(error = %e, "final trim failed");
            }
        })?;
        Ok(BatchingReceiver { stopping, stopped: AtomicBool::new(false), stats, worker: Mutex::new(Some(handle)) })
    }

    pub fn stats(&self) -> &ReceiverStats {
        &self.stats
    }

    pub fn stop(&self) -> Result<(), ClientError> {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return Err(ClientError::AlreadyStopped);
        }
        self.stopping.store(true, Ordering::SeqCst);
        if let Some(h) = lock(&self.worker).take() {
            let _ = h.join();
        }
        Ok(())
    }
}

impl Drop for BatchingReceiver {
    fn drop(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
        if let Some(h) = lock(&self.worker).take() {
            let _ = h.join();
        }
    }
}

/// Both halves of the host side for one operator: events go out to the
/// input queue, results come back from the output queue.
pub struct QueueClient {
    pub sender: BatchingSender,
    pub receiver: BatchingReceiver,
}

impl QueueClient {
    pub fn start<F>(addr: impl ToSocketAddrs + Clone, queues: &QueuePair, config: &BatchingConfig, on_events: F) -> Result<Self, ClientError>
    where
        F: FnMut(&[Vec<u8>]) -> Result<(), CallbackError> + Send + 'static,
    {
        let sender = BatchingSender::start(addr.clone(), queues.input.as_str(), config)?;
        let receiver = BatchingReceiver::start(addr, queues.output.as_str(), config, on_events)?;
        Ok(QueueClient { sender, receiver })
    }

    pub fn receive_event(&self, e: &Event) -> Result<(), ClientError> {
        self.sender.receive_event(e)
    }

    /// Flushes pending sends, then stops receiving. Both halves are stopped
    /// even if the flush times out.
    pub fn stop(&self) -> Result<(), ClientError> {
        let sent = self.sender.stop();
        let recv = self.receiver.stop();
        sent.and(recv)
    }
}
