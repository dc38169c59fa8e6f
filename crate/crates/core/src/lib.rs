//! Serverless user-defined operators for complex event processing.
//!
//! User-defined operators run as isolated worker processes. The host engine
//! exchanges events with them through a pair of FIFO queues hosted by an
//! in-memory queue server, using a batching, pipelining client with linear
//! back-off. Because all pending state lives in the queues, a worker can be
//! swapped for a new version at runtime without losing events.
//!
//! Module map:
//!
//! - [`event`]: the event type and its canonical text encoding.
//! - [`wire`]: length-prefixed frame codec shared by the queue server and
//!   the node manager control port.
//! - [`queue_server`]: named in-memory FIFO queues served over TCP.
//! - [`queue_client`]: batching send/receive workers with linear back-off.
//! - [`registry`]: on-disk store of deployable operator packages.
//! - [`node_manager`]: deploys, supervises and hot-updates worker processes.
//! - [`worker`]: the worker loop and the built-in reference operators.
//! - [`udo`]: the four-call operator interface and an embedded query harness.
//! - [`bench`]: the experiment driver and metrics engine.

pub mod bench;
pub mod canonical;
pub mod clock;
pub mod event;
pub mod node_manager;
pub mod queue_client;
pub mod queue_server;
pub mod registry;
pub mod udo;
pub mod wire;
pub mod worker;
