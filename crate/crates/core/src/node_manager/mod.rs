//! The node manager: deploys operator workers, supervises them, and swaps
//! them for new versions while their queues, and therefore their pending
//! events, stay in place.
//!
//! Hot update runs a drain-then-switch handoff:
//!
//! 1. the new version is spawned and announces `__ready__`, but stays
//!    paused;
//! 2. the old worker is told to `__drain__`; it finishes the batch in
//!    hand, answers `__drained__` and exits;
//! 3. once the old process is reaped, its consumer token is released and
//!    granted to the new worker, which is sent `__start__`.
//!
//! If the new worker never becomes ready, it is killed and the old one keeps
//! running. If the old one does not drain within the timeout it is killed
//! before the token moves. Operators whose descriptor sets
//! `handoff = drain-first` are drained before their successor is spawned,
//! for workers that do not implement the paused start.

mod backend;
mod control;
mod manager;
mod token;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{Backend, ProcessBackend, WorkerProcess};
pub use control::{ControlClient, ControlServer, DEFAULT_CONTROL_PORT};
pub use manager::{NodeManager, NodeManagerConfig};
pub use token::{ConsumerTokens, TokenError};

use crate::queue_client::ClientError;
use crate::registry::RegistryError;

/// Lifecycle of a deployed instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Starting,
    Running,
    Updating,
    Stopped,
    Failed,
}

/// A snapshot of one deployed operator instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorHandle {
    pub instance_id: String,
    pub name: String,
    pub version: String,
    pub input_queue: String,
    pub output_queue: String,
    pub control_queue: String,
    pub queue_addr: String,
    pub pid: Option<u32>,
    pub state: InstanceState,
    /// Epoch milliseconds of the current worker's start.
    pub started_at: u64,
    pub restarts: u32,
}

/// Outcome of a hot update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub instance_id: String,
    pub old_version: String,
    pub new_version: String,
    /// Update request received until the new worker announced readiness.
    pub update_duration_ms: u64,
    /// Update request received until the new worker confirmed it started.
    pub switch_duration_ms: u64,
    /// Events waiting in the input queue at the handoff.
    pub events_in_flight: u64,
    /// Input queue length once the old worker was gone.
    pub in_len_before_stop: u64,
    /// Input queue length right before the new worker was activated.
    pub in_len_after_start: u64,
    /// The old worker missed the drain deadline and was killed.
    pub forced: bool,
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("queue server: {0}")]
    Queue(#[from] ClientError),
    #[error("cannot spawn worker: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("worker for {instance_id} exited before becoming ready (code {code:?}): {stderr}")]
    WorkerFailed { instance_id: String, code: Option<i32>, stderr: String },
    #[error("worker for {instance_id} did not report {stage} in time")]
    Timeout { instance_id: String, stage: &'static str },
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("instance {instance_id} is {state:?}")]
    InvalidState { instance_id: String, state: InstanceState },
    #[error("update rolled back: {0}")]
    RolledBack(Box<NodeError>),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
}

impl NodeError {
    /// Short machine-readable category, used on the control port.
    pub fn kind(&self) -> &str {
        match self {
            NodeError::Registry(RegistryError::NotFound(_)) => "notfound",
            NodeError::Registry(RegistryError::Conflict { .. }) => "conflict",
            NodeError::Registry(RegistryError::CorruptPackage { .. }) => "corrupt",
            NodeError::Registry(_) => "registry",
            NodeError::Queue(_) => "queue",
            NodeError::Spawn(_) => "spawn",
            NodeError::WorkerFailed { .. } => "failed",
            NodeError::Timeout { .. } => "timeout",
            NodeError::UnknownInstance(_) => "unknown-instance",
            NodeError::InvalidState { .. } => "state",
            NodeError::RolledBack(_) => "rolledback",
            NodeError::Token(_) => "token",
            NodeError::Remote { kind, .. } => kind,
        }
    }

    pub fn is_not_found(&self) -> bool {
        self.kind() == "notfound"
    }
}

/// What the host-side operator interface needs from a node manager,
/// in-process or across the control port.
pub trait NodeControl: Send + Sync {
    fn deploy(&self, name: &str, version: Option<&str>) -> Result<OperatorHandle, NodeError>;
    fn update(&self, instance_id: &str, version: &str) -> Result<UpdateReport, NodeError>;
    fn remove(&self, instance_id: &str) -> Result<(), NodeError>;
    fn status(&self) -> Result<Vec<OperatorHandle>, NodeError>;
}
