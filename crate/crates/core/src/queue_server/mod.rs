//! The in-memory queue server.
//!
//! One server per node hosts every operator's queues. All operator state
//! lives here, so worker processes can come and go without losing events.
//!
//! Commands (verbs are case-insensitive):
//!
//! | verb      | args                | reply                          |
//! |-----------|---------------------|--------------------------------|
//! | `PING`    |                     | `+OK`                          |
//! | `QCREATE` | queue               | `+OK` (idempotent)             |
//! | `QDELETE` | queue               | `+OK`, `-ERR unknown queue`    |
//! | `PUSH`    | queue payload       | `+OK`, `-ERR size`, `-ERR queue full` |
//! | `RANGE`   | queue start count   | array of payloads              |
//! | `TRIM`    | queue count         | `+OK`                          |
//! | `LEN`     | queue               | `:<n>`                         |
//!
//! `PUSH` creates missing queues; `RANGE`/`LEN`/`TRIM` treat a missing
//! queue as empty.

mod server;
mod store;

pub use server::{serve, QueueServer, ServerConfig, ServerHandle, DEFAULT_QUEUE_PORT};
pub use store::{QueueStore, ServerStats, Verb, DEFAULT_MAX_QUEUE_ITEMS, MAX_PAYLOAD_LEN};
