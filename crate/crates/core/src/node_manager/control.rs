//! The node manager's control port.
//!
//! Same framing as the queue server. Commands:
//!
//! | command                    | reply                              |
//! |----------------------------|------------------------------------|
//! | `DEPLOY name [version]`    | array of one JSON `OperatorHandle` |
//! | `UPDATE instance version`  | array of one JSON `UpdateReport`   |
//! | `REMOVE instance`          | `+OK`                              |
//! | `STATUS`                   | array of one JSON handle list      |
//!
//! Failures reply `-ERR <kind> <message>`, `kind` as in [`NodeError::kind`].

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::{debug, warn};

use super::{NodeControl, NodeError, OperatorHandle, UpdateReport};
use crate::canonical::to_canonical;
use crate::queue_client::{ClientError, Connection};
use crate::wire::{self, FrameError, Reply};

pub const DEFAULT_CONTROL_PORT: u16 = 6481;

pub struct ControlServer {
    listener: TcpListener,
    control: Arc<dyn NodeControl>,
}

fn json_reply<T: Serialize>(value: &T) -> Reply {
    match to_canonical(value) {
        Ok(bytes) => Reply::Array(vec![bytes]),
        Err(e) => Reply::err(format!("internal {e}")),
    }
}

fn error_reply(e: &NodeError) -> Reply {
    Reply::err(format!("{} {}", e.kind(), e))
}

fn utf8(arg: &[u8]) -> Result<&str, Reply> {
    std::str::from_utf8(arg).map_err(|_| Reply::err("invalid argument not utf-8"))
}

fn dispatch(control: &dyn NodeControl, args: &[Vec<u8>]) -> Reply {
    let run = || -> Result<Reply, Reply> {
        let verb = utf8(&args[0])?.to_ascii_uppercase();
        let rest = args[1..].iter().map(|a| utf8(a)).collect::<Result<Vec<_>, _>>()?;
        Ok(match (verb.as_str(), rest.as_slice()) {
            ("DEPLOY", [name]) => control.deploy(name, None).map_or_else(|e| error_reply(&e), |h| json_reply(&h)),
            ("DEPLOY", [name, version]) => {
                control.deploy(name, Some(version)).map_or_else(|e| error_reply(&e), |h| json_reply(&h))
            }
            ("UPDATE", [id, version]) => control.update(id, version).map_or_else(|e| error_reply(&e), |r| json_reply(&r)),
            ("REMOVE", [id]) => control.remove(id).map_or_else(|e| error_reply(&e), |_| Reply::Ok),
            ("STATUS", []) => control.status().map_or_else(|e| error_reply(&e), |s| json_reply(&s)),
            ("PING", []) => Reply::Ok,
            ("DEPLOY" | "UPDATE" | "REMOVE" | "STATUS" | "PING", _) => {
                Reply::err(format!("invalid wrong number of arguments for {verb}"))
            }
            _ => Reply::err(format!("invalid unknown command `{verb}`")),
        })
    };
    run().unwrap_or_else(|e| e)
}

fn handle(stream: TcpStream, control: &dyn NodeControl) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let reply = match wire::read_request(&mut reader) {
            Ok(None) => return Ok(()),
            Ok(Some(args)) => dispatch(control, &args),
            Err(FrameError::Protocol(msg)) => Reply::err(format!("invalid {msg}")),
            Err(FrameError::Fatal(msg)) => {
                wire::write_reply(&mut writer, &Reply::err(format!("invalid {msg}")))?;
                return writer.flush();
            }
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e),
        };
        wire::write_reply(&mut writer, &reply)?;
        writer.flush()?;
    }
}

impl ControlServer {
    pub fn bind(addr: impl ToSocketAddrs, control: Arc<dyn NodeControl>) -> io::Result<Self> {
        Ok(ControlServer { listener: TcpListener::bind(addr)?, control })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves connections, one thread each, until the process exits.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    continue;
                }
            };
            let control = self.control.clone();
            thread::spawn(move || {
                if let Err(e) = handle(stream, control.as_ref()) {
                    debug!(error = %e, "control connection closed with error");
                }
            });
        }
        Ok(())
    }

    /// Runs the server on a background thread.
    pub fn spawn(self) -> io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::Builder::new().name("control".into()).spawn(move || self.run())?;
        Ok(addr)
    }
}

/// A [`NodeControl`] that talks to a remote node manager.
pub struct ControlClient {
    conn: Mutex<Connection>,
}

impl ControlClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, NodeError> {
        Ok(ControlClient { conn: Mutex::new(Connection::connect(addr)?) })
    }

    fn call(&self, args: &[&str]) -> Result<Reply, NodeError> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        match conn.call(args)? {
            Reply::Err(msg) => {
                let (kind, message) = msg.split_once(' ').unwrap_or((msg.as_str(), ""));
                Err(NodeError::Remote { kind: kind.to_owned(), message: message.to_owned() })
            }
            r => Ok(r),
        }
    }

    fn call_json<T: DeserializeOwned>(&self, args: &[&str]) -> Result<T, NodeError> {
        match self.call(args)? {
            Reply::Array(mut items) if items.len() == 1 => serde_json::from_slice(&items.pop().expect("one item"))
                .map_err(|e| ClientError::Protocol(format!("bad control reply: {e}")).into()),
            other => Err(ClientError::Protocol(format!("unexpected control reply {other:?}")).into()),
        }
    }
}

impl NodeControl for ControlClient {
    fn deploy(&self, name: &str, version: Option<&str>) -> Result<OperatorHandle, NodeError> {
        match version {
            Some(v) => self.call_json(&["DEPLOY", name, v]),
            None => self.call_json(&["DEPLOY", name]),
        }
    }

    fn update(&self, instance_id: &str, version: &str) -> Result<UpdateReport, NodeError> {
        self.call_json(&["UPDATE", instance_id, version])
    }

    fn remove(&self, instance_id: &str) -> Result<(), NodeError> {
        self.call(&["REMOVE", instance_id]).map(|_| ())
    }

    fn status(&self) -> Result<Vec<OperatorHandle>, NodeError> {
        self.call_json(&["STATUS"])
    }
}
