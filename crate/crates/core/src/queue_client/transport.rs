use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::ClientError;
use crate::wire::{self, Reply};

/// A request/response channel to the queue server.
///
/// One `round_trip` writes a pre-encoded burst of request frames, flushes
/// once, and reads back exactly `expected` replies in order.
pub trait Transport: Send + 'static {
    fn round_trip(&mut self, frames: &[u8], expected: usize) -> Result<Vec<Reply>, ClientError>;

    /// Drops the current connection and opens a new one.
    fn reconnect(&mut self) -> Result<(), ClientError>;
}

/// A blocking TCP connection to a queue server (or the node manager's
/// control port, which speaks the same framing).
pub struct Connection {
    addr: SocketAddr,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| ClientError::Protocol("address resolved to nothing".into()))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
        stream.set_nodelay(true)?;
        Ok(Connection {
            addr,
            reader: BufReader::with_capacity(256 * 1024, stream.try_clone()?),
            writer: BufWriter::with_capacity(256 * 1024, stream),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn set_read_timeout(&self, d: Option<Duration>) -> Result<(), ClientError> {
        self.writer.get_ref().set_read_timeout(d)?;
        Ok(())
    }

    /// Sends one command and waits for its reply.
    pub fn call<A: AsRef<[u8]>>(&mut self, args: &[A]) -> Result<Reply, ClientError> {
        let mut frame = Vec::new();
        wire::encode_request(args, &mut frame);
        Ok(self.round_trip(&frame, 1)?.pop().expect("one reply"))
    }

    /// Like [`call`](Self::call) but maps `-ERR` replies to [`ClientError::Server`].
    pub fn call_ok<A: AsRef<[u8]>>(&mut self, args: &[A]) -> Result<Reply, ClientError> {
        match self.call(args)? {
            Reply::Err(msg) => Err(ClientError::Server(msg)),
            r => Ok(r),
        }
    }

    pub fn ping(&mut self) -> Result<(), ClientError> {
        self.call_ok(&["PING"]).map(|_| ())
    }

    pub fn len(&mut self, queue: &str) -> Result<usize, ClientError> {
        match self.call_ok(&["LEN", queue])? {
            Reply::Int(n) => Ok(n as usize),
            other => Err(ClientError::Protocol(format!("LEN replied {other:?}"))),
        }
    }

    pub fn push(&mut self, queue: &str, payload: &[u8]) -> Result<(), ClientError> {
        self.call_ok(&[b"PUSH".as_slice(), queue.as_bytes(), payload]).map(|_| ())
    }

    pub fn range(&mut self, queue: &str, start: usize, count: usize) -> Result<Vec<Vec<u8>>, ClientError> {
        match self.call_ok(&["RANGE", queue, &start.to_string(), &count.to_string()])? {
            Reply::Array(items) => Ok(items),
            other => Err(ClientError::Protocol(format!("RANGE replied {other:?}"))),
        }
    }

    pub fn trim(&mut self, queue: &str, count: usize) -> Result<(), ClientError> {
        self.call_ok(&["TRIM", queue, &count.to_string()]).map(|_| ())
    }

    pub fn create(&mut self, queue: &str) -> Result<(), ClientError> {
        self.call_ok(&["QCREATE", queue]).map(|_| ())
    }

    pub fn delete(&mut self, queue: &str) -> Result<(), ClientError> {
        self.call_ok(&["QDELETE", queue]).map(|_| ())
    }
}

impl Transport for Connection {
    fn round_trip(&mut self, frames: &[u8], expected: usize) -> Result<Vec<Reply>, ClientError> {
        self.writer.write_all(frames)?;
        self.writer.flush()?;
        let mut replies = Vec::with_capacity(expected);
        for _ in 0..expected {
            replies.push(wire::read_reply(&mut self.reader)?);
        }
        Ok(replies)
    }

    fn reconnect(&mut self) -> Result<(), ClientError> {
        *self = Connection::connect(self.addr)?;
        Ok(())
    }
}
