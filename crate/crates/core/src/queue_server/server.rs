use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use tracing::{debug, warn};

use super::store::{QueueStore, DEFAULT_MAX_QUEUE_ITEMS};
use crate::wire::{self, FrameError, Reply};

pub const DEFAULT_QUEUE_PORT: u16 = 6480;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub max_queue_items: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { max_queue_items: DEFAULT_MAX_QUEUE_ITEMS }
    }
}

/// A bound, not yet running queue server.
pub struct QueueServer {
    listener: TcpListener,
    store: Arc<QueueStore>,
}

/// Serves frames from one connection until EOF or a fatal framing error.
///
/// Replies are buffered and flushed only once the read buffer is drained, so
/// a pipelined burst of requests is answered with one write burst.
fn handle_connection(stream: TcpStream, store: &QueueStore) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::with_capacity(64 * 1024, stream.try_clone()?);
    let mut writer = BufWriter::with_capacity(64 * 1024, stream);
    let mut out = Vec::with_capacity(4096);
    loop {
        let reply = match wire::read_request(&mut reader) {
            Ok(None) => break,
            Ok(Some(args)) => store.execute(args),
            Err(FrameError::Protocol(msg)) => Reply::Err(msg),
            Err(FrameError::Fatal(msg)) => {
                wire::write_reply(&mut writer, &Reply::Err(msg))?;
                writer.flush()?;
                break;
            }
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(FrameError::Io(e)) => return Err(e),
        };
        out.clear();
        wire::encode_reply(&reply, &mut out);
        writer.write_all(&out)?;
        if reader.buffer().is_empty() {
            writer.flush()?;
        }
    }
    writer.flush()
}

impl QueueServer {
    pub fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(QueueServer { listener, store: Arc::new(QueueStore::new(config.max_queue_items)) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn store(&self) -> Arc<QueueStore> {
        self.store.clone()
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shared = Arc::new(Shared::default());
        let store = self.store.clone();
        let s = shared.clone();
        let accept = thread::Builder::new()
            .name("queue-accept".into())
            .spawn(move || accept_loop(self.listener, store, s))?;
        Ok(ServerHandle { addr, store: self.store, shared, accept: Some(accept) })
    }

    /// Runs the accept loop on the calling thread; returns only on accept failure.
    pub fn run(self) -> io::Result<()> {
        accept_loop(self.listener, self.store, Arc::new(Shared::default()))
    }
}

#[derive(Default)]
struct Shared {
    stopping: AtomicBool,
    next_conn: AtomicU64,
    conns: Mutex<HashMap<u64, TcpStream>>,
}

fn accept_loop(listener: TcpListener, store: Arc<QueueStore>, shared: Arc<Shared>) -> io::Result<()> {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!(error = %e, "accept failed");
                continue;
            }
        };
        store.stats().connection_opened();
        let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            shared.conns.lock().unwrap_or_else(|p| p.into_inner()).insert(id, clone);
        }
        let store = store.clone();
        let shared = shared.clone();
        let spawned = thread::Builder::new().name(format!("queue-conn-{id}")).spawn(move || {
            if let Err(e) = handle_connection(stream, &store) {
                debug!(conn = id, error = %e, "connection closed with error");
            }
            shared.conns.lock().unwrap_or_else(|p| p.into_inner()).remove(&id);
        });
        if let Err(e) = spawned {
            warn!(error = %e, "cannot spawn connection handler");
        }
    }
    Ok(())
}

/// A running queue server.
pub struct ServerHandle {
    addr: SocketAddr,
    store: Arc<QueueStore>,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<QueueStore> {
        &self.store
    }

    /// Closes every open client connection; queue contents are kept.
    pub fn disconnect_all(&self) {
        for (_, s) in self.shared.conns.lock().unwrap_or_else(|p| p.into_inner()).drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        self.disconnect_all();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and serves until the process is terminated.
pub fn serve(addr: impl ToSocketAddrs, config: ServerConfig) -> io::Result<()> {
    QueueServer::bind(addr, config)?.run()
}
