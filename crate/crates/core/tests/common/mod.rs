#![allow(dead_code)]

pub mod props;

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cepless::node_manager::{NodeManager, NodeManagerConfig};
use cepless::queue_client::Connection;
use cepless::queue_server::{QueueServer, ServerConfig, ServerHandle};
use cepless::registry::{NewOperator, Registry};
use tempfile::TempDir;

pub const WORKER_BIN: &str = env!("CARGO_BIN_EXE_cepless-worker");

pub fn server() -> ServerHandle {
    QueueServer::bind("127.0.0.1:0", ServerConfig::default()).unwrap().spawn().unwrap()
}

pub fn worker_command(args: &[&str]) -> Vec<String> {
    std::iter::once(WORKER_BIN).chain(args.iter().copied()).map(String::from).collect()
}

pub fn publish_with(registry: &Registry, name: &str, version: &str, command: Vec<String>, config: &[(&str, &str)]) {
    let pkg = TempDir::new().unwrap();
    std::fs::write(pkg.path().join("operator.txt"), format!("{name} {version}\n")).unwrap();
    let mut op = NewOperator::new(name, version, command);
    op.config = config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    registry.publish(&op, pkg.path()).unwrap();
}

pub fn publish(registry: &Registry, name: &str, version: &str, args: &[&str]) {
    publish_with(registry, name, version, worker_command(args), &[]);
}

/// A queue server, a registry with the stock operators, and a node manager.
pub struct Cluster {
    pub server: ServerHandle,
    pub registry_dir: TempDir,
    pub manager: Arc<NodeManager>,
}

impl Cluster {
    pub fn start() -> Self {
        Self::start_with(|_| {})
    }

    pub fn start_with(tune: impl FnOnce(&mut NodeManagerConfig)) -> Self {
        let server = server();
        let registry_dir = TempDir::new().unwrap();
        let registry = Registry::open(registry_dir.path()).unwrap();
        publish(&registry, "forward-op", "1.0.0", &["--op", "forward"]);
        publish(&registry, "forward-op", "1.1.0", &["--op", "forward"]);
        publish(&registry, "fraud", "0.9", &["--op", "fraud", "--threshold", "0.9"]);
        publish(&registry, "fraud", "0.5", &["--op", "fraud", "--threshold", "0.5"]);
        let mut cfg = NodeManagerConfig::new(server.addr().to_string());
        cfg.backoff_ns = 50_000;
        tune(&mut cfg);
        let manager = Arc::new(NodeManager::new(registry, cfg));
        Cluster { server, registry_dir, manager }
    }

    pub fn registry(&self) -> &Registry {
        self.manager.registry()
    }

    pub fn conn(&self) -> Connection {
        Connection::connect(self.server.addr()).unwrap()
    }

    pub fn registry_path(&self) -> &Path {
        self.registry_dir.path()
    }
}

/// Polls `cond` until it holds or `timeout` passes.
pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

pub fn kill_9(pid: u32) {
    let status = std::process::Command::new("kill").args(["-9", &pid.to_string()]).status().unwrap();
    assert!(status.success());
}
