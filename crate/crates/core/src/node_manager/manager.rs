use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use tracing::{info, warn};

use super::{Backend, ConsumerTokens, InstanceState, NodeControl, NodeError, OperatorHandle, ProcessBackend, UpdateReport, WorkerProcess};
use crate::event::{control_queue, dead_letter_queue, QueuePair};
use crate::queue_client::{ClientError, Connection};
use crate::registry::{OperatorDescriptor, Registry};
use crate::worker::{WorkerContext, CTL_DRAIN, CTL_DRAINED, CTL_READY, CTL_START, CTL_STARTED};

#[derive(Debug, Clone)]
pub struct NodeManagerConfig {
    /// Queue server address handed to workers.
    pub queue_addr: String,
    /// `CEPLESS_BATCH_SIZE` for workers.
    pub batch_size: usize,
    /// `CEPLESS_BACKOFF_NS` for workers.
    pub backoff_ns: u64,
    pub ready_timeout: Duration,
    pub drain_timeout: Duration,
    /// Crashes are counted within this sliding window...
    pub restart_window: Duration,
    /// ...and this many within it mark the instance failed.
    pub max_crashes: usize,
    pub supervise_interval: Duration,
    /// Poll interval while waiting on control handshakes.
    pub ctl_poll: Duration,
}

impl NodeManagerConfig {
    pub fn new(queue_addr: impl Into<String>) -> Self {
        NodeManagerConfig {
            queue_addr: queue_addr.into(),
            batch_size: 1000,
            backoff_ns: 1,
            ready_timeout: Duration::from_secs(10),
            drain_timeout: Duration::from_secs(5),
            restart_window: Duration::from_secs(10),
            max_crashes: 3,
            supervise_interval: Duration::from_millis(50),
            ctl_poll: Duration::from_millis(1),
        }
    }
}

struct RunningWorker {
    process: Box<dyn WorkerProcess>,
    generation: u64,
    started_at: u64,
}

struct Instance {
    id: String,
    descriptor: OperatorDescriptor,
    package: PathBuf,
    queues: QueuePair,
    ctl: String,
    state: InstanceState,
    worker: Option<RunningWorker>,
    crashes: VecDeque<Instant>,
    restarts: u32,
}

struct Inner {
    cfg: NodeManagerConfig,
    registry: Registry,
    backend: Box<dyn Backend>,
    instances: Mutex<HashMap<String, Arc<Mutex<Instance>>>>,
    tokens: ConsumerTokens,
    next_generation: AtomicU64,
    next_id: AtomicU64,
    stopping: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn epoch_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis() as u64
}

/// Deploys and supervises operator workers on this node.
pub struct NodeManager {
    inner: Arc<Inner>,
    supervisor: Mutex<Option<JoinHandle<()>>>,
}

impl Inner {
    fn conn(&self) -> Result<Connection, NodeError> {
        Ok(Connection::connect(self.cfg.queue_addr.as_str())?)
    }

    fn spawn(&self, inst: &Instance, descriptor: &OperatorDescriptor, package: &PathBuf) -> Result<RunningWorker, NodeError> {
        let ctx = WorkerContext {
            queue_addr: self.cfg.queue_addr.clone(),
            in_queue: inst.queues.input.to_string(),
            out_queue: inst.queues.output.to_string(),
            ctl_queue: inst.ctl.clone(),
            batch_size: self.cfg.batch_size,
            backoff_increment: Duration::from_nanos(self.cfg.backoff_ns),
        };
        let process = self.backend.start(descriptor, package, &ctx.to_env())?;
        let generation = self.next_generation.fetch_add(1, Ordering::SeqCst);
        info!(instance = %inst.id, version = %descriptor.version, pid = process.pid(), generation, "worker spawned");
        Ok(RunningWorker { process, generation, started_at: epoch_millis() })
    }

    fn peek_ctl(conn: &mut Connection, ctl: &str) -> Result<Vec<Vec<u8>>, ClientError> {
        conn.range(ctl, 0, 64)
    }

    fn clear_ctl(conn: &mut Connection, ctl: &str) -> Result<(), ClientError> {
        conn.trim(ctl, 1 << 30)
    }

    /// Waits until `msg` is visible on the control queue.
    fn await_ctl(
        &self,
        conn: &mut Connection,
        inst_id: &str,
        ctl: &str,
        msg: &[u8],
        worker: &mut RunningWorker,
        timeout: Duration,
        stage: &'static str,
    ) -> Result<(), NodeError> {
        let deadline = Instant::now() + timeout;
        loop {
            if Self::peek_ctl(conn, ctl)?.iter().any(|p| p == msg) {
                return Ok(());
            }
            if let Some(code) = worker.process.try_wait()? {
                // Give the stderr reader a moment to catch the last lines.
                thread::sleep(Duration::from_millis(20));
                return Err(NodeError::WorkerFailed {
                    instance_id: inst_id.to_owned(),
                    code,
                    stderr: worker.process.stderr_tail(),
                });
            }
            if Instant::now() >= deadline {
                return Err(NodeError::Timeout { instance_id: inst_id.to_owned(), stage });
            }
            thread::sleep(self.cfg.ctl_poll);
        }
    }

    fn await_ready(&self, conn: &mut Connection, inst: &Instance, worker: &mut RunningWorker) -> Result<(), NodeError> {
        self.await_ctl(conn, &inst.id, &inst.ctl, CTL_READY, worker, self.cfg.ready_timeout, "__ready__")
    }

    /// Hands the consumer token to a ready, paused worker and starts it.
    fn activate(&self, conn: &mut Connection, inst: &Instance, worker: &mut RunningWorker) -> Result<(), NodeError> {
        Self::clear_ctl(conn, &inst.ctl)?;
        self.tokens.grant(inst.queues.input.as_str(), worker.generation)?;
        conn.push(&inst.ctl, CTL_START)?;
        let started = self.await_ctl(conn, &inst.id, &inst.ctl, CTL_STARTED, worker, self.cfg.ready_timeout, "__started__");
        if started.is_err() {
            let _ = self.tokens.release(inst.queues.input.as_str(), worker.generation);
        }
        started?;
        Self::clear_ctl(conn, &inst.ctl)?;
        Ok(())
    }

    /// Drains and reaps a worker, then releases its token. Returns whether
    /// it had to be killed.
    fn retire(&self, conn: &mut Connection, inst: &Instance, mut worker: RunningWorker) -> Result<bool, NodeError> {
        let mut forced = false;
        conn.push(&inst.ctl, CTL_DRAIN)?;
        let deadline = Instant::now() + self.cfg.drain_timeout;
        loop {
            if Self::peek_ctl(conn, &inst.ctl)?.iter().any(|p| p == CTL_DRAINED) {
                break;
            }
            if worker.process.try_wait()?.is_some() {
                break;
            }
            if Instant::now() >= deadline {
                warn!(instance = %inst.id, pid = worker.process.pid(), "drain timed out; killing worker");
                worker.process.kill()?;
                forced = true;
                break;
            }
            thread::sleep(self.cfg.ctl_poll);
        }
        // A drained worker exits on its own; do not wait forever for it.
        let exit_deadline = Instant::now() + Duration::from_secs(1);
        while worker.process.try_wait()?.is_none() {
            if Instant::now() >= exit_deadline {
                worker.process.kill()?;
                forced = true;
                worker.process.wait()?;
                break;
            }
            thread::sleep(self.cfg.ctl_poll);
        }
        let _ = self.tokens.release(inst.queues.input.as_str(), worker.generation);
        Ok(forced)
    }

    fn kill(&self, inst: &Instance, mut worker: RunningWorker) {
        let _ = worker.process.kill();
        let _ = worker.process.wait();
        let _ = self.tokens.release(inst.queues.input.as_str(), worker.generation);
    }

    /// Spawns, waits for readiness, and activates a worker for `inst`.
    fn launch(&self, conn: &mut Connection, inst: &Instance, descriptor: &OperatorDescriptor, package: &PathBuf) -> Result<RunningWorker, NodeError> {
        let mut worker = self.spawn(inst, descriptor, package)?;
        let result = self.await_ready(conn, inst, &mut worker).and_then(|_| self.activate(conn, inst, &mut worker));
        match result {
            Ok(()) => Ok(worker),
            Err(e) => {
                self.kill(inst, worker);
                Err(e)
            }
        }
    }

    fn snapshot(&self, inst: &Instance) -> OperatorHandle {
        OperatorHandle {
            instance_id: inst.id.clone(),
            name: inst.descriptor.name.clone(),
            version: inst.descriptor.version.clone(),
            input_queue: inst.queues.input.to_string(),
            output_queue: inst.queues.output.to_string(),
            control_queue: inst.ctl.clone(),
            queue_addr: self.cfg.queue_addr.clone(),
            pid: inst.worker.as_ref().map(|w| w.process.pid()),
            state: inst.state,
            started_at: inst.worker.as_ref().map_or(0, |w| w.started_at),
            restarts: inst.restarts,
        }
    }

    fn instance(&self, id: &str) -> Result<Arc<Mutex<Instance>>, NodeError> {
        lock(&self.instances).get(id).cloned().ok_or_else(|| NodeError::UnknownInstance(id.to_owned()))
    }

    fn new_instance_id(&self, name: &str) -> String {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        format!("{name}-{n}{:04x}", rand::random::<u16>())
    }

    fn deploy(&self, name: &str, version: Option<&str>) -> Result<OperatorHandle, NodeError> {
        let (descriptor, package) = self.registry.fetch(name, version)?;
        let id = self.new_instance_id(&descriptor.name);
        let queues = QueuePair::for_instance(&id).map_err(|e| NodeError::Remote { kind: "invalid".into(), message: e.to_string() })?;
        let ctl = control_queue(&id);
        let mut conn = self.conn()?;
        conn.create(queues.input.as_str())?;
        conn.create(queues.output.as_str())?;
        conn.create(&ctl)?;
        let arc = Arc::new(Mutex::new(Instance {
            id: id.clone(),
            descriptor: descriptor.clone(),
            package: package.clone(),
            queues,
            ctl,
            state: InstanceState::Starting,
            worker: None,
            crashes: VecDeque::new(),
            restarts: 0,
        }));
        let mut inst = lock(&arc);
        lock(&self.instances).insert(id.clone(), arc.clone());
        match self.launch(&mut conn, &inst, &descriptor, &package) {
            Ok(worker) => {
                inst.worker = Some(worker);
                inst.state = InstanceState::Running;
                info!(instance = %id, "deployed");
                Ok(self.snapshot(&inst))
            }
            Err(e) => {
                inst.state = InstanceState::Failed;
                warn!(instance = %id, error = %e, "deployment failed");
                Err(e)
            }
        }
    }

    fn update(&self, id: &str, version: &str) -> Result<UpdateReport, NodeError> {
        let t0 = Instant::now();
        let arc = self.instance(id)?;
        let mut inst = lock(&arc);
        if inst.state != InstanceState::Running {
            return Err(NodeError::InvalidState { instance_id: id.to_owned(), state: inst.state });
        }
        let (descriptor, package) = self.registry.fetch(&inst.descriptor.name, Some(version))?;
        let mut conn = self.conn()?;
        inst.state = InstanceState::Updating;
        let drain_first = descriptor.config.get("handoff").map(String::as_str) == Some("drain-first");
        let old_version = inst.descriptor.version.clone();
        let result = if drain_first {
            self.update_drain_first(&mut conn, &mut inst, &descriptor, &package, t0)
        } else {
            self.update_paused(&mut conn, &mut inst, &descriptor, &package, t0)
        };
        match result {
            Ok(mut report) => {
                report.old_version = old_version;
                inst.descriptor = descriptor;
                inst.package = package;
                inst.state = InstanceState::Running;
                info!(instance = %id, version, ms = report.switch_duration_ms, "updated");
                Ok(report)
            }
            Err(e) => {
                inst.state = if inst.worker.is_some() { InstanceState::Running } else { InstanceState::Failed };
                warn!(instance = %id, error = %e, "update failed");
                Err(e)
            }
        }
    }

    fn update_paused(
        &self,
        conn: &mut Connection,
        inst: &mut Instance,
        descriptor: &OperatorDescriptor,
        package: &PathBuf,
        t0: Instant,
    ) -> Result<UpdateReport, NodeError> {
        let mut next = self.spawn(inst, descriptor, package).map_err(|e| NodeError::RolledBack(Box::new(e)))?;
        if let Err(e) = self.await_ready(conn, inst, &mut next) {
            self.kill(inst, next);
            Self::clear_ctl(conn, &inst.ctl)?;
            return Err(NodeError::RolledBack(Box::new(e)));
        }
        let update_duration = t0.elapsed();
        let old = inst.worker.take().expect("running instance has a worker");
        let forced = self.retire(conn, inst, old)?;
        let in_len_before_stop = conn.len(inst.queues.input.as_str())? as u64;
        let in_len_after_start = conn.len(inst.queues.input.as_str())? as u64;
        if let Err(e) = self.activate(conn, inst, &mut next) {
            self.kill(inst, next);
            return Err(e);
        }
        inst.worker = Some(next);
        Ok(UpdateReport {
            instance_id: inst.id.clone(),
            old_version: String::new(),
            new_version: descriptor.version.clone(),
            update_duration_ms: update_duration.as_millis() as u64,
            switch_duration_ms: t0.elapsed().as_millis() as u64,
            events_in_flight: in_len_before_stop,
            in_len_before_stop,
            in_len_after_start,
            forced,
        })
    }

    fn update_drain_first(
        &self,
        conn: &mut Connection,
        inst: &mut Instance,
        descriptor: &OperatorDescriptor,
        package: &PathBuf,
        t0: Instant,
    ) -> Result<UpdateReport, NodeError> {
        let old = inst.worker.take().expect("running instance has a worker");
        let forced = self.retire(conn, inst, old)?;
        let in_len_before_stop = conn.len(inst.queues.input.as_str())? as u64;
        Self::clear_ctl(conn, &inst.ctl)?;
        let mut next = match self.spawn(inst, descriptor, package) {
            Ok(w) => w,
            Err(e) => return Err(self.roll_back(conn, inst, e)),
        };
        if let Err(e) = self.await_ready(conn, inst, &mut next) {
            self.kill(inst, next);
            return Err(self.roll_back(conn, inst, e));
        }
        let update_duration = t0.elapsed();
        let in_len_after_start = conn.len(inst.queues.input.as_str())? as u64;
        if let Err(e) = self.activate(conn, inst, &mut next) {
            self.kill(inst, next);
            return Err(self.roll_back(conn, inst, e));
        }
        inst.worker = Some(next);
        Ok(UpdateReport {
            instance_id: inst.id.clone(),
            old_version: String::new(),
            new_version: descriptor.version.clone(),
            update_duration_ms: update_duration.as_millis() as u64,
            switch_duration_ms: t0.elapsed().as_millis() as u64,
            events_in_flight: in_len_before_stop,
            in_len_before_stop,
            in_len_after_start,
            forced,
        })
    }

    /// Restarts the previous version after a failed drain-first update.
    fn roll_back(&self, conn: &mut Connection, inst: &mut Instance, cause: NodeError) -> NodeError {
        let _ = Self::clear_ctl(conn, &inst.ctl);
        let (descriptor, package) = (inst.descriptor.clone(), inst.package.clone());
        match self.launch(conn, inst, &descriptor, &package) {
            Ok(w) => inst.worker = Some(w),
            Err(e) => warn!(instance = %inst.id, error = %e, "rollback failed"),
        }
        NodeError::RolledBack(Box::new(cause))
    }

    fn remove(&self, id: &str) -> Result<(), NodeError> {
        let arc = self.instance(id)?;
        let mut inst = lock(&arc);
        if inst.state == InstanceState::Stopped {
            return Err(NodeError::InvalidState { instance_id: id.to_owned(), state: inst.state });
        }
        let mut conn = self.conn()?;
        if let Some(w) = inst.worker.take() {
            self.retire(&mut conn, &inst, w)?;
        }
        for q in [inst.queues.input.to_string(), inst.queues.output.to_string(), inst.ctl.clone(), dead_letter_queue(&inst.id)] {
            match conn.delete(&q) {
                Ok(()) | Err(ClientError::Server(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        inst.state = InstanceState::Stopped;
        info!(instance = %id, "removed");
        Ok(())
    }

    /// Restarts crashed workers; gives up after too many crashes.
    fn supervise_once(&self) {
        let all: Vec<_> = lock(&self.instances).values().cloned().collect();
        for arc in all {
            let Ok(mut inst) = arc.try_lock() else { continue };
            if inst.state != InstanceState::Running {
                continue;
            }
            let exited = match inst.worker.as_mut().map(|w| w.process.try_wait()) {
                Some(Ok(Some(code))) => code,
                _ => continue,
            };
            let worker = inst.worker.take().expect("checked above");
            warn!(instance = %inst.id, pid = worker.process.pid(), code = ?exited, stderr = %worker.process.stderr_tail(), "worker crashed");
            let _ = self.tokens.release(inst.queues.input.as_str(), worker.generation);
            drop(worker);
            let now = Instant::now();
            inst.crashes.push_back(now);
            while inst.crashes.front().is_some_and(|t| now.duration_since(*t) > self.cfg.restart_window) {
                inst.crashes.pop_front();
            }
            if inst.crashes.len() >= self.cfg.max_crashes {
                warn!(instance = %inst.id, crashes = inst.crashes.len(), "giving up");
                inst.state = InstanceState::Failed;
                continue;
            }
            let restarted = self.conn().and_then(|mut conn| {
                Self::clear_ctl(&mut conn, &inst.ctl)?;
                let (d, p) = (inst.descriptor.clone(), inst.package.clone());
                self.launch(&mut conn, &inst, &d, &p)
            });
            match restarted {
                Ok(w) => {
                    inst.worker = Some(w);
                    inst.restarts += 1;
                    info!(instance = %inst.id, restarts = inst.restarts, "worker restarted");
                }
                Err(e) => {
                    warn!(instance = %inst.id, error = %e, "restart failed");
                    inst.state = InstanceState::Failed;
                }
            }
        }
    }
}

impl NodeManager {
    pub fn new(registry: Registry, cfg: NodeManagerConfig) -> Self {
        Self::with_backend(registry, cfg, ProcessBackend)
    }

    pub fn with_backend(registry: Registry, cfg: NodeManagerConfig, backend: impl Backend) -> Self {
        let inner = Arc::new(Inner {
            cfg,
            registry,
            backend: Box::new(backend),
            instances: Mutex::new(HashMap::new()),
            tokens: ConsumerTokens::default(),
            next_generation: AtomicU64::new(1),
            next_id: AtomicU64::new(1),
            stopping: AtomicBool::new(false),
        });
        let sup = inner.clone();
        let supervisor = thread::Builder::new()
            .name("supervisor".into())
            .spawn(move || {
                while !sup.stopping.load(Ordering::SeqCst) {
                    thread::sleep(sup.cfg.supervise_interval);
                    sup.supervise_once();
                }
            })
            .expect("spawn supervisor thread");
        NodeManager { inner, supervisor: Mutex::new(Some(supervisor)) }
    }

    pub fn config(&self) -> &NodeManagerConfig {
        &self.inner.cfg
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn tokens(&self) -> &ConsumerTokens {
        &self.inner.tokens
    }

    pub fn deploy(&self, name: &str, version: Option<&str>) -> Result<OperatorHandle, NodeError> {
        self.inner.deploy(name, version)
    }

    /// Hot-swaps the instance's worker for `version`, keeping its queues.
    pub fn update(&self, instance_id: &str, version: &str) -> Result<UpdateReport, NodeError> {
        self.inner.update(instance_id, version)
    }

    /// Drains and stops the worker, then deletes the instance's queues.
    pub fn remove(&self, instance_id: &str) -> Result<(), NodeError> {
        self.inner.remove(instance_id)
    }

    pub fn handle(&self, instance_id: &str) -> Result<OperatorHandle, NodeError> {
        let arc = self.inner.instance(instance_id)?;
        let inst = lock(&arc);
        Ok(self.inner.snapshot(&inst))
    }

    pub fn status(&self) -> Vec<OperatorHandle> {
        let all: Vec<_> = lock(&self.inner.instances).values().cloned().collect();
        let mut out: Vec<_> = all.iter().map(|a| self.inner.snapshot(&lock(a))).collect();
        out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        out
    }

    /// Stops supervision and kills every worker. Queues are left alone.
    pub fn shutdown(&self) {
        self.inner.stopping.store(true, Ordering::SeqCst);
        if let Some(h) = lock(&self.supervisor).take() {
            let _ = h.join();
        }
        let all: Vec<_> = lock(&self.inner.instances).values().cloned().collect();
        for arc in all {
            let mut inst = lock(&arc);
            if let Some(w) = inst.worker.take() {
                self.inner.kill(&inst, w);
            }
            if matches!(inst.state, InstanceState::Running | InstanceState::Starting | InstanceState::Updating) {
                inst.state = InstanceState::Stopped;
            }
        }
    }
}

impl Drop for NodeManager {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl NodeControl for NodeManager {
    fn deploy(&self, name: &str, version: Option<&str>) -> Result<OperatorHandle, NodeError> {
        NodeManager::deploy(self, name, version)
    }

    fn update(&self, instance_id: &str, version: &str) -> Result<UpdateReport, NodeError> {
        NodeManager::update(self, instance_id, version)
    }

    fn remove(&self, instance_id: &str) -> Result<(), NodeError> {
        NodeManager::remove(self, instance_id)
    }

    fn status(&self) -> Result<Vec<OperatorHandle>, NodeError> {
        Ok(NodeManager::status(self))
    }
}
