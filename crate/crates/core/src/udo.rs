//! The operator interface a CEP engine programs against, and a small
//! embedded query harness standing in for a real engine.
//!
//! [`UdoInterface`] has the four calls an engine needs: request an operator,
//! send it events, and add or remove result listeners. [`UdoRuntime`]
//! implements them on top of a node manager and one queue client per
//! operator instance.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, Weak};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::{debug, warn};

use crate::clock;
use crate::event::{decode_event, Event, QueuePair, Scalar};
use crate::node_manager::{NodeControl, NodeError, OperatorHandle};
use crate::queue_client::{BatchingConfig, BatchingReceiver, BatchingSender, ClientError, Connection};

pub const DEFAULT_DEPLOY_TIMEOUT: Duration = Duration::from_secs(30);

/// Where a deployed operator instance can be reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorAddress {
    pub instance_id: String,
    pub queues: QueuePair,
    pub queue_server: String,
}

#[derive(Debug, Error)]
pub enum DeploymentError {
    #[error("operator `{0}` is not in registry")]
    NotInRegistry(String),
    #[error("deployment of `{0}` timed out")]
    Timeout(String),
    #[error("deployment failed: {0}")]
    Node(#[source] NodeError),
    #[error("cannot connect to operator queues: {0}")]
    Client(#[source] ClientError),
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("query graph has a cycle")]
    Cycle,
    #[error("edge refers to unknown vertex {0}")]
    UnknownVertex(usize),
    #[error("query graph has no source")]
    NoSource,
    #[error("query graph has no sink")]
    NoSink,
    #[error("vertex {0} is a source but has incoming edges")]
    SourceWithInput(usize),
    #[error("vertex {0} is a sink but has outgoing edges")]
    SinkWithOutput(usize),
    #[error("user-defined vertex `{0}` needs an operator runtime")]
    NoRuntime(String),
}

#[derive(Debug, Error)]
pub enum UdoError {
    #[error(transparent)]
    Deployment(#[from] DeploymentError),
    #[error("operator {0} has been removed")]
    StaleAddress(String),
    #[error("unknown listener {0}")]
    UnknownListener(u64),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type EventCallback = Arc<dyn Fn(&Event) + Send + Sync>;
pub type ReadyCallback = Box<dyn FnOnce(Result<OperatorAddress, DeploymentError>) + Send>;

/// A registered result listener.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Listener {
    pub id: u64,
    pub instance_id: String,
}

/// What a CEP runtime implements to use serverless operators.
pub trait UdoInterface {
    /// Starts deploying `name`; `on_ready` runs exactly once, on another
    /// thread, with the address or the failure.
    fn request_operator(&self, name: &str, on_ready: ReadyCallback) -> u64;
    /// Serializes `e` and queues it for the operator's input.
    fn send_event(&self, addr: &OperatorAddress, e: &Event) -> Result<(), UdoError>;
    fn add_listener(&self, addr: &OperatorAddress, on_event: EventCallback) -> Result<Listener, UdoError>;
    fn remove_listener(&self, listener: &Listener) -> Result<(), UdoError>;
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

type Listeners = RwLock<Vec<(u64, EventCallback)>>;

/// Host-side state of one deployed operator.
struct Link {
    addr: OperatorAddress,
    sender: BatchingSender,
    /// Started with the first listener so results wait in the output queue
    /// until someone is there to take them.
    receiver: Mutex<Option<BatchingReceiver>>,
    listeners: Arc<Listeners>,
    removed: AtomicBool,
    decode_errors: Arc<AtomicU64>,
}

struct RuntimeInner {
    control: Arc<dyn NodeControl>,
    batching: BatchingConfig,
    deploy_timeout: Duration,
    links: Mutex<HashMap<String, Arc<Link>>>,
    next_request: AtomicU64,
    next_listener: AtomicU64,
}

/// [`UdoInterface`] over a node manager, in-process or remote.
#[derive(Clone)]
pub struct UdoRuntime {
    inner: Arc<RuntimeInner>,
}

fn dispatch(listeners: &Listeners, decode_errors: &AtomicU64, batch: &[Vec<u8>]) {
    // Holding the read lock makes remove_listener wait for the batch in hand.
    let ls = listeners.read().unwrap_or_else(|p| p.into_inner());
    for payload in batch {
        match decode_event(payload) {
            Ok(e) => {
                for (_, cb) in ls.iter() {
                    cb(&e);
                }
            }
            Err(err) => {
                decode_errors.fetch_add(1, Ordering::Relaxed);
                warn!(error = %err, "undecodable operator output dropped");
            }
        }
    }
}

impl UdoRuntime {
    pub fn new(control: Arc<dyn NodeControl>, batching: BatchingConfig) -> Self {
        UdoRuntime {
            inner: Arc::new(RuntimeInner {
                control,
                batching,
                deploy_timeout: DEFAULT_DEPLOY_TIMEOUT,
                links: Mutex::new(HashMap::new()),
                next_request: AtomicU64::new(1),
                next_listener: AtomicU64::new(1),
            }),
        }
    }

    pub fn with_deploy_timeout(mut self, timeout: Duration) -> Self {
        Arc::get_mut(&mut self.inner).expect("configure before use").deploy_timeout = timeout;
        self
    }

    pub fn control(&self) -> &Arc<dyn NodeControl> {
        &self.inner.control
    }

    fn link(&self, addr: &OperatorAddress) -> Result<Arc<Link>, UdoError> {
        match lock(&self.inner.links).get(&addr.instance_id) {
            Some(l) if !l.removed.load(Ordering::SeqCst) => Ok(l.clone()),
            _ => Err(UdoError::StaleAddress(addr.instance_id.clone())),
        }
    }

    fn connect(inner: &RuntimeInner, handle: OperatorHandle) -> Result<OperatorAddress, DeploymentError> {
        let queues = QueuePair::for_instance(&handle.instance_id)
            .map_err(|e| DeploymentError::Client(ClientError::InvalidConfig(e.to_string())))?;
        let addr = OperatorAddress { instance_id: handle.instance_id, queues, queue_server: handle.queue_addr };
        let sender = BatchingSender::start(addr.queue_server.as_str(), addr.queues.input.as_str(), &inner.batching)
            .map_err(DeploymentError::Client)?;
        let link = Link {
            addr: addr.clone(),
            sender,
            receiver: Mutex::new(None),
            listeners: Arc::new(RwLock::new(Vec::new())),
            removed: AtomicBool::new(false),
            decode_errors: Arc::new(AtomicU64::new(0)),
        };
        lock(&inner.links).insert(addr.instance_id.clone(), Arc::new(link));
        Ok(addr)
    }

    fn deploy_blocking(inner: &Arc<RuntimeInner>, name: &str) -> Result<OperatorAddress, DeploymentError> {
        let (tx, rx) = mpsc::channel();
        let control = inner.control.clone();
        let owned = name.to_owned();
        thread::spawn(move || {
            let result = match owned.split_once('@') {
                Some((n, v)) => control.deploy(n, Some(v)),
                None => control.deploy(&owned, None),
            };
            if let Err(Ok(handle)) = tx.send(result).map_err(|e| e.0) {
                // Nobody is waiting any more; do not leak the instance.
                let _ = control.remove(&handle.instance_id);
            }
        });
        match rx.recv_timeout(inner.deploy_timeout) {
            Ok(Ok(handle)) => Self::connect(inner, handle),
            Ok(Err(e)) if e.is_not_found() => Err(DeploymentError::NotInRegistry(name.to_owned())),
            Ok(Err(e)) => Err(DeploymentError::Node(e)),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                Err(DeploymentError::Timeout(name.to_owned()))
            }
        }
    }

    /// Deploys `name` (latest version, or `name@version`) and waits for its address.
    pub fn deploy(&self, name: &str) -> Result<OperatorAddress, DeploymentError> {
        Self::deploy_blocking(&self.inner, name)
    }

    /// Events buffered for the operator but not yet flushed.
    pub fn buffered(&self, addr: &OperatorAddress) -> Result<usize, UdoError> {
        Ok(self.link(addr)?.sender.buffered())
    }

    pub fn decode_errors(&self, addr: &OperatorAddress) -> Result<u64, UdoError> {
        Ok(self.link(addr)?.decode_errors.load(Ordering::Relaxed))
    }

    /// Waits until the operator has consumed its input and listeners have
    /// seen all of its output. Only meaningful with a listener attached.
    pub fn quiesce(&self, addr: &OperatorAddress, timeout: Duration) -> Result<bool, UdoError> {
        let link = self.link(addr)?;
        Self::wait_drained(&link, timeout)
    }

    fn wait_drained(link: &Link, timeout: Duration) -> Result<bool, UdoError> {
        let deadline = Instant::now() + timeout;
        let mut conn = Connection::connect(link.addr.queue_server.as_str())?;
        let has_receiver = lock(&link.receiver).is_some();
        loop {
            let in_len = link.sender.buffered() + conn.len(link.addr.queues.input.as_str())?;
            let out_len = if has_receiver { conn.len(link.addr.queues.output.as_str())? } else { 0 };
            if in_len == 0 && out_len == 0 {
                return Ok(true);
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    /// Tears an operator down. Input already sent is processed and its
    /// results are delivered to listeners first, within `drain_timeout`.
    pub fn remove_operator(&self, addr: &OperatorAddress, drain_timeout: Duration) -> Result<(), UdoError> {
        let link = self.link(addr)?;
        link.removed.store(true, Ordering::SeqCst);
        let flushed = link.sender.stop();
        if !Self::wait_drained(&link, drain_timeout)? {
            warn!(instance = %addr.instance_id, "operator did not drain in time; removing anyway");
        }
        if let Some(r) = lock(&link.receiver).take() {
            let _ = r.stop();
        }
        let removed = self.inner.control.remove(&addr.instance_id);
        lock(&self.inner.links).remove(&addr.instance_id);
        flushed?;
        removed?;
        Ok(())
    }
}

impl UdoInterface for UdoRuntime {
    fn request_operator(&self, name: &str, on_ready: ReadyCallback) -> u64 {
        let id = self.inner.next_request.fetch_add(1, Ordering::Relaxed);
        let inner = self.inner.clone();
        let name = name.to_owned();
        thread::Builder::new()
            .name(format!("deploy-{id}"))
            .spawn(move || on_ready(Self::deploy_blocking(&inner, &name)))
            .expect("spawn deployment thread");
        id
    }

    fn send_event(&self, addr: &OperatorAddress, e: &Event) -> Result<(), UdoError> {
        let link = self.link(addr)?;
        match link.sender.receive_event(e) {
            Err(ClientError::Stopped) => Err(UdoError::StaleAddress(addr.instance_id.clone())),
            other => Ok(other?),
        }
    }

    fn add_listener(&self, addr: &OperatorAddress, on_event: EventCallback) -> Result<Listener, UdoError> {
        let link = self.link(addr)?;
        let id = self.inner.next_listener.fetch_add(1, Ordering::Relaxed);
        link.listeners.write().unwrap_or_else(|p| p.into_inner()).push((id, on_event));
        let mut receiver = lock(&link.receiver);
        if receiver.is_none() {
            let (listeners, errors) = (link.listeners.clone(), link.decode_errors.clone());
            *receiver = Some(BatchingReceiver::start(
                addr.queue_server.as_str(),
                addr.queues.output.as_str(),
                &self.inner.batching,
                move |batch: &[Vec<u8>]| {
                    dispatch(&listeners, &errors, batch);
                    Ok(())
                },
            )?);
        }
        debug!(instance = %addr.instance_id, listener = id, "listener added");
        Ok(Listener { id, instance_id: addr.instance_id.clone() })
    }

    /// Must not be called from inside a listener.
    fn remove_listener(&self, listener: &Listener) -> Result<(), UdoError> {
        let link = lock(&self.inner.links)
            .get(&listener.instance_id)
            .cloned()
            .ok_or(UdoError::UnknownListener(listener.id))?;
        let mut ls = link.listeners.write().unwrap_or_else(|p| p.into_inner());
        let before = ls.len();
        ls.retain(|(id, _)| *id != listener.id);
        if ls.len() == before {
            return Err(UdoError::UnknownListener(listener.id));
        }
        Ok(())
    }
}

/// A built-in filter predicate: numeric attribute strictly above a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub key: String,
    pub threshold: f64,
}

impl Predicate {
    pub fn amount_above(threshold: f64) -> Self {
        Predicate { key: "amount".into(), threshold }
    }

    pub fn matches(&self, e: &Event) -> bool {
        match e.attr(&self.key) {
            Some(Scalar::Float(f)) => *f > self.threshold,
            Some(Scalar::Int(i)) => (*i as f64) > self.threshold,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Vertex {
    Source,
    Filter(Predicate),
    Forward,
    Sink,
    /// A user-defined operator, by registry name or `name@version`.
    Udo(String),
}

pub type VertexId = usize;

/// Producers, operators and consumers wired as a directed acyclic graph.
#[derive(Debug, Clone, Default)]
pub struct QueryGraph {
    vertices: Vec<Vertex>,
    edges: Vec<(VertexId, VertexId)>,
}

impl QueryGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: Vertex) -> VertexId {
        self.vertices.push(v);
        self.vertices.len() - 1
    }

    pub fn connect(&mut self, from: VertexId, to: VertexId) -> &mut Self {
        self.edges.push((from, to));
        self
    }

    /// source → `middle` → sink.
    pub fn linear(middle: Vertex) -> Self {
        let mut g = QueryGraph::new();
        let (s, m, k) = (g.add(Vertex::Source), g.add(middle), g.add(Vertex::Sink));
        g.connect(s, m).connect(m, k);
        g
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    /// Checks the graph and returns a topological order.
    pub fn validate(&self) -> Result<Vec<VertexId>, GraphError> {
        let n = self.vertices.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            for v in [a, b] {
                if v >= n {
                    return Err(GraphError::UnknownVertex(v));
                }
            }
            succ[a].push(b);
            indeg[b] += 1;
        }
        for (i, v) in self.vertices.iter().enumerate() {
            match v {
                Vertex::Source if indeg[i] > 0 => return Err(GraphError::SourceWithInput(i)),
                Vertex::Sink if !succ[i].is_empty() => return Err(GraphError::SinkWithOutput(i)),
                _ => {}
            }
        }
        if !self.vertices.contains(&Vertex::Source) {
            return Err(GraphError::NoSource);
        }
        if !self.vertices.contains(&Vertex::Sink) {
            return Err(GraphError::NoSink);
        }
        let mut order = Vec::with_capacity(n);
        let mut ready: Vec<_> = (0..n).filter(|&i| indeg[i] == 0).collect();
        while let Some(v) = ready.pop() {
            order.push(v);
            for &s in &succ[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push(s);
                }
            }
        }
        if order.len() < n {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }
}

/// An event that reached a sink, stamped on arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub sink: VertexId,
    pub event: Event,
    /// Process-clock microseconds, comparable with `event.ts_produced`.
    pub received_at: i64,
}

enum Node {
    Pass,
    Filter(Predicate),
    Sink(Mutex<Sender<Delivered>>),
    Udo(OperatorAddress),
}

struct Router {
    nodes: Vec<Node>,
    succ: Vec<Vec<VertexId>>,
    sources: Vec<VertexId>,
    runtime: Option<UdoRuntime>,
}

impl Router {
    fn emit_from(&self, v: VertexId, e: &Event) -> Result<(), UdoError> {
        for &s in &self.succ[v] {
            self.deliver(s, e)?;
        }
        Ok(())
    }

    fn deliver(&self, v: VertexId, e: &Event) -> Result<(), UdoError> {
        match &self.nodes[v] {
            Node::Pass => self.emit_from(v, e),
            Node::Filter(p) if p.matches(e) => self.emit_from(v, e),
            Node::Filter(_) => Ok(()),
            Node::Sink(tx) => {
                let d = Delivered { sink: v, event: e.clone(), received_at: clock::now_micros() };
                // A dropped receiver just means nobody is consuming results.
                let _ = lock(tx).send(d);
                Ok(())
            }
            Node::Udo(addr) => self.runtime.as_ref().expect("validated").send_event(addr, e),
        }
    }
}

/// A query graph wired up and accepting events.
pub struct RunningQuery {
    router: Arc<Router>,
    operators: Vec<OperatorAddress>,
}

impl RunningQuery {
    /// Deploys the graph's user-defined operators and wires every vertex.
    pub fn start(graph: &QueryGraph, runtime: Option<&UdoRuntime>) -> Result<(Self, Receiver<Delivered>), UdoError> {
        let (tx, rx) = mpsc::channel();
        Ok((Self::start_with_sink(graph, runtime, tx)?, rx))
    }

    /// Like [`start`](Self::start), delivering sink output to `tx`. The
    /// channel closes once the query is stopped and dropped.
    pub fn start_with_sink(graph: &QueryGraph, runtime: Option<&UdoRuntime>, tx: Sender<Delivered>) -> Result<Self, UdoError> {
        let order = graph.validate()?;
        let n = graph.vertices.len();
        let mut nodes = Vec::with_capacity(n);
        let mut operators = Vec::new();
        for (i, v) in graph.vertices.iter().enumerate() {
            nodes.push(match v {
                Vertex::Source | Vertex::Forward => Node::Pass,
                Vertex::Filter(p) => Node::Filter(p.clone()),
                Vertex::Sink => Node::Sink(Mutex::new(tx.clone())),
                Vertex::Udo(name) => {
                    let rt = runtime.ok_or_else(|| GraphError::NoRuntime(name.clone()))?;
                    match rt.deploy(name) {
                        Ok(addr) => {
                            operators.push((i, addr.clone()));
                            Node::Udo(addr)
                        }
                        Err(e) => {
                            for (_, addr) in &operators {
                                let _ = rt.remove_operator(addr, Duration::from_secs(1));
                            }
                            return Err(e.into());
                        }
                    }
                }
            });
        }
        // Upstream operators first, so stopping drains them into their successors.
        operators.sort_by_key(|(i, _)| order.iter().position(|o| o == i));
        let operators: Vec<OperatorAddress> = operators.into_iter().map(|(_, a)| a).collect();
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in &graph.edges {
            succ[a].push(b);
        }
        let sources = order.iter().copied().filter(|&i| graph.vertices[i] == Vertex::Source).collect();
        let router = Arc::new(Router { nodes, succ, sources, runtime: runtime.cloned() });
        for (i, node) in router.nodes.iter().enumerate() {
            if let Node::Udo(addr) = node {
                let weak: Weak<Router> = Arc::downgrade(&router);
                let rt = runtime.expect("validated");
                rt.add_listener(
                    addr,
                    Arc::new(move |e: &Event| {
                        if let Some(r) = weak.upgrade() {
                            if let Err(err) = r.emit_from(i, e) {
                                warn!(error = %err, "downstream delivery failed");
                            }
                        }
                    }),
                )?;
            }
        }
        Ok(RunningQuery { router, operators })
    }

    /// Feeds one event into every source.
    pub fn push(&self, e: &Event) -> Result<(), UdoError> {
        for &s in &self.router.sources {
            self.router.emit_from(s, e)?;
        }
        Ok(())
    }

    pub fn operators(&self) -> &[OperatorAddress] {
        &self.operators
    }

    /// Waits until every user-defined operator is idle with its results delivered.
    pub fn quiesce(&self, timeout: Duration) -> Result<bool, UdoError> {
        let Some(rt) = &self.router.runtime else { return Ok(true) };
        let deadline = Instant::now() + timeout;
        for addr in &self.operators {
            if !rt.quiesce(addr, deadline.saturating_duration_since(Instant::now()))? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Drains and removes the user-defined operators; results that reach a
    /// sink meanwhile are still sent to it.
    pub fn stop(self, drain_timeout: Duration) -> Result<(), UdoError> {
        if let Some(rt) = &self.router.runtime {
            for addr in &self.operators {
                rt.remove_operator(addr, drain_timeout)?;
            }
        }
        Ok(())
    }
}

/// Runs a finite event stream through `graph` and returns what reached the sinks.
pub fn run_query(
    graph: &QueryGraph,
    runtime: Option<&UdoRuntime>,
    source: impl IntoIterator<Item = Event>,
    drain_timeout: Duration,
) -> Result<Vec<Delivered>, UdoError> {
    let (q, rx) = RunningQuery::start(graph, runtime)?;
    for e in source {
        q.push(&e)?;
    }
    q.stop(drain_timeout)?;
    Ok(rx.try_iter().collect())
}
