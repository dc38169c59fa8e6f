use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::SystemTime;

use crate::event::is_valid_queue_ident;
use crate::wire::Reply;

pub const MAX_PAYLOAD_LEN: usize = 1024 * 1024;
pub const DEFAULT_MAX_QUEUE_ITEMS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Ping,
    QCreate,
    QDelete,
    Push,
    Range,
    Trim,
    Len,
}

impl Verb {
    pub const ALL: [Verb; 7] = [Verb::Ping, Verb::QCreate, Verb::QDelete, Verb::Push, Verb::Range, Verb::Trim, Verb::Len];

    pub fn parse(raw: &[u8]) -> Option<Verb> {
        let v = match raw.to_ascii_uppercase().as_slice() {
            b"PING" => Verb::Ping,
            b"QCREATE" => Verb::QCreate,
            b"QDELETE" => Verb::QDelete,
            b"PUSH" => Verb::Push,
            b"RANGE" => Verb::Range,
            b"TRIM" => Verb::Trim,
            b"LEN" => Verb::Len,
            _ => return None,
        };
        Some(v)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Ping => "PING",
            Verb::QCreate => "QCREATE",
            Verb::QDelete => "QDELETE",
            Verb::Push => "PUSH",
            Verb::Range => "RANGE",
            Verb::Trim => "TRIM",
            Verb::Len => "LEN",
        }
    }

    fn arity(self) -> usize {
        match self {
            Verb::Ping => 0,
            Verb::QCreate | Verb::QDelete | Verb::Len => 1,
            Verb::Push | Verb::Trim => 2,
            Verb::Range => 3,
        }
    }
}

/// Per-verb command counters.
#[derive(Debug, Default)]
pub struct ServerStats {
    counts: [AtomicU64; 7],
    connections: AtomicU64,
}

impl ServerStats {
    fn record(&self, verb: Verb) {
        self.counts[verb as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, verb: Verb) -> u64 {
        self.counts[verb as usize].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        Verb::ALL.iter().map(|v| self.count(*v)).sum()
    }

    pub(crate) fn connection_opened(&self) {
        self.connections.fetch_add(1, Ordering::Relaxed);
    }

    pub fn connections_accepted(&self) -> u64 {
        self.connections.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
struct Queue {
    items: VecDeque<Vec<u8>>,
    #[allow(dead_code)]
    created_at: SystemTime,
}

impl Queue {
    fn new() -> Self {
        Queue { items: VecDeque::new(), created_at: SystemTime::now() }
    }
}

/// Named FIFO queues with per-queue locking.
#[derive(Debug)]
pub struct QueueStore {
    queues: RwLock<HashMap<String, Arc<Mutex<Queue>>>>,
    max_items: usize,
    stats: ServerStats,
}

impl Default for QueueStore {
    fn default() -> Self {
        QueueStore::new(DEFAULT_MAX_QUEUE_ITEMS)
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl QueueStore {
    pub fn new(max_items: usize) -> Self {
        QueueStore { queues: RwLock::new(HashMap::new()), max_items, stats: ServerStats::default() }
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    fn get(&self, name: &str) -> Option<Arc<Mutex<Queue>>> {
        self.queues.read().unwrap_or_else(|p| p.into_inner()).get(name).cloned()
    }

    fn get_or_create(&self, name: &str) -> Arc<Mutex<Queue>> {
        if let Some(q) = self.get(name) {
            return q;
        }
        self.queues
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .entry(name.to_owned())
            .or_insert_with(|| Arc::new(Mutex::new(Queue::new())))
            .clone()
    }

    pub fn create(&self, name: &str) {
        self.get_or_create(name);
    }

    pub fn delete(&self, name: &str) -> bool {
        self.queues.write().unwrap_or_else(|p| p.into_inner()).remove(name).is_some()
    }

    pub fn push(&self, name: &str, payload: Vec<u8>) -> Result<(), &'static str> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err("size");
        }
        let q = self.get_or_create(name);
        let mut q = lock(&q);
        if q.items.len() >= self.max_items {
            return Err("queue full");
        }
        q.items.push_back(payload);
        Ok(())
    }

    pub fn range(&self, name: &str, start: usize, count: usize) -> Vec<Vec<u8>> {
        match self.get(name) {
            None => Vec::new(),
            Some(q) => lock(&q).items.iter().skip(start).take(count).cloned().collect(),
        }
    }

    pub fn trim(&self, name: &str, count: usize) -> usize {
        match self.get(name) {
            None => 0,
            Some(q) => {
                let mut q = lock(&q);
                let n = count.min(q.items.len());
                q.items.drain(..n);
                n
            }
        }
    }

    pub fn len(&self, name: &str) -> usize {
        self.get(name).map_or(0, |q| lock(&q).items.len())
    }

    pub fn queue_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.queues.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        names.sort();
        names
    }

    /// Executes one request frame.
    pub fn execute(&self, mut args: Vec<Vec<u8>>) -> Reply {
        let Some(verb) = args.first().and_then(|v| Verb::parse(v)) else {
            return match args.first() {
                None => Reply::err("empty command"),
                Some(v) => Reply::err(format!("unknown command `{}`", String::from_utf8_lossy(v))),
            };
        };
        if args.len() != verb.arity() + 1 {
            return Reply::err(format!("wrong number of arguments for {}", verb.as_str()));
        }
        self.stats.record(verb);
        if verb == Verb::Ping {
            return Reply::Ok;
        }
        let name = match std::str::from_utf8(&args[1]) {
            Ok(n) if is_valid_queue_ident(n) => n.to_owned(),
            _ => return Reply::err("invalid queue name"),
        };
        match verb {
            Verb::Ping => Reply::Ok,
            Verb::QCreate => {
                self.create(&name);
                Reply::Ok
            }
            Verb::QDelete => {
                if self.delete(&name) {
                    Reply::Ok
                } else {
                    Reply::err("unknown queue")
                }
            }
            Verb::Push => {
                let payload = args.pop().expect("arity checked");
                match self.push(&name, payload) {
                    Ok(()) => Reply::Ok,
                    Err(e) => Reply::err(e),
                }
            }
            Verb::Range => match (parse_index(&args[2]), parse_index(&args[3])) {
                (Some(start), Some(count)) => Reply::Array(self.range(&name, start, count)),
                _ => Reply::err("start and count must be non-negative integers"),
            },
            Verb::Trim => match parse_index(&args[2]) {
                Some(count) => {
                    self.trim(&name, count);
                    Reply::Ok
                }
                None => Reply::err("count must be a non-negative integer"),
            },
            Verb::Len => Reply::Int(self.len(&name) as i64),
        }
    }
}

fn parse_index(raw: &[u8]) -> Option<usize> {
    std::str::from_utf8(raw).ok()?.parse().ok()
}
