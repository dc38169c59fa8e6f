//! Property suites shared by the integration tests and the acceptance runner.
//! Each returns a one-line summary on success and the first counterexample
//! on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cepless::bench::stats::{percentile, Summary};
use cepless::event::{decode_event, encode_event, Event, Scalar};
use cepless::queue_client::{
    BatchingConfig, BatchingSender, ClientError, Connection, FakeClock, ReceiveLoop, RecvStep, SendLoop, SendStep,
    Transport,
};
use cepless::queue_server::ServerHandle;
use cepless::registry::{NewOperator, Registry};
use cepless::wire::{self, Reply};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub type Outcome = Result<String, String>;

/// One connection shared between hand-driven loops.
#[derive(Clone)]
pub struct SharedConn(pub Arc<Mutex<Connection>>);

impl SharedConn {
    pub fn connect(server: &ServerHandle) -> Self {
        SharedConn(Arc::new(Mutex::new(Connection::connect(server.addr()).unwrap())))
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut Connection) -> R) -> R {
        f(&mut self.0.lock().unwrap())
    }
}

impl Transport for SharedConn {
    fn round_trip(&mut self, frames: &[u8], expected: usize) -> Result<Vec<Reply>, ClientError> {
        self.0.lock().unwrap().round_trip(frames, expected)
    }

    fn reconnect(&mut self) -> Result<(), ClientError> {
        self.0.lock().unwrap().reconnect()
    }
}

type Sink = Arc<Mutex<Vec<Vec<u8>>>>;

fn collecting_loop(
    conn: &SharedConn,
    queue: &str,
    cfg: &BatchingConfig,
    clock: FakeClock,
) -> (ReceiveLoop<SharedConn, FakeClock, impl FnMut(&[Vec<u8>]) -> Result<(), cepless::queue_client::CallbackError> + Send + 'static>, Sink)
{
    let sink: Sink = Arc::default();
    let s = sink.clone();
    let rl = ReceiveLoop::new(conn.clone(), clock, queue, cfg, move |batch: &[Vec<u8>]| {
        s.lock().unwrap().extend_from_slice(batch);
        Ok(())
    });
    (rl, sink)
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

struct Pumped {
    /// What the server holds after all sends, front to back.
    stored: Vec<Vec<u8>>,
    delivered: Vec<Vec<u8>>,
    flushes: u64,
}

/// Sends `payloads` in `chunks` (draining the sender after each), snapshots
/// the queue, then consumes it.
fn pump(server: &ServerHandle, queue: &str, cfg: &BatchingConfig, payloads: &[Vec<u8>], chunks: &[usize]) -> Pumped {
    let conn = SharedConn::connect(server);
    let (sender, mut send_loop): (BatchingSender, SendLoop<SharedConn, FakeClock>) =
        BatchingSender::detached(conn.clone(), FakeClock::new(), queue, cfg).unwrap();
    let mut rest = payloads;
    for &c in chunks {
        let (now, later) = rest.split_at(c.min(rest.len()));
        rest = later;
        for p in now {
            sender.receive_payload(p.clone()).unwrap();
        }
        while sender.buffered() > 0 {
            assert!(matches!(send_loop.step(), SendStep::Flushed(_)));
        }
    }
    let stored = conn.with(|c| c.range(queue, 0, payloads.len() + 1)).unwrap();
    let (mut rl, sink) = collecting_loop(&conn, queue, cfg, FakeClock::new());
    while !matches!(rl.step(), RecvStep::Idle(_)) {}
    rl.finish().unwrap();
    assert_eq!(conn.with(|c| c.len(queue)).unwrap(), 0);
    let delivered = std::mem::take(&mut *sink.lock().unwrap());
    Pumped { stored, delivered, flushes: sender.flushes() }
}

/// Any batching config moves the same payload sequence as one event per
/// flush, one per range and no back-off; flush counts are ceil(n / B) per
/// drained chunk.
pub fn batching_equivalence(server: &ServerHandle, cases: u32) -> Outcome {
    let strategy = (
        prop::collection::vec(prop::collection::vec(any::<u8>(), 0..48), 0..250),
        1usize..80,
        1usize..80,
        0u64..5_000,
        prop::collection::vec(1usize..120, 1..6),
    );
    let case = Mutex::new(0u32);
    runner(cases)
        .run(&strategy, |(payloads, out_b, in_b, backoff_ns, chunks)| {
            let n = {
                let mut c = case.lock().unwrap();
                *c += 1;
                *c
            };
            let inc = Duration::from_nanos(backoff_ns);
            let cfg = BatchingConfig {
                out_batch_size: out_b,
                in_batch_size: in_b,
                backoff_increment: inc,
                backoff_cap: inc * 10,
                ..BatchingConfig::default()
            };
            let mut chunks = chunks;
            let covered: usize = chunks.iter().sum();
            if covered < payloads.len() {
                chunks.push(payloads.len() - covered);
            }
            let base = pump(server, &format!("beq-{n}-base"), &BatchingConfig::unbatched(), &payloads, &[payloads.len()]);
            let got = pump(server, &format!("beq-{n}-cfg"), &cfg, &payloads, &chunks);
            prop_assert_eq!(&base.stored, &payloads);
            prop_assert_eq!(&base.delivered, &payloads);
            prop_assert_eq!(&got.stored, &base.stored);
            prop_assert_eq!(&got.delivered, &base.delivered);
            let mut left = payloads.len();
            let mut want = 0u64;
            for &c in &chunks {
                let k = c.min(left);
                left -= k;
                want += k.div_ceil(out_b) as u64;
            }
            prop_assert_eq!(got.flushes, want);
            prop_assert_eq!(base.flushes, payloads.len() as u64);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} randomized configs match the (1,1,0) baseline"))
}

/// k-th consecutive empty poll sleeps min(k * inc, cap); a delivery resets.
pub fn backoff_schedule(server: &ServerHandle, cases: u32) -> Outcome {
    let conn = SharedConn::connect(server);
    let strategy = (1u64..2_000_000, 1u64..30, 1usize..40, 1usize..40);
    let case = Mutex::new(0u32);
    runner(cases)
        .run(&strategy, |(inc_ns, cap_mult, before, after)| {
            let n = {
                let mut c = case.lock().unwrap();
                *c += 1;
                *c
            };
            let inc = Duration::from_nanos(inc_ns);
            let cap = inc * cap_mult as u32;
            let cfg = BatchingConfig { backoff_increment: inc, backoff_cap: cap, ..BatchingConfig::default() };
            let expect = |k: usize| (1..=k as u32).map(|j| (inc * j).min(cap)).collect::<Vec<_>>();
            let queue = format!("bo-{n}");

            let clock = FakeClock::new();
            let (mut rl, _sink) = collecting_loop(&conn, &queue, &cfg, clock.clone());
            for _ in 0..before {
                rl.step();
            }
            prop_assert_eq!(clock.sleeps(), expect(before));
            conn.with(|c| c.push(&queue, b"x")).unwrap();
            prop_assert_eq!(rl.step(), RecvStep::Delivered(1));
            prop_assert_eq!(clock.sleeps().len(), before);
            for _ in 0..after {
                rl.step();
            }
            let mut all = expect(before);
            all.extend(expect(after));
            prop_assert_eq!(clock.sleeps(), all.clone());
            rl.finish().unwrap();

            let send_clock = FakeClock::new();
            let (sender, mut sl) = BatchingSender::detached(conn.clone(), send_clock.clone(), &queue, &cfg).unwrap();
            for _ in 0..before {
                sl.step();
            }
            sender.receive_payload(b"y".to_vec()).unwrap();
            prop_assert_eq!(sl.step(), SendStep::Flushed(1));
            for _ in 0..after {
                sl.step();
            }
            prop_assert_eq!(send_clock.sleeps(), all);
            conn.with(|c| c.delete(&queue)).unwrap();
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} increment/cap pairs follow the linear schedule"))
}

/// Random interleavings of one producer connection and one consumer
/// connection (range-then-trim, with consumer restarts) deliver the pushed
/// sequence exactly once, in order.
pub fn fifo_exactly_once(server: &ServerHandle, schedules: u32, seed: u64) -> Outcome {
    let producer = SharedConn::connect(server);
    let consumer = SharedConn::connect(server);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pushed_total = 0usize;
    for s in 0..schedules {
        let queue = format!("fifo-{s}");
        let cfg = BatchingConfig { in_batch_size: rng.gen_range(1..9), ..BatchingConfig::unbatched() };
        let mut pushed: Vec<Vec<u8>> = Vec::new();
        let mut delivered: Vec<Vec<u8>> = Vec::new();
        let (mut rl, mut sink) = collecting_loop(&consumer, &queue, &cfg, FakeClock::new());
        for _ in 0..rng.gen_range(1..25) {
            match rng.gen_range(0..10) {
                0..=3 => {
                    let mut frames = Vec::new();
                    let k = rng.gen_range(1..6);
                    for _ in 0..k {
                        let p = format!("{s}:{}", pushed.len()).into_bytes();
                        wire::encode_request(&[b"PUSH".as_slice(), queue.as_bytes(), &p], &mut frames);
                        pushed.push(p);
                    }
                    let replies = producer.clone().round_trip(&frames, k).map_err(|e| e.to_string())?;
                    if replies.iter().any(|r| *r != Reply::Ok) {
                        return Err(format!("schedule {s}: push rejected: {replies:?}"));
                    }
                }
                4..=8 => {
                    rl.step();
                }
                _ => {
                    // Consumer handoff: the old loop trims what it delivered.
                    rl.finish().map_err(|e| e.to_string())?;
                    delivered.append(&mut sink.lock().unwrap());
                    (rl, sink) = collecting_loop(&consumer, &queue, &cfg, FakeClock::new());
                }
            }
        }
        while !matches!(rl.step(), RecvStep::Idle(_)) {}
        rl.finish().map_err(|e| e.to_string())?;
        delivered.append(&mut sink.lock().unwrap());
        if delivered != pushed {
            return Err(format!("schedule {s} (seed {seed}): pushed {} items, delivered {:?}", pushed.len(), delivered));
        }
        let left = consumer.with(|c| c.len(&queue)).map_err(|e| e.to_string())?;
        if left != 0 {
            return Err(format!("schedule {s}: {left} items left untrimmed"));
        }
        pushed_total += pushed.len();
        consumer.with(|c| c.delete(&queue)).ok();
    }
    Ok(format!("{schedules} schedules, {pushed_total} items delivered exactly once in order"))
}

fn random_command(rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let queue = ["pa-in", "pb-out", "pc-ctl", "Bad Name"][rng.gen_range(0..4)];
    let num = |rng: &mut ChaCha8Rng| match rng.gen_range(0..8) {
        0 => "-1".to_owned(),
        1 => "x".to_owned(),
        _ => rng.gen_range(0..6).to_string(),
    };
    let parts: Vec<String> = match rng.gen_range(0..16) {
        0 => vec!["PING".into()],
        1 => vec!["QCREATE".into(), queue.into()],
        2 => vec!["QDELETE".into(), queue.into()],
        3..=7 => vec!["PUSH".into(), queue.into(), format!("v{}\r\n{}", rng.gen::<u16>(), rng.gen::<u8>())],
        8..=10 => vec!["RANGE".into(), queue.into(), num(rng), num(rng)],
        11 | 12 => vec!["TRIM".into(), queue.into(), num(rng)],
        13 => vec!["LEN".into(), queue.into()],
        14 => vec!["LEN".into()],
        _ => vec!["FLUSHALL".into(), queue.into()],
    };
    parts.into_iter().map(String::into_bytes).collect()
}

/// Replies to a pipelined burst equal the replies to the same commands sent
/// one at a time to a fresh server.
pub fn pipelined_order(pipelined: &ServerHandle, sequential: &ServerHandle, sequences: u32, seed: u64) -> Outcome {
    let mut a = Connection::connect(pipelined.addr()).map_err(|e| e.to_string())?;
    let mut b = Connection::connect(sequential.addr()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for s in 0..sequences {
        let cmds: Vec<Vec<Vec<u8>>> = (0..rng.gen_range(1..60)).map(|_| random_command(&mut rng)).collect();
        let mut burst = Vec::new();
        for c in &cmds {
            wire::encode_request(c, &mut burst);
        }
        let got = a.round_trip(&burst, cmds.len()).map_err(|e| e.to_string())?;
        let mut want = Vec::with_capacity(cmds.len());
        for c in &cmds {
            let mut one = Vec::new();
            wire::encode_request(c, &mut one);
            want.extend(b.round_trip(&one, 1).map_err(|e| e.to_string())?);
        }
        if got != want {
            return Err(format!("sequence {s}: pipelined {got:?} != sequential {want:?}"));
        }
        total += cmds.len();
    }
    Ok(format!("{sequences} pipelined sequences ({total} commands) match sequential execution"))
}

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![
        any::<String>().prop_map(Scalar::Str),
        any::<i64>().prop_map(Scalar::Int),
        prop::num::f64::NORMAL.prop_map(Scalar::Float),
        prop::num::f64::SUBNORMAL.prop_map(Scalar::Float),
        prop::num::f64::ZERO.prop_map(Scalar::Float),
        (0u32..1000).prop_map(|k| Scalar::Float(k as f64 / 100.0)),
    ]
}

pub fn event() -> impl Strategy<Value = Event> {
    (any::<u64>(), any::<i64>(), prop::collection::btree_map("\\PC{1,12}|[a-zA-Z\"\\\\\n ]{1,6}", scalar(), 0..6))
        .prop_map(|(seq, ts_produced, attrs)| Event { seq, ts_produced, attrs })
}

/// encode(decode(encode(e))) == encode(e), decode inverts encode, and equal
/// encodings come only from equal events.
pub fn encoding_round_trip(cases: u32) -> Outcome {
    let seen: Mutex<BTreeMap<Vec<u8>, Event>> = Mutex::default();
    runner(cases)
        .run(&(event(), event()), |(e, f)| {
            let enc = encode_event(&e).unwrap();
            let back = decode_event(&enc).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(encode_event(&back).unwrap(), enc.clone());
            let enc_f = encode_event(&f).unwrap();
            prop_assert_eq!(enc == enc_f, e == f);
            let mut seen = seen.lock().unwrap();
            if let Some(prev) = seen.insert(enc, e.clone()) {
                prop_assert_eq!(prev, e);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let distinct = seen.lock().unwrap().len();
    Ok(format!("{cases} random events round-trip; {distinct} distinct encodings, no collisions"))
}

fn numeric_version(rng: &mut ChaCha8Rng) -> (u32, u32, u32) {
    (rng.gen_range(0..2), rng.gen_range(0..3), rng.gen_range(0..3))
}

/// A registry reopened from disk lists and fetches exactly what was
/// published, with latest = the numerically largest version.
pub fn registry_reconstruction(seed: u64) -> Outcome {
    let root = TempDir::new().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: BTreeMap<String, BTreeSet<(u32, u32, u32)>> = BTreeMap::new();
    {
        let reg = Registry::open(root.path()).map_err(|e| e.to_string())?;
        for i in 0..40 {
            let name = format!("op-{}", rng.gen_range(0..6));
            let v = numeric_version(&mut rng);
            let version = format!("{}.{}.{}", v.0, v.1, v.2);
            let pkg = TempDir::new().map_err(|e| e.to_string())?;
            std::fs::write(pkg.path().join("body"), format!("{name} {version}")).map_err(|e| e.to_string())?;
            let mut op = NewOperator::new(&name, &version, vec!["/bin/true".into(), format!("--n={i}")]);
            if model.get(&name).is_some_and(|s| s.contains(&v)) {
                // Same tag, different content: must be refused.
                if reg.publish(&op, pkg.path()).is_ok() {
                    return Err(format!("republishing {name}:{version} with new content succeeded"));
                }
                continue;
            }
            op.config.insert("k".into(), i.to_string());
            reg.publish(&op, pkg.path()).map_err(|e| e.to_string())?;
            model.entry(name).or_default().insert(v);
        }
    }
    let before = Registry::open(root.path()).and_then(|r| r.list()).map_err(|e| e.to_string())?;
    let reg = Registry::open(root.path()).map_err(|e| e.to_string())?;
    let listed: BTreeSet<(String, String)> = reg
        .list()
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|d| (d.name, d.version))
        .collect();
    let want: BTreeSet<(String, String)> = model
        .iter()
        .flat_map(|(n, vs)| vs.iter().map(move |v| (n.clone(), format!("{}.{}.{}", v.0, v.1, v.2))))
        .collect();
    if listed != want {
        return Err(format!("reopened registry lists {listed:?}, published {want:?}"));
    }
    if reg.list().map_err(|e| e.to_string())? != before {
        return Err("descriptors changed across reopen".into());
    }
    for (name, vs) in &model {
        let top = vs.iter().next_back().expect("non-empty");
        let (d, path) = reg.fetch(name, None).map_err(|e| e.to_string())?;
        if d.version != format!("{}.{}.{}", top.0, top.1, top.2) {
            return Err(format!("latest {name} is {}, expected {top:?}", d.version));
        }
        let body = std::fs::read_to_string(path.join("body")).map_err(|e| e.to_string())?;
        if body != format!("{name} {}", d.version) {
            return Err(format!("package of {name}:{} holds `{body}`", d.version));
        }
    }
    Ok(format!("{} versions of {} operators survive a reopen", want.len(), model.len()))
}

/// Smallest sample value with at least pct% of the sample at or below it,
/// found by scanning.
fn brute_percentile(sample: &[f64], pct: u32) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    for (i, &x) in sorted.iter().enumerate() {
        if (i + 1) * 100 >= pct as usize * n {
            return x;
        }
    }
    unreachable!("pct <= 100")
}

pub fn percentile_oracle(cases: u32) -> Outcome {
    let strategy = (prop::collection::vec(-1e6f64..1e6, 1..400), 1u32..=100);
    runner(cases)
        .run(&strategy, |(sample, pct)| {
            let mut sorted = sample.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(percentile(&sorted, pct), Some(brute_percentile(&sample, pct)));
            let s = Summary::of(sample.iter().copied()).unwrap();
            prop_assert_eq!(s.p90, brute_percentile(&sample, 90));
            prop_assert_eq!(s.p95, brute_percentile(&sample, 95));
            prop_assert_eq!(s.p99, brute_percentile(&sample, 99));
            prop_assert_eq!(s.min, sorted[0]);
            prop_assert_eq!(s.max, sorted[sorted.len() - 1]);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} samples agree with the brute-force nearest rank"))
}
