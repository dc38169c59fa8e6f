mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cepless::event::{decode_event, encode_event, Event};
use cepless::node_manager::{ControlClient, ControlServer, InstanceState, NodeControl, NodeError};
use cepless::queue_client::{BatchingConfig, BatchingSender, Connection};

use common::{kill_9, publish, publish_with, wait_until, Cluster};

fn event(seq: u64) -> Vec<u8> {
    encode_event(&Event::new(seq, 0).with_attr("amount", (seq % 100) as f64 / 100.0)).unwrap()
}

/// Reads everything from `queue` until `n` items arrived or time runs out.
fn collect(conn: &mut Connection, queue: &str, n: usize, timeout: Duration) -> Vec<Vec<u8>> {
    let mut got = Vec::new();
    let deadline = Instant::now() + timeout;
    while got.len() < n && Instant::now() < deadline {
        let items = conn.range(queue, 0, 1000).unwrap();
        if items.is_empty() {
            thread::sleep(Duration::from_millis(2));
            continue;
        }
        conn.trim(queue, items.len()).unwrap();
        got.extend(items);
    }
    got
}

fn seqs(items: &[Vec<u8>]) -> Vec<u64> {
    items.iter().map(|p| decode_event(p).unwrap().seq).collect()
}

#[test]
fn deploy_creates_queues_and_worker_echoes() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", None).unwrap();
    assert_eq!(h.state, InstanceState::Running);
    assert_eq!(h.version, "1.1.0");
    assert_eq!(h.input_queue, format!("{}-in", h.instance_id));
    assert_eq!(h.output_queue, format!("{}-out", h.instance_id));
    let names = c.server.store().queue_names();
    assert!(names.contains(&h.input_queue) && names.contains(&h.output_queue));
    let mut conn = c.conn();
    assert_eq!(conn.len(&h.input_queue).unwrap(), 0);
    assert_eq!(conn.len(&h.output_queue).unwrap(), 0);

    let sent: Vec<_> = (0..100).map(event).collect();
    for p in &sent {
        conn.push(&h.input_queue, p).unwrap();
    }
    let got = collect(&mut conn, &h.output_queue, 100, Duration::from_secs(10));
    assert_eq!(got, sent);
}

#[test]
fn deploy_unknown_is_not_found() {
    let c = Cluster::start();
    let err = c.manager.deploy("no-such-op", None).unwrap_err();
    assert!(err.is_not_found(), "{err}");
}

#[test]
fn worker_dying_before_ready_fails_with_stderr() {
    let c = Cluster::start();
    let cmd = vec!["sh".to_string(), "-c".to_string(), "echo boom-on-start >&2; exit 3".to_string()];
    publish_with(c.registry(), "broken", "1", cmd, &[]);
    let err = c.manager.deploy("broken", None).unwrap_err();
    match &err {
        NodeError::WorkerFailed { code, stderr, .. } => {
            assert_eq!(*code, Some(3));
            assert!(stderr.contains("boom-on-start"), "{stderr}");
        }
        other => panic!("unexpected {other}"),
    }
    let st = c.manager.status();
    assert_eq!(st.len(), 1);
    assert_eq!(st[0].state, InstanceState::Failed);
}

#[test]
fn missing_env_is_reported_by_worker() {
    let c = Cluster::start();
    let cmd = vec!["env".to_string(), "-u".to_string(), "CEPLESS_CTL_QUEUE".to_string(), common::WORKER_BIN.to_string()];
    publish_with(c.registry(), "no-env", "1", cmd, &[]);
    match c.manager.deploy("no-env", None).unwrap_err() {
        NodeError::WorkerFailed { stderr, .. } => assert!(stderr.contains("CEPLESS_CTL_QUEUE"), "{stderr}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn idle_update_keeps_queues() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", Some("1.0.0")).unwrap();
    let r = c.manager.update(&h.instance_id, "1.1.0").unwrap();
    assert_eq!((r.old_version.as_str(), r.new_version.as_str()), ("1.0.0", "1.1.0"));
    assert!(r.switch_duration_ms >= r.update_duration_ms);
    assert_eq!(r.events_in_flight, 0);
    assert!(!r.forced);
    let after = c.manager.handle(&h.instance_id).unwrap();
    assert_eq!(after.state, InstanceState::Running);
    assert_eq!(after.version, "1.1.0");
    assert_eq!(after.input_queue, h.input_queue);
    assert_ne!(after.pid, h.pid);

    let mut conn = c.conn();
    conn.push(&h.input_queue, &event(1)).unwrap();
    assert_eq!(seqs(&collect(&mut conn, &h.output_queue, 1, Duration::from_secs(5))), vec![1]);
}

#[test]
fn update_under_steady_stream_is_exactly_once() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", Some("1.0.0")).unwrap();
    let cfg = BatchingConfig { out_batch_size: 10, ..BatchingConfig::default() };
    let sender = BatchingSender::start(c.server.addr(), &h.input_queue, &cfg).unwrap();
    let total = 3000u64;
    let producer = {
        let start = Instant::now();
        thread::spawn(move || {
            for seq in 0..total {
                // 1,000 events per second, paced by wall clock.
                let due = start + Duration::from_micros(seq * 1000);
                if let Some(d) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(d);
                }
                sender.receive_payload(event(seq)).unwrap();
            }
            sender.stop().unwrap();
        })
    };
    thread::sleep(Duration::from_millis(1000));
    let r = c.manager.update(&h.instance_id, "1.1.0").unwrap();
    assert!(r.update_duration_ms < 1000, "{r:?}");
    producer.join().unwrap();
    let mut conn = c.conn();
    let got = seqs(&collect(&mut conn, &h.output_queue, total as usize, Duration::from_secs(10)));
    assert_eq!(got, (0..total).collect::<Vec<_>>());
}

#[test]
fn failed_new_version_rolls_back() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", Some("1.0.0")).unwrap();
    publish_with(c.registry(), "forward-op", "2.0.0", vec!["sh".into(), "-c".into(), "exit 1".into()], &[]);
    let err = c.manager.update(&h.instance_id, "2.0.0").unwrap_err();
    assert!(matches!(err, NodeError::RolledBack(_)), "{err}");
    let after = c.manager.handle(&h.instance_id).unwrap();
    assert_eq!(after.state, InstanceState::Running);
    assert_eq!(after.version, "1.0.0");
    assert_eq!(after.pid, h.pid);

    let mut conn = c.conn();
    conn.push(&h.input_queue, &event(5)).unwrap();
    assert_eq!(seqs(&collect(&mut conn, &h.output_queue, 1, Duration::from_secs(5))), vec![5]);
}

#[test]
fn drain_first_rolls_back_to_old_version() {
    let c = Cluster::start();
    publish_with(c.registry(), "df", "1", common::worker_command(&["--op", "forward"]), &[("handoff", "drain-first")]);
    publish_with(c.registry(), "df", "2", vec!["sh".into(), "-c".into(), "exit 1".into()], &[("handoff", "drain-first")]);
    let h = c.manager.deploy("df", Some("1")).unwrap();
    assert!(matches!(c.manager.update(&h.instance_id, "2"), Err(NodeError::RolledBack(_))));
    let after = c.manager.handle(&h.instance_id).unwrap();
    assert_eq!((after.state, after.version.as_str()), (InstanceState::Running, "1"));
    let mut conn = c.conn();
    conn.push(&h.input_queue, &event(9)).unwrap();
    assert_eq!(seqs(&collect(&mut conn, &h.output_queue, 1, Duration::from_secs(5))), vec![9]);
}

#[test]
fn queue_contents_survive_the_swap() {
    let c = Cluster::start_with(|cfg| cfg.batch_size = 10);
    publish(c.registry(), "slow", "1", &["--op", "forward", "--delay-us", "2000"]);
    publish(c.registry(), "slow", "2", &["--op", "forward"]);
    for mode in ["paused", "drain-first"] {
        let version = if mode == "paused" { ("1", "2") } else { ("1-df", "2-df") };
        if mode == "drain-first" {
            let cfg = [("handoff", "drain-first")];
            publish_with(c.registry(), "slow", "1-df", common::worker_command(&["--op", "forward", "--delay-us", "2000"]), &cfg);
            publish_with(c.registry(), "slow", "2-df", common::worker_command(&["--op", "forward"]), &cfg);
        }
        let h = c.manager.deploy("slow", Some(version.0)).unwrap();
        let mut conn = c.conn();
        // The producer is paused for the whole swap: everything is queued up front.
        for seq in 0..500 {
            conn.push(&h.input_queue, &event(seq)).unwrap();
        }
        thread::sleep(Duration::from_millis(50));
        let r = c.manager.update(&h.instance_id, version.1).unwrap();
        assert!(r.in_len_before_stop > 0, "{mode}: {r:?}");
        assert_eq!(r.in_len_before_stop, r.in_len_after_start, "{mode}");
        let got = seqs(&collect(&mut conn, &h.output_queue, 500, Duration::from_secs(20)));
        assert_eq!(got, (0..500).collect::<Vec<_>>(), "{mode}");
    }
}

#[test]
fn stuck_worker_is_killed_after_drain_timeout() {
    let c = Cluster::start_with(|cfg| {
        cfg.batch_size = 5;
        cfg.drain_timeout = Duration::from_millis(300);
    });
    publish(c.registry(), "stuck", "1", &["--op", "forward", "--delay-us", "1000000"]);
    publish(c.registry(), "stuck", "2", &["--op", "forward"]);
    let h = c.manager.deploy("stuck", Some("1")).unwrap();
    let mut conn = c.conn();
    for seq in 0..20 {
        conn.push(&h.input_queue, &event(seq)).unwrap();
    }
    thread::sleep(Duration::from_millis(100));
    let r = c.manager.update(&h.instance_id, "2").unwrap();
    assert!(r.forced);
    // The killed worker never trimmed its batch, so nothing is lost.
    let got = seqs(&collect(&mut conn, &h.output_queue, 20, Duration::from_secs(10)));
    assert_eq!(got, (0..20).collect::<Vec<_>>());
}

#[test]
fn remove_stops_and_deletes_queues() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", None).unwrap();
    c.manager.remove(&h.instance_id).unwrap();
    let after = c.manager.handle(&h.instance_id).unwrap();
    assert_eq!(after.state, InstanceState::Stopped);
    assert_eq!(after.pid, None);
    let names = c.server.store().queue_names();
    assert!(!names.iter().any(|n| n.starts_with(&h.instance_id)), "{names:?}");
    assert!(matches!(c.manager.remove(&h.instance_id), Err(NodeError::InvalidState { .. })));
    assert!(matches!(c.manager.remove("nope-1"), Err(NodeError::UnknownInstance(_))));
}

#[test]
fn crashed_worker_is_restarted_on_same_queues() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", None).unwrap();
    let t0 = Instant::now();
    kill_9(h.pid.unwrap());
    assert!(wait_until(Duration::from_secs(1), || {
        let now = c.manager.handle(&h.instance_id).unwrap();
        now.restarts == 1 && now.state == InstanceState::Running
    }));
    assert!(t0.elapsed() < Duration::from_secs(1));
    let after = c.manager.handle(&h.instance_id).unwrap();
    assert_ne!(after.pid, h.pid);
    assert_eq!(after.input_queue, h.input_queue);

    let mut conn = c.conn();
    conn.push(&h.input_queue, &event(3)).unwrap();
    assert_eq!(seqs(&collect(&mut conn, &h.output_queue, 1, Duration::from_secs(5))), vec![3]);
}

#[test]
fn three_crashes_in_window_give_up() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", None).unwrap();
    for round in 0..3 {
        let pid = c.manager.handle(&h.instance_id).unwrap().pid.unwrap();
        kill_9(pid);
        if round < 2 {
            assert!(wait_until(Duration::from_secs(2), || c.manager.handle(&h.instance_id).unwrap().restarts == round + 1));
        }
    }
    assert!(wait_until(Duration::from_secs(2), || c.manager.handle(&h.instance_id).unwrap().state == InstanceState::Failed));
    assert_eq!(c.manager.handle(&h.instance_id).unwrap().restarts, 2);
}

#[test]
fn healthy_worker_is_never_restarted() {
    let c = Cluster::start();
    let h = c.manager.deploy("forward-op", None).unwrap();
    thread::sleep(Duration::from_millis(500));
    let after = c.manager.handle(&h.instance_id).unwrap();
    assert_eq!((after.restarts, after.pid), (0, h.pid));
}

#[test]
fn concurrent_updates_keep_one_consumer_per_queue() {
    let c = Cluster::start();
    let handles: Vec<_> = (0..3).map(|_| c.manager.deploy("forward-op", Some("1.0.0")).unwrap()).collect();
    let stop = Arc::new(AtomicBool::new(false));
    let checker = {
        let (m, stop) = (c.manager.clone(), stop.clone());
        let queues: Vec<_> = handles.iter().map(|h| h.input_queue.clone()).collect();
        thread::spawn(move || {
            let mut observed = BTreeSet::new();
            while !stop.load(Ordering::SeqCst) {
                for q in &queues {
                    if let Some(g) = m.tokens().holder(q) {
                        observed.insert((q.clone(), g));
                    }
                }
                thread::sleep(Duration::from_millis(1));
            }
            observed
        })
    };
    let workers: Vec<_> = handles
        .iter()
        .map(|h| {
            let (m, id) = (c.manager.clone(), h.instance_id.clone());
            thread::spawn(move || {
                for round in 0..4 {
                    let v = if round % 2 == 0 { "1.1.0" } else { "1.0.0" };
                    m.update(&id, v).unwrap();
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    stop.store(true, Ordering::SeqCst);
    let observed = checker.join().unwrap();
    assert_eq!(c.manager.tokens().refusals(), 0);
    // Every queue ends with exactly one holder: the live worker.
    for h in &handles {
        assert!(c.manager.tokens().holder(&h.input_queue).is_some());
    }
    assert!(!observed.is_empty());
}

#[test]
fn control_port_round_trip() {
    let c = Cluster::start();
    let server = ControlServer::bind("127.0.0.1:0", c.manager.clone()).unwrap();
    let addr = server.spawn().unwrap();
    let client = ControlClient::connect(addr).unwrap();

    let h = client.deploy("forward-op", Some("1.0.0")).unwrap();
    assert_eq!(h.state, InstanceState::Running);
    assert_eq!(client.status().unwrap(), vec![c.manager.handle(&h.instance_id).unwrap()]);
    let r = client.update(&h.instance_id, "1.1.0").unwrap();
    assert_eq!(r.new_version, "1.1.0");
    client.remove(&h.instance_id).unwrap();

    let err = client.deploy("no-such-op", None).unwrap_err();
    assert!(err.is_not_found(), "{err}");
    let err = client.remove(&h.instance_id).unwrap_err();
    assert_eq!(err.kind(), "state");
}
