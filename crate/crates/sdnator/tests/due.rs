mod common;

use std::time::Duration;

use common::{wait_until, Sink, Stack};
use sdnator::due::{DueError, WriteOutcome};
use sdnator_core::archive::ArchiveQuery;
use sdnator_core::key::{DataKey, KeyPattern};
use sdnator_core::manifest::{Manifest, Roles, WriteFlags};

fn key(s: &str) -> DataKey {
    DataKey::parse(s).unwrap()
}

fn pat(s: &str) -> KeyPattern {
    KeyPattern::parse(s).unwrap()
}

#[test]
fn producer_reaches_consumer_and_archive() {
    let stack = Stack::start();
    let k = key("plant.line1.temp");
    let consumer = stack.session("viewer", Roles::CONSUMER, Manifest::new().interest(pat("plant.**"), None));
    let sink = Sink::default();
    let obs = consumer.observe(pat("plant.*.temp")).unwrap();
    obs.on_data(sink.push());
    let producer = stack.session("sensor", Roles::PRODUCER, Manifest::new().capability(k.clone(), None, false));
    assert!(producer.wait_assigned(&k, Duration::from_secs(3)));
    for i in 0..3u8 {
        assert_eq!(producer.write(&k, &[i], WriteFlags::NONE).unwrap(), WriteOutcome::Accepted);
    }
    producer.flush().unwrap();
    assert!(sink.wait_for(3, Duration::from_secs(3)));
    assert_eq!(sink.values(), vec![vec![0], vec![1], vec![2]]);
    let got = consumer.get(&ArchiveQuery::exact(&k)).unwrap();
    assert_eq!(got.iter().map(|r| r.value.clone()).collect::<Vec<_>>(), sink.values());
    assert!(got.iter().all(|r| r.producer_app == "sensor" && r.producer_instance == producer.identity().instance));
}

#[test]
fn capability_without_demand_is_rejected() {
    let stack = Stack::start();
    let k = key("plant.line1.pressure");
    let producer = stack.session("sensor", Roles::PRODUCER, Manifest::new().capability(k.clone(), Some(20.0), false));
    assert_eq!(producer.write(&k, b"x", WriteFlags::NONE).unwrap(), WriteOutcome::Rejected);
    assert!(matches!(
        producer.write(&key("other.key"), b"x", WriteFlags::NONE),
        Err(DueError::UnknownCapabilityKey(_))
    ));
    producer.flush().unwrap();
    assert!(producer.get(&ArchiveQuery::exact(&k)).unwrap().is_empty());
}

#[test]
fn pub_only_skips_archive_and_batches_flush() {
    let stack = Stack::start();
    let k = key("plant.line2.temp");
    let mut cfg = stack.due();
    cfg.updates_batch = 100;
    cfg.linger = Duration::from_secs(5);
    let consumer = stack.session("viewer", Roles::CONSUMER, Manifest::new().interest(pat("plant.line2.temp"), None));
    let sink = Sink::default();
    let obs = consumer.observe(pat("plant.line2.temp")).unwrap();
    obs.on_data(sink.push());
    let producer = stack.session_with("sensor", Roles::PRODUCER, Manifest::new().capability(k.clone(), None, false), cfg);
    assert!(producer.wait_assigned(&k, Duration::from_secs(3)));
    for i in 0..5u8 {
        producer.write(&k, &[i], WriteFlags::PUB_ONLY).unwrap();
    }
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(sink.len(), 0, "batch of 100 must hold five writes");
    producer.flush().unwrap();
    assert!(sink.wait_for(5, Duration::from_secs(3)));
    assert!(producer.get(&ArchiveQuery::exact(&k)).unwrap().is_empty());
    producer.close();
    producer.close();
}

#[test]
fn role_checks() {
    let stack = Stack::start();
    let consumer = stack.session("viewer", Roles::CONSUMER, Manifest::new());
    assert!(matches!(consumer.write(&key("a.b"), b"", WriteFlags::NONE), Err(DueError::NotAProducer)));
    let producer = stack.session("sensor", Roles::PRODUCER, Manifest::new().capability(key("a.b"), None, false));
    assert!(matches!(producer.observe(pat("a.b")), Err(DueError::NotAConsumer)));
}

#[test]
fn close_marks_offline() {
    let stack = Stack::start();
    let app = stack.session("viewer", Roles::CONSUMER, Manifest::new());
    let probe = stack.session("probe", Roles::CONSUMER, Manifest::new());
    let id = app.identity().app_id.clone();
    app.close();
    assert!(wait_until(Duration::from_secs(2), || {
        let apps = probe.status(Some(&id), Duration::from_secs(1)).unwrap().unwrap();
        apps[0].instances[0].1.status == sdnator_core::coordinator::InstanceStatus::Offline
    }));
}

/// Offers writes at `hz` for `span`, returning how many were accepted.
fn offer(producer: &sdnator::due::Session, k: &DataKey, hz: u32, span: Duration) -> u64 {
    let start = std::time::Instant::now();
    let mut accepted = 0;
    let mut n = 0u64;
    while start.elapsed() < span {
        if producer.write(k, &n.to_le_bytes(), WriteFlags::PUB_ONLY).unwrap() == WriteOutcome::Accepted {
            accepted += 1;
        }
        n += 1;
        let next = start + Duration::from_secs_f64(n as f64 / hz as f64);
        if let Some(wait) = next.checked_duration_since(std::time::Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    accepted
}

#[test]
fn writes_are_paced_to_the_assigned_rate() {
    let stack = Stack::start();
    let k = key("plant.line3.temp");
    let consumer = stack.session("viewer", Roles::CONSUMER, Manifest::new().interest(pat("plant.line3.temp"), Some(10.0)));
    let sink = Sink::default();
    let obs = consumer.observe(pat("plant.line3.temp")).unwrap();
    obs.on_data(sink.push());
    let producer = stack.session("sensor", Roles::PRODUCER, Manifest::new().capability(k.clone(), None, false));
    assert!(producer.wait_assigned(&k, Duration::from_secs(3)));
    let accepted = offer(&producer, &k, 1000, Duration::from_secs(2));
    producer.flush().unwrap();
    assert!((17..=23).contains(&accepted), "accepted {accepted}");
    assert!(sink.wait_for(accepted as usize, Duration::from_secs(2)));
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(sink.len() as u64, accepted);
    assert!(producer.stats().paced.load(std::sync::atomic::Ordering::Relaxed) > 1500);
}

#[test]
fn every_accepted_write_is_delivered_once() {
    let stack = Stack::start();
    let k = key("plant.line4.count");
    let consumer = stack.session("viewer", Roles::CONSUMER, Manifest::new().interest(pat("plant.line4.*"), None));
    let sink = Sink::default();
    let obs = consumer.observe(pat("plant.line4.count")).unwrap();
    obs.on_data(sink.push());
    let mut cfg = stack.due();
    cfg.updates_batch = 37;
    cfg.archive_batch = 250;
    let producer = stack.session_with("counter", Roles::PRODUCER, Manifest::new().capability(k.clone(), None, false), cfg);
    assert!(producer.wait_assigned(&k, Duration::from_secs(3)));
    for i in 0..10_000u32 {
        assert_eq!(producer.write(&k, &i.to_le_bytes(), WriteFlags::NONE).unwrap(), WriteOutcome::Accepted);
    }
    producer.flush().unwrap();
    assert!(sink.wait_for(10_000, Duration::from_secs(10)));
    let values: Vec<u32> = sink.values().iter().map(|v| u32::from_le_bytes(v[..4].try_into().unwrap())).collect();
    assert_eq!(values, (0..10_000).collect::<Vec<_>>());
    assert_eq!(producer.get(&ArchiveQuery::exact(&k)).unwrap().len(), 10_000);
}

#[test]
fn flush_with_nothing_buffered_returns() {
    let stack = Stack::start();
    let k = key("plant.idle");
    let producer = stack.session("sensor", Roles::PRODUCER, Manifest::new().capability(k, None, false));
    let t = std::time::Instant::now();
    producer.flush().unwrap();
    producer.flush().unwrap();
    assert!(t.elapsed() < Duration::from_millis(500));
    producer.close();
    producer.close();
    assert!(producer.is_closed());
    assert!(matches!(producer.write(&key("plant.idle"), b"", WriteFlags::NONE), Err(DueError::Closed)));
}

#[test]
fn overlapping_observers_each_see_every_match() {
    let stack = Stack::start();
    let a = key("site.a.temp");
    let b = key("site.b.temp");
    let consumer = stack.session("viewer", Roles::CONSUMER, Manifest::new().interest(pat("site.**"), None));
    let wide = Sink::default();
    let narrow = Sink::default();
    let w = consumer.observe(pat("site.**")).unwrap();
    w.on_data(wide.push());
    let n = consumer.observe(pat("site.a.*")).unwrap();
    n.on_data(narrow.push());
    let producer = stack.session(
        "sensor",
        Roles::PRODUCER,
        Manifest::new().capability(a.clone(), None, false).capability(b.clone(), None, false),
    );
    assert!(producer.wait_assigned(&a, Duration::from_secs(3)) && producer.wait_assigned(&b, Duration::from_secs(3)));
    for i in 0..4u8 {
        producer.write(&a, &[i], WriteFlags::PUB_ONLY).unwrap();
        producer.write(&b, &[100 + i], WriteFlags::PUB_ONLY).unwrap();
    }
    producer.flush().unwrap();
    assert!(wide.wait_for(8, Duration::from_secs(3)));
    assert!(narrow.wait_for(4, Duration::from_secs(3)));
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(wide.values(), vec![vec![0], vec![100], vec![1], vec![101], vec![2], vec![102], vec![3], vec![103]]);
    assert_eq!(narrow.values(), vec![vec![0], vec![1], vec![2], vec![3]]);
}
