mod common;

use std::time::Duration;

use common::recovery::{coordinator_restart, failover};
use common::{wait_until, Stack};
use sdnator_core::coordinator::InstanceStatus;
use sdnator_core::key::DataKey;
use sdnator_core::manifest::{AppId, Manifest, Roles};

#[test]
fn standby_takes_over_within_three_heartbeats() {
    let stack = Stack::start();
    let f = failover(&stack);
    let gap = f.gap.expect("stream never resumed");
    assert!(gap <= 3 * f.heartbeat, "resumed after {gap:?}");
}

#[test]
fn coordinator_restart_does_not_interrupt_data() {
    let mut stack = Stack::start();
    let r = coordinator_restart(&mut stack, Duration::from_secs(2), Duration::from_millis(500));
    assert!(r.recovered);
    assert!(r.dip() < 0.01, "before {} during {}", r.before, r.during);
}

#[test]
fn restarted_coordinator_reports_the_same_apps() {
    let mut stack = Stack::start();
    let k = DataKey::parse("cell.arm.angle").unwrap();
    let producer = stack.session("arm", Roles::PRODUCER, Manifest::new().capability(k.clone(), None, false));
    let probe = stack.session("probe", Roles::CONSUMER, Manifest::new());
    let id = AppId::new("arm").unwrap();
    let before = probe.status(Some(&id), Duration::from_secs(2)).unwrap().unwrap();
    stack.coordinator.take().unwrap().kill();
    stack.start_coordinator();
    assert!(stack.coordinator.as_ref().unwrap().recovered());
    let after = probe.status(Some(&id), Duration::from_secs(2)).unwrap().unwrap();
    assert_eq!(after[0].instances.len(), before[0].instances.len());
    assert_eq!(after[0].instances[0].0, producer.identity().instance);
    assert!(after[0].instances[0].1.status.is_healthy());

    let unknown = probe.status(Some(&AppId::new("nobody").unwrap()), Duration::from_secs(2)).unwrap();
    assert!(unknown.is_err());
}

#[test]
fn sixty_apps_register_at_once() {
    let stack = Stack::start();
    let sessions: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..60)
            .map(|i| {
                let stack = &stack;
                s.spawn(move || {
                    let k = DataKey::parse(&format!("swarm.node{i}.load")).unwrap();
                    stack.session(&format!("node{i}"), Roles::PRODUCER, Manifest::new().capability(k, None, false))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let snapshot = stack.coordinator.as_ref().unwrap().snapshot();
    let nodes = snapshot.iter().filter(|a| a.app_id.as_str().starts_with("node")).count();
    assert_eq!(nodes, 60);
    for s in &sessions {
        s.close();
    }
    assert!(wait_until(Duration::from_secs(3), || {
        stack
            .coordinator
            .as_ref()
            .unwrap()
            .snapshot()
            .iter()
            .filter(|a| a.app_id.as_str().starts_with("node"))
            .all(|a| a.instances.iter().all(|(_, r)| r.status == InstanceStatus::Offline))
    }));
}
