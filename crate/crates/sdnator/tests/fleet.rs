mod common;

use std::time::{Duration, Instant};

use common::Stack;
use sdnator::fleetnet::{run_local, run_networked, scheduler_for, NetLink, SchedulerApp, TwinApp};
use sdnator_core::fleet::{run_scenario, Facet, ScenarioConfig, SchedulerKind, SimError, TwinLink};

fn scenario(kind: SchedulerKind) -> ScenarioConfig {
    ScenarioConfig {
        scheduler: kind,
        machines: 4,
        ..ScenarioConfig::default()
    }
    .with_anomalies(0.1)
    .with_ppe()
}

#[test]
fn networked_runs_match_in_process_runs() {
    let stack = Stack::start();
    for kind in SchedulerKind::ALL {
        let cfg = scenario(kind);
        let local = run_local(&cfg, 11).unwrap();
        let net = run_networked(&cfg, 11, &stack.due(), Duration::from_secs(10)).unwrap();
        assert_eq!(local, net, "{kind}");
    }
}

#[test]
fn decisions_travel_through_the_bus() {
    let stack = Stack::start();
    let cfg = scenario(SchedulerKind::Fcfs);
    let sched = SchedulerApp::start(scheduler_for(&cfg).unwrap(), cfg.machines, stack.due()).unwrap();
    let twins = TwinApp::start(cfg.machines, stack.due()).unwrap();
    let mut link = NetLink::start(cfg.machines, stack.due(), Duration::from_secs(10)).unwrap();
    link.wait_ready(cfg.scheduler.interests(), &twins, &sched, Duration::from_secs(10))
        .unwrap();
    let report = run_scenario(&cfg, 3, Some(&mut link as &mut dyn TwinLink)).unwrap();
    assert!(report.jobs.iter().all(|j| j.finished_min.is_some()));

    let decisions = sched.session().stats().writes.load(std::sync::atomic::Ordering::Relaxed);
    assert!(decisions > 0);
    // fcfs reads state and queue twins only; anomaly twins are refused
    // at the source.
    let facets = cfg.scheduler.interests();
    assert!(!facets.contains(Facet::Anomaly));
    let t = twins.session().stats();
    let written = t.writes.load(std::sync::atomic::Ordering::Relaxed);
    let refused = t.rejected.load(std::sync::atomic::Ordering::Relaxed);
    assert_eq!(written, decisions * cfg.machines as u64 * 2);
    assert_eq!(refused, decisions * cfg.machines as u64);
}

#[test]
fn removing_the_twin_app_stalls_central_schedulers() {
    let stack = Stack::start();
    let cfg = scenario(SchedulerKind::Dynamic);
    let _sched = SchedulerApp::start(scheduler_for(&cfg).unwrap(), cfg.machines, stack.due()).unwrap();
    let mut link = NetLink::start(cfg.machines, stack.due(), Duration::from_millis(500)).unwrap();
    let t = Instant::now();
    let err = run_scenario(&cfg, 1, Some(&mut link as &mut dyn TwinLink)).unwrap_err();
    assert!(matches!(err, SimError::Stalled(_)), "{err}");
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn decentralized_needs_no_twins() {
    let stack = Stack::start();
    let cfg = scenario(SchedulerKind::Decentralized);
    let net = run_networked(&cfg, 5, &stack.due(), Duration::from_secs(1)).unwrap();
    assert_eq!(net, run_local(&cfg, 5).unwrap());
}
