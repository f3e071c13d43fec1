#![allow(dead_code)]

pub mod archive;
pub mod recovery;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use sdnator::bus::{BusConfig, BusServer};
use sdnator::coord::{CoordinatorService, CoordinatorServiceConfig};
use sdnator::due::{new_instance_id, DueConfig, Session};
use sdnator::store::{StoreConfig, StoreServer};
use sdnator_core::manifest::{AppId, AppIdentity, Manifest, Roles};
use sdnator_core::wire::Envelope;

/// Bus, store and coordinator on ephemeral loopback ports.
pub struct Stack {
    pub bus: BusServer,
    pub store: Option<StoreServer>,
    pub coordinator: Option<CoordinatorService>,
    pub dir: tempfile::TempDir,
    pub heartbeat: Duration,
}

impl Stack {
    pub fn start() -> Self {
        Self::with(BusConfig::default(), Duration::from_millis(200))
    }

    pub fn with(bus: BusConfig, heartbeat: Duration) -> Self {
        let bus = BusServer::start(BusConfig {
            listen: "127.0.0.1:0".into(),
            ..bus
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = StoreServer::start(StoreConfig {
            listen: "127.0.0.1:0".into(),
            data_dir: dir.path().join("archive"),
            ..StoreConfig::default()
        })
        .unwrap();
        let mut stack = Stack {
            bus,
            store: Some(store),
            coordinator: None,
            dir,
            heartbeat,
        };
        stack.start_coordinator();
        stack
    }

    pub fn start_coordinator(&mut self) {
        let mut cfg = CoordinatorServiceConfig {
            due: self.due(),
            seed: Some(7),
            sweep_interval: self.heartbeat / 4,
            ..CoordinatorServiceConfig::default()
        };
        cfg.core.heartbeat_interval_us = self.heartbeat.as_micros() as u64;
        self.coordinator = Some(CoordinatorService::start(cfg).unwrap());
    }

    pub fn due(&self) -> DueConfig {
        DueConfig {
            bus_addr: self.bus.local_addr().to_string(),
            archive_addr: self.store.as_ref().map(|s| s.local_addr().to_string()),
            heartbeat_interval: self.heartbeat,
            handshake_timeout: Duration::from_secs(5),
            ..DueConfig::default()
        }
    }

    pub fn session(&self, app: &str, roles: Roles, manifest: Manifest) -> Session {
        self.session_with(app, roles, manifest, self.due())
    }

    pub fn session_with(&self, app: &str, roles: Roles, manifest: Manifest, cfg: DueConfig) -> Session {
        let identity = AppIdentity {
            app_id: AppId::new(app).unwrap(),
            instance: new_instance_id(),
            roles,
        };
        Session::init(identity, manifest, cfg).unwrap()
    }
}

/// Collects deliveries from observer callbacks.
#[derive(Clone, Default)]
pub struct Sink(pub Arc<Mutex<Vec<Envelope>>>);

impl Sink {
    pub fn push(&self) -> impl FnMut(&Envelope) + Send + 'static {
        let v = self.0.clone();
        move |e: &Envelope| v.lock().unwrap().push(e.clone())
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn values(&self) -> Vec<Vec<u8>> {
        self.0.lock().unwrap().iter().map(|e| e.value.clone()).collect()
    }

    pub fn wait_for(&self, n: usize, timeout: Duration) -> bool {
        wait_until(timeout, || self.len() >= n)
    }
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    f()
}
