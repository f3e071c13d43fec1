//! The coordinator service: the core state machine driven over the bus.
//!
//! The service is an ordinary client of the framework. It subscribes to the
//! reserved registration, heartbeat, status and lost-connection keys, feeds
//! each message to a single event loop thread, and turns the state
//! machine's effects into publications (assignments, registration prompts)
//! and archive writes (checkpoint events). On start it replays the archived
//! checkpoint events, if an archive is reachable.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdnator_core::archive::ArchiveQuery;
use sdnator_core::coordinator::{AppStatus, Coordinator, CoordinatorConfig, CoordinatorError, Effect, HeartbeatStatus, StatusEvent};
use sdnator_core::key::KeyPattern;
use sdnator_core::manifest::{AppId, AppIdentity, InstanceId, Roles};
use sdnator_core::payload::{
    assignment_key, parse_instance_key, register_request_key, status_event_key, status_request_key, Heartbeat, Payload,
    RegisterReply, RegisterRequest, StatusReply, StatusRequest, REJECT_DUPLICATE_INSTANCE, REJECT_RESERVED_NAMESPACE,
};
use sdnator_core::wire::Envelope;
use sdnator_core::DataKey;

use crate::due::{new_instance_id, DueConfig, DueError, Session};

/// Application id the coordinator connects under.
pub const COORDINATOR_APP: &str = "sdnator-coordinator";

#[derive(Debug, Clone)]
pub struct CoordinatorServiceConfig {
    pub due: DueConfig,
    pub core: CoordinatorConfig,
    /// How often stale instances are swept.
    pub sweep_interval: Duration,
    /// Seed for failover selection; random when absent.
    pub seed: Option<u64>,
}

impl Default for CoordinatorServiceConfig {
    fn default() -> Self {
        Self {
            due: DueConfig::default(),
            core: CoordinatorConfig::default(),
            sweep_interval: Duration::from_millis(250),
            seed: None,
        }
    }
}

enum Event {
    Register(RegisterRequest),
    Heartbeat(AppId, InstanceId, HeartbeatStatus),
    Lost(AppId, InstanceId),
    Status(StatusRequest),
    Snapshot(Sender<Vec<AppStatus>>),
    Stop,
}

pub struct CoordinatorService {
    session: Session,
    events: Sender<Event>,
    worker: Option<thread::JoinHandle<()>>,
    recovered: bool,
}

fn now_us() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(1)
}

impl CoordinatorService {
    pub fn start(cfg: CoordinatorServiceConfig) -> Result<Self, DueError> {
        let identity = AppIdentity {
            app_id: AppId::new(COORDINATOR_APP).expect("valid app id"),
            instance: new_instance_id(),
            roles: Roles::BOTH,
        };
        let session = Session::init_unregistered(identity, cfg.due.clone())?;
        let (tx, rx) = mpsc::channel();

        let subscribe = |pattern: &str, f: fn(&Envelope) -> Option<Event>| -> Result<(), DueError> {
            let tx = tx.clone();
            session.subscribe_internal(
                KeyPattern::parse(pattern).expect("reserved pattern"),
                Arc::new(move |env: Envelope| {
                    if let Some(ev) = f(&env) {
                        let _ = tx.send(ev);
                    }
                }),
                None,
            )?;
            Ok(())
        };
        subscribe(register_request_key().as_str(), |env| {
            RegisterRequest::from_payload(&env.value).ok().map(Event::Register)
        })?;
        subscribe("sdnator.heartbeat.**", |env| {
            let (app, inst) = parse_instance_key(&env.key, &["heartbeat"])?;
            let hb = Heartbeat::from_payload(&env.value).ok()?;
            Some(Event::Heartbeat(app, inst, hb.status))
        })?;
        subscribe("sdnator.status.lost.**", |env| {
            let (app, inst) = parse_instance_key(&env.key, &["status", "lost"])?;
            Some(Event::Lost(app, inst))
        })?;
        subscribe(status_request_key().as_str(), |env| {
            StatusRequest::from_payload(&env.value).ok().map(Event::Status)
        })?;

        let mut rng = match cfg.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        };
        let (state, effects, recovered) = match load_checkpoints(&session) {
            Some(events) => {
                let (c, effects) = Coordinator::recover(cfg.core, events, now_us(), &mut rng);
                (c, effects, true)
            }
            None => (Coordinator::new(cfg.core), Vec::new(), false),
        };
        let s = session.clone();
        let sweep = cfg.sweep_interval;
        let worker = thread::Builder::new()
            .name("coordinator".into())
            .spawn(move || {
                let mut l = Loop { state, rng, session: s };
                l.apply(effects);
                l.run(rx, sweep);
            })
            .map_err(|e| DueError::Transport(e.into()))?;
        Ok(Self {
            session,
            events: tx,
            worker: Some(worker),
            recovered,
        })
    }

    /// Whether state was rebuilt from archived checkpoints.
    pub fn recovered(&self) -> bool {
        self.recovered
    }

    /// Status of every application, taken on the event loop.
    pub fn snapshot(&self) -> Vec<AppStatus> {
        let (tx, rx) = mpsc::channel();
        if self.events.send(Event::Snapshot(tx)).is_err() {
            return Vec::new();
        }
        rx.recv_timeout(Duration::from_secs(5)).unwrap_or_default()
    }

    /// Stops the loop and closes the session cleanly.
    pub fn shutdown(mut self) {
        self.stop(false);
    }

    /// Stops as if the process were killed.
    pub fn kill(mut self) {
        self.stop(true);
    }

    fn stop(&mut self, abrupt: bool) {
        let _ = self.events.send(Event::Stop);
        if let Some(t) = self.worker.take() {
            let _ = t.join();
        }
        if abrupt {
            self.session.abort();
        } else {
            self.session.close();
        }
    }
}

impl Drop for CoordinatorService {
    fn drop(&mut self) {
        if self.worker.is_some() {
            self.stop(false);
        }
    }
}

/// Archived checkpoint events, oldest first; `None` when the archive cannot
/// be queried.
fn load_checkpoints(session: &Session) -> Option<Vec<StatusEvent>> {
    let records = session.get(&ArchiveQuery::exact(&status_event_key())).ok()?;
    Some(
        records
            .iter()
            .filter_map(|r| StatusEvent::from_payload(&r.value).ok())
            .collect(),
    )
}

struct Loop {
    state: Coordinator,
    rng: ChaCha8Rng,
    session: Session,
}

impl Loop {
    fn run(&mut self, rx: Receiver<Event>, sweep: Duration) {
        let mut next_sweep = Instant::now() + sweep;
        loop {
            let wait = next_sweep.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(Event::Stop) | Err(RecvTimeoutError::Disconnected) => return,
                Ok(ev) => self.handle(ev),
                Err(RecvTimeoutError::Timeout) => {}
            }
            if Instant::now() >= next_sweep {
                let effects = self.state.sweep(now_us(), &mut self.rng);
                self.apply(effects);
                next_sweep = Instant::now() + sweep;
            }
        }
    }

    fn handle(&mut self, ev: Event) {
        let now = now_us();
        match ev {
            Event::Register(req) => {
                let reply = match self.state.register(&req.identity, &req.manifest, now, &mut self.rng) {
                    Ok((reg, effects)) => {
                        self.apply(effects);
                        RegisterReply::Accepted {
                            active: reg.active,
                            epoch: reg.epoch,
                            assignments: reg.assignments,
                        }
                    }
                    Err(e) => RegisterReply::Rejected {
                        code: match e {
                            CoordinatorError::ReservedNamespace(_) => REJECT_RESERVED_NAMESPACE,
                            CoordinatorError::DuplicateInstanceId { .. } => REJECT_DUPLICATE_INSTANCE,
                            CoordinatorError::UnknownApp(_) => 0,
                        },
                        message: e.to_string(),
                    },
                };
                self.publish(&req.reply_key, reply.to_payload());
            }
            Event::Heartbeat(app, inst, status) => {
                let effects = self.state.on_heartbeat(&app, inst, status, now, &mut self.rng);
                self.apply(effects);
            }
            Event::Lost(app, inst) => {
                let effects = self.state.on_connection_lost(&app, inst, now, &mut self.rng);
                self.apply(effects);
            }
            Event::Status(req) => {
                let reply = StatusReply {
                    request_id: req.request_id,
                    result: self.state.status(req.filter.as_ref()).map_err(|e| e.to_string()),
                };
                self.publish(&req.reply_key, reply.to_payload());
            }
            Event::Snapshot(tx) => {
                let _ = tx.send(self.state.status(None).unwrap_or_default());
            }
            Event::Stop => {}
        }
    }

    fn apply(&mut self, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::Publish(msg) => {
                    self.publish(&assignment_key(&msg.app_id), msg.to_payload());
                }
                Effect::RequestRegistration { instance, .. } => {
                    let key = sdnator_core::payload::register_reply_key(instance);
                    self.publish(&key, RegisterReply::Reregister.to_payload());
                }
                Effect::Checkpoint(ev) => {
                    self.session.archive_raw(&status_event_key(), ev.to_payload());
                }
            }
        }
    }

    fn publish(&self, key: &DataKey, value: Vec<u8>) {
        // The bus is the only way out; a failed send is retried by the
        // peer's own registration retry or the next reconcile.
        let _ = self.session.publish_raw(key, value);
    }
}
