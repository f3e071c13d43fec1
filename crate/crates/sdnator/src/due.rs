//! The client library every application links.
//!
//! A [`Session`] holds one bus connection shared by publishing, observing and
//! the registration protocol, plus two archive connections: one fed by a
//! background thread with write batches, one for synchronous queries.
//!
//! Thread layout per session: the bus reader thread routes inbound frames
//! and never blocks on session locks; the control thread runs heartbeats,
//! linger flushes, re-registration and reconnects; the archive thread
//! drains archive batches; each observer has a dispatch thread running its
//! callbacks.

use std::collections::{HashMap, VecDeque};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender};
use std::sync::{Arc, Condvar, Mutex, RwLock, Weak};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use sdnator_core::archive::{ArchiveQuery, ArchiveRecord};
use sdnator_core::coordinator::{AppStatus, AssignmentMsg, HeartbeatStatus};
use sdnator_core::key::{DataKey, KeyPattern};
use sdnator_core::manifest::{AppId, AppIdentity, AssignmentSet, InstanceId, Manifest, Roles, WriteFlags};
use sdnator_core::pacing::{PaceDecision, Pacer};
use sdnator_core::payload::{
    assignment_key, heartbeat_key, register_reply_key, register_request_key, status_reply_key, status_request_key,
    Heartbeat, Payload, RegisterReply, RegisterRequest, StatusReply, StatusRequest, REJECT_DUPLICATE_INSTANCE,
    REJECT_RESERVED_NAMESPACE,
};
use sdnator_core::wire::{ArchiveEntry, Envelope, ErrorCode, Frame, PubEnvelope};

use crate::transport::{spawn_reader, FrameReader, Link, LinkShape, TransportError};

/// What an observer does when its callbacks fall behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverOverflow {
    /// Discard the oldest queued delivery and count it.
    DropOldest,
    /// Stop reading from the bus until there is room.
    Block,
}

#[derive(Debug, Clone)]
pub struct DueConfig {
    pub bus_addr: String,
    /// `None` disables archive mirroring and queries.
    pub archive_addr: Option<String>,
    pub updates_batch: usize,
    pub archive_batch: usize,
    pub linger: Duration,
    pub heartbeat_interval: Duration,
    pub heartbeat_multiplier: u32,
    /// How long `init` keeps retrying the coordinator handshake.
    pub handshake_timeout: Duration,
    pub connect_timeout: Duration,
    pub link: LinkShape,
    pub observer_queue: usize,
    pub observer_overflow: ObserverOverflow,
    /// Archive batches that may wait for the archive thread before writers block.
    pub archive_queue: usize,
}

impl Default for DueConfig {
    fn default() -> Self {
        Self {
            bus_addr: "127.0.0.1:7401".into(),
            archive_addr: Some("127.0.0.1:7402".into()),
            updates_batch: 1,
            archive_batch: 1,
            linger: Duration::from_millis(5),
            heartbeat_interval: Duration::from_secs(1),
            heartbeat_multiplier: 3,
            handshake_timeout: Duration::from_secs(10),
            connect_timeout: Duration::from_secs(2),
            link: LinkShape::default(),
            observer_queue: 10_000,
            observer_overflow: ObserverOverflow::DropOldest,
            archive_queue: 16,
        }
    }
}

impl DueConfig {
    pub fn validate(&self) -> Result<(), DueError> {
        let bad = |key: &str, reason: &str| Err(DueError::BadConfig(format!("{key}: {reason}")));
        if self.updates_batch == 0 {
            return bad("updates_batch", "must be at least 1");
        }
        if self.archive_batch == 0 {
            return bad("archive_batch", "must be at least 1");
        }
        if self.linger.is_zero() {
            return bad("linger", "must be positive");
        }
        if self.heartbeat_interval.is_zero() {
            return bad("heartbeat_interval", "must be positive");
        }
        if self.heartbeat_multiplier == 0 {
            return bad("heartbeat_multiplier", "must be at least 1");
        }
        if self.observer_queue == 0 || self.archive_queue == 0 {
            return bad("queue", "depth must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DueError {
    #[error("no registration reply from the coordinator within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("duplicate instance id: {0}")]
    DuplicateInstanceId(String),
    #[error("reserved namespace: {0}")]
    ReservedNamespace(String),
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("session was not opened with the producer role")]
    NotAProducer,
    #[error("session was not opened with the consumer role")]
    NotAConsumer,
    #[error("{0} is not among the declared capabilities")]
    UnknownCapabilityKey(DataKey),
    #[error("value of {0} bytes does not fit in a frame")]
    ValueTooLarge(usize),
    #[error("backend unreachable at {addr}: {reason}")]
    BackendUnreachable { addr: String, reason: String },
    #[error("bus connection lost")]
    Disconnected,
    #[error("session closed")]
    Closed,
    #[error("no archive configured")]
    ArchiveUnavailable,
    #[error("server error {}: {message}", code.0)]
    Server { code: ErrorCode, message: String },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// Buffered for the bus (and the archive unless pub-only).
    Accepted,
    /// Over the assigned rate; the value was dropped.
    Paced,
    /// Nobody is interested in the key right now; nothing was sent.
    Rejected,
}

/// Counters reported in heartbeats.
#[derive(Debug, Default)]
pub struct SessionStats {
    pub writes: AtomicU64,
    pub paced: AtomicU64,
    pub rejected: AtomicU64,
    pub delivered: AtomicU64,
    /// Archive batches discarded while the archive was unreachable.
    pub archive_dropped: AtomicU64,
    pub reconnects: AtomicU64,
}

type Route = Arc<dyn Fn(Envelope) + Send + Sync>;

enum Expect {
    Pub(u64),
    Sub { route: Route, done: Sender<Result<u64, DueError>> },
    Unsub,
}

struct Tx {
    link: Option<Link>,
    generation: u64,
    next_seq: u64,
    expect: VecDeque<Expect>,
}

#[derive(Default)]
struct Replies {
    acked: u64,
    generation: u64,
    /// Server error answering the most recent publish, if any.
    failed: Option<(u64, ErrorCode, String)>,
}

#[derive(Default)]
struct Outbox {
    updates: Vec<(DataKey, Vec<u8>)>,
    archive: Vec<ArchiveEntry>,
    since: Option<Instant>,
}

struct Assigned {
    pacer: Pacer,
    epoch: u64,
    active: bool,
}

/// A pattern the session wants subscribed, re-established on reconnect.
struct Wanted {
    id: u64,
    pattern: KeyPattern,
    route: Route,
    on_resubscribe: Option<Arc<dyn Fn() + Send + Sync>>,
    sub_id: Option<u64>,
}

enum Ctl {
    Wake,
    Reregister,
    Reconnect(u64),
}

struct ArchiveProgress {
    queued: u64,
    done: u64,
}

struct Shared {
    identity: AppIdentity,
    manifest: Manifest,
    cfg: DueConfig,
    registered: bool,
    started: Instant,
    tx: Mutex<Tx>,
    replies: Mutex<Replies>,
    replies_cv: Condvar,
    out: Mutex<Outbox>,
    assigned: Mutex<Assigned>,
    routes: RwLock<HashMap<u64, Route>>,
    wanted: Mutex<Vec<Wanted>>,
    next_wanted: AtomicU64,
    reg_reply: Mutex<Option<RegisterReply>>,
    reg_cv: Condvar,
    status: Mutex<HashMap<u64, StatusReply>>,
    status_cv: Condvar,
    next_request: AtomicU64,
    ctl: Mutex<Sender<Ctl>>,
    archive_tx: Mutex<Option<SyncSender<Vec<ArchiveEntry>>>>,
    archive_progress: Mutex<ArchiveProgress>,
    archive_cv: Condvar,
    query: Mutex<Option<(Link, FrameReader<TcpStream>)>>,
    stats: SessionStats,
    active_since_tick: AtomicBool,
    closed: AtomicBool,
    threads: Mutex<Vec<thread::JoinHandle<()>>>,
}

/// A live connection of one application instance to the framework.
/// Cloning is cheap; all clones share the session.
#[derive(Clone)]
pub struct Session {
    shared: Arc<Shared>,
}

fn unix_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(1)
        .max(1)
}

/// A fresh random instance id.
pub fn new_instance_id() -> InstanceId {
    InstanceId(uuid::Uuid::new_v4().as_u128())
}

impl Session {
    /// Connects, registers with the coordinator and starts the background
    /// threads. Producers come back with their assignment set installed.
    pub fn init(identity: AppIdentity, manifest: Manifest, cfg: DueConfig) -> Result<Self, DueError> {
        Self::start(identity, manifest, cfg, true)
    }

    /// Connects without the coordinator handshake and without heartbeats.
    /// Nothing is assigned, so only the framework's own raw publishing works;
    /// used by the coordinator itself.
    pub fn init_unregistered(identity: AppIdentity, cfg: DueConfig) -> Result<Self, DueError> {
        Self::start(identity, Manifest::new(), cfg, false)
    }

    fn start(identity: AppIdentity, manifest: Manifest, cfg: DueConfig, registered: bool) -> Result<Self, DueError> {
        cfg.validate()?;
        let (ctl_tx, ctl_rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            identity,
            manifest,
            registered,
            started: Instant::now(),
            tx: Mutex::new(Tx {
                link: None,
                generation: 0,
                next_seq: 1,
                expect: VecDeque::new(),
            }),
            replies: Mutex::new(Replies::default()),
            replies_cv: Condvar::new(),
            out: Mutex::new(Outbox::default()),
            assigned: Mutex::new(Assigned {
                pacer: Pacer::new(),
                epoch: 0,
                active: false,
            }),
            routes: RwLock::new(HashMap::new()),
            wanted: Mutex::new(Vec::new()),
            next_wanted: AtomicU64::new(1),
            reg_reply: Mutex::new(None),
            reg_cv: Condvar::new(),
            status: Mutex::new(HashMap::new()),
            status_cv: Condvar::new(),
            next_request: AtomicU64::new(1),
            ctl: Mutex::new(ctl_tx),
            archive_tx: Mutex::new(None),
            archive_progress: Mutex::new(ArchiveProgress { queued: 0, done: 0 }),
            archive_cv: Condvar::new(),
            query: Mutex::new(None),
            stats: SessionStats::default(),
            active_since_tick: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
            cfg,
        });
        connect_bus(&shared)?;
        let session = Session { shared: shared.clone() };

        if let Some(addr) = shared.cfg.archive_addr.clone() {
            let (tx, rx) = mpsc::sync_channel(shared.cfg.archive_queue);
            *shared.archive_tx.lock().unwrap() = Some(tx);
            let s = shared.clone();
            let t = thread::Builder::new()
                .name("due-archive".into())
                .spawn(move || archive_loop(s, addr, rx))
                .map_err(|e| DueError::Transport(e.into()))?;
            shared.threads.lock().unwrap().push(t);
        }

        let s = Arc::downgrade(&shared);
        let t = thread::Builder::new()
            .name("due-control".into())
            .spawn(move || control_loop(s, ctl_rx))
            .map_err(|e| DueError::Transport(e.into()))?;
        shared.threads.lock().unwrap().push(t);

        let me = shared.identity.instance;
        let weak = Arc::downgrade(&shared);
        session.subscribe_internal(
            KeyPattern::exact(&status_reply_key(me)),
            Arc::new(move |env: Envelope| {
                let Some(s) = weak.upgrade() else { return };
                if let Ok(reply) = StatusReply::from_payload(&env.value) {
                    s.status.lock().unwrap().insert(reply.request_id, reply);
                    s.status_cv.notify_all();
                }
            }),
            None,
        )?;

        if registered {
            if let Err(e) = session.register() {
                session.abort();
                return Err(e);
            }
        }
        Ok(session)
    }

    fn register(&self) -> Result<(), DueError> {
        let s = &self.shared;
        let me = s.identity.instance;
        let weak = Arc::downgrade(s);
        self.subscribe_internal(
            KeyPattern::exact(&register_reply_key(me)),
            Arc::new(move |env: Envelope| {
                let Some(s) = weak.upgrade() else { return };
                match RegisterReply::from_payload(&env.value) {
                    Ok(RegisterReply::Reregister) => {
                        let _ = s.ctl.lock().unwrap().send(Ctl::Reregister);
                    }
                    Ok(reply) => {
                        if let RegisterReply::Accepted {
                            active,
                            epoch,
                            assignments,
                        } = &reply
                        {
                            install(&s, *epoch, *active, assignments);
                        }
                        *s.reg_reply.lock().unwrap() = Some(reply);
                        s.reg_cv.notify_all();
                    }
                    Err(_) => {}
                }
            }),
            None,
        )?;
        let weak = Arc::downgrade(s);
        self.subscribe_internal(
            KeyPattern::exact(&assignment_key(&s.identity.app_id)),
            Arc::new(move |env: Envelope| {
                let Some(s) = weak.upgrade() else { return };
                if let Ok(msg) = AssignmentMsg::from_payload(&env.value) {
                    install(&s, msg.epoch, msg.target == s.identity.instance, &msg.assignments);
                }
            }),
            None,
        )?;

        let deadline = Instant::now() + s.cfg.handshake_timeout;
        let mut wait = Duration::from_millis(200);
        loop {
            send_registration(s)?;
            let until = (Instant::now() + wait).min(deadline);
            let mut reply = s.reg_reply.lock().unwrap();
            while reply.is_none() {
                let now = Instant::now();
                if now >= until {
                    break;
                }
                reply = s.reg_cv.wait_timeout(reply, until - now).unwrap().0;
            }
            match reply.take() {
                Some(RegisterReply::Accepted { .. }) => break,
                Some(RegisterReply::Rejected { code, message }) => {
                    return Err(match code {
                        REJECT_DUPLICATE_INSTANCE => DueError::DuplicateInstanceId(message),
                        REJECT_RESERVED_NAMESPACE => DueError::ReservedNamespace(message),
                        _ => DueError::Rejected(message),
                    })
                }
                _ => {}
            }
            drop(reply);
            if Instant::now() >= deadline {
                return Err(DueError::HandshakeTimeout(s.cfg.handshake_timeout));
            }
            wait = (wait * 2).min(Duration::from_secs(2));
        }
        let _ = send_heartbeat(s, HeartbeatStatus::Online);
        Ok(())
    }

    pub fn identity(&self) -> &AppIdentity {
        &self.shared.identity
    }

    pub fn manifest(&self) -> &Manifest {
        &self.shared.manifest
    }

    pub fn stats(&self) -> &SessionStats {
        &self.shared.stats
    }

    /// Whether the coordinator currently treats this instance as the app's
    /// active producer.
    pub fn is_active(&self) -> bool {
        self.shared.assigned.lock().unwrap().active
    }

    pub fn is_assigned(&self, key: &DataKey) -> bool {
        self.shared.assigned.lock().unwrap().pacer.is_assigned(key)
    }

    /// Waits until `key` has an assignment.
    pub fn wait_assigned(&self, key: &DataKey, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.is_assigned(key) {
                return true;
            }
            thread::sleep(Duration::from_millis(5));
        }
        self.is_assigned(key)
    }

    pub fn write(&self, key: &DataKey, value: &[u8], flags: WriteFlags) -> Result<WriteOutcome, DueError> {
        let s = &self.shared;
        if s.closed.load(Ordering::Relaxed) {
            return Err(DueError::Closed);
        }
        if !s.identity.roles.contains(Roles::PRODUCER) {
            return Err(DueError::NotAProducer);
        }
        if s.manifest.capability_for(key).is_none() {
            return Err(DueError::UnknownCapabilityKey(key.clone()));
        }
        if value.len() + key.as_str().len() + 64 > s.max_frame() as usize {
            return Err(DueError::ValueTooLarge(value.len()));
        }
        let mut out = s.out.lock().unwrap();
        let now = s.started.elapsed().as_micros() as u64;
        match s.assigned.lock().unwrap().pacer.check(key, now) {
            PaceDecision::Accept => {}
            PaceDecision::Paced => {
                s.stats.paced.fetch_add(1, Ordering::Relaxed);
                return Ok(WriteOutcome::Paced);
            }
            PaceDecision::Unassigned => {
                s.stats.rejected.fetch_add(1, Ordering::Relaxed);
                return Ok(WriteOutcome::Rejected);
            }
        }
        s.stats.writes.fetch_add(1, Ordering::Relaxed);
        s.active_since_tick.store(true, Ordering::Relaxed);
        let archive = !flags.pub_only && s.cfg.archive_addr.is_some();
        if archive {
            out.archive.push(ArchiveEntry {
                key: key.clone(),
                value: value.to_vec(),
                seq: 0,
                timestamp_us: unix_us(),
            });
        }
        out.updates.push((key.clone(), value.to_vec()));
        if out.since.is_none() {
            out.since = Some(Instant::now());
            if s.cfg.updates_batch > 1 || s.cfg.archive_batch > 1 {
                let _ = s.ctl.lock().unwrap().send(Ctl::Wake);
            }
        }
        if flags.no_wait || out.updates.len() >= s.cfg.updates_batch {
            flush_updates(s, &mut out)?;
        }
        if flags.no_wait || out.archive.len() >= s.cfg.archive_batch {
            flush_archive(s, &mut out);
        }
        if out.updates.is_empty() && out.archive.is_empty() {
            out.since = None;
        }
        Ok(WriteOutcome::Accepted)
    }

    /// Sends both buffers and waits until the bus acked every update and the
    /// archive acked (or dropped) every archive batch.
    pub fn flush(&self) -> Result<(), DueError> {
        let s = &self.shared;
        {
            let mut out = s.out.lock().unwrap();
            flush_updates(s, &mut out)?;
            flush_archive(s, &mut out);
            out.since = None;
        }
        let mut p = s.archive_progress.lock().unwrap();
        let target = p.queued;
        while p.done < target {
            if s.closed.load(Ordering::Relaxed) && s.archive_tx.lock().unwrap().is_none() {
                break;
            }
            p = s.archive_cv.wait_timeout(p, Duration::from_millis(100)).unwrap().0;
        }
        Ok(())
    }

    /// Subscribes to `pattern`. Deliveries queue up until a callback is added.
    pub fn observe(&self, pattern: KeyPattern) -> Result<Observer, DueError> {
        let s = &self.shared;
        if !s.identity.roles.contains(Roles::CONSUMER) {
            return Err(DueError::NotAConsumer);
        }
        let inner = Arc::new(ObserverInner {
            queue: Mutex::new(ObserverQueue {
                events: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
            space: Condvar::new(),
            data_cbs: Mutex::new(Vec::new()),
            resub_cbs: Mutex::new(Vec::new()),
            capacity: s.cfg.observer_queue,
            overflow: s.cfg.observer_overflow,
            dropped: AtomicU64::new(0),
            received: AtomicU64::new(0),
        });
        let i = inner.clone();
        let weak = Arc::downgrade(s);
        let route: Route = Arc::new(move |env: Envelope| {
            if let Some(s) = weak.upgrade() {
                s.stats.delivered.fetch_add(1, Ordering::Relaxed);
                s.active_since_tick.store(true, Ordering::Relaxed);
            }
            i.push(ObserverEvent::Data(env));
        });
        let i = inner.clone();
        let on_resub: Arc<dyn Fn() + Send + Sync> = Arc::new(move || i.push(ObserverEvent::Resubscribed));
        let id = self.subscribe_internal(pattern.clone(), route, Some(on_resub))?;
        let i = inner.clone();
        let dispatch = thread::Builder::new()
            .name("due-observer".into())
            .spawn(move || i.dispatch())
            .map_err(|e| DueError::Transport(e.into()))?;
        Ok(Observer {
            inner,
            session: Arc::downgrade(s),
            wanted_id: id,
            pattern,
            dispatch: Some(dispatch),
        })
    }

    /// Runs an archive query over the query connection.
    pub fn get(&self, q: &ArchiveQuery) -> Result<Vec<ArchiveRecord>, DueError> {
        let s = &self.shared;
        let Some(addr) = s.cfg.archive_addr.clone() else {
            return Err(DueError::ArchiveUnavailable);
        };
        let mut conn = s.query.lock().unwrap();
        if conn.is_none() {
            *conn = Some(connect_archive(s, &addr)?);
        }
        let (link, reader) = conn.as_mut().unwrap();
        let result = (|| {
            link.send_frame(&Frame::Query(q.clone())).map_err(TransportError::from)?;
            let mut out = Vec::new();
            loop {
                match reader.read_frame()? {
                    Some(Frame::QueryResult { done, records }) => {
                        out.extend(records);
                        if done {
                            break;
                        }
                    }
                    Some(Frame::Err { code, message }) => return Err(DueError::Server { code, message }),
                    Some(_) => continue,
                    None => return Err(DueError::Transport(TransportError::Closed)),
                }
            }
            if !link.latency().is_zero() {
                thread::sleep(link.latency());
            }
            Ok(out)
        })();
        if matches!(result, Err(DueError::Transport(_))) {
            *conn = None;
        }
        result
    }

    /// Turns the archive's per-key index on or off.
    pub fn set_index(&self, key: &DataKey, enabled: bool) -> Result<(), DueError> {
        let s = &self.shared;
        let Some(addr) = s.cfg.archive_addr.clone() else {
            return Err(DueError::ArchiveUnavailable);
        };
        let mut conn = s.query.lock().unwrap();
        if conn.is_none() {
            *conn = Some(connect_archive(s, &addr)?);
        }
        let (link, reader) = conn.as_mut().unwrap();
        link.send_frame(&Frame::SetIndex {
            key: key.clone(),
            enabled,
        })
        .map_err(TransportError::from)?;
        match reader.read_frame()? {
            Some(Frame::Ack { .. }) => Ok(()),
            Some(Frame::Err { code, message }) => Err(DueError::Server { code, message }),
            _ => {
                *conn = None;
                Err(DueError::Transport(TransportError::Closed))
            }
        }
    }

    /// Asks the coordinator for the status of one or all applications.
    pub fn status(&self, filter: Option<&AppId>, timeout: Duration) -> Result<Result<Vec<AppStatus>, String>, DueError> {
        let s = &self.shared;
        let request_id = s.next_request.fetch_add(1, Ordering::Relaxed);
        let req = StatusRequest {
            request_id,
            filter: filter.cloned(),
            reply_key: status_reply_key(s.identity.instance),
        };
        publish_raw(s, &status_request_key(), req.to_payload())?;
        let deadline = Instant::now() + timeout;
        let mut replies = s.status.lock().unwrap();
        loop {
            if let Some(r) = replies.remove(&request_id) {
                return Ok(r.result);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(DueError::Timeout("status reply"));
            }
            replies = s.status_cv.wait_timeout(replies, deadline - now).unwrap().0;
        }
    }

    /// Flushes, announces OFFLINE and shuts the session down. Idempotent.
    pub fn close(&self) {
        let s = &self.shared;
        if s.closed.load(Ordering::SeqCst) {
            return;
        }
        let _ = self.flush();
        if s.registered {
            if let Ok(seq) = send_heartbeat(s, HeartbeatStatus::Offline) {
                let _ = wait_acked(s, seq, current_generation(s), Duration::from_secs(2));
            }
        }
        self.teardown();
    }

    /// Drops every connection without flushing or saying goodbye, as a
    /// crashed process would.
    pub fn abort(&self) {
        if self.shared.closed.load(Ordering::SeqCst) {
            return;
        }
        self.shared.out.lock().unwrap().updates.clear();
        self.teardown();
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    fn teardown(&self) {
        let s = &self.shared;
        if s.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        // a fresh sender with no receiver stops the control loop
        *s.ctl.lock().unwrap() = mpsc::channel().0;
        s.archive_tx.lock().unwrap().take();
        if let Some(link) = s.tx.lock().unwrap().link.take() {
            link.shutdown();
        }
        if let Some((link, _)) = s.query.lock().unwrap().take() {
            link.shutdown();
        }
        s.replies_cv.notify_all();
        s.archive_cv.notify_all();
        let threads: Vec<_> = s.threads.lock().unwrap().drain(..).collect();
        let me = thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
    }

    /// Publishes on the bus without pacing, batching or archiving. Reserved
    /// keys are allowed; used for the registration protocol and by the
    /// coordinator.
    pub(crate) fn publish_raw(&self, key: &DataKey, value: Vec<u8>) -> Result<u64, DueError> {
        publish_raw(&self.shared, key, value)
    }

    /// Appends records to the archive through the archive thread.
    pub(crate) fn archive_raw(&self, key: &DataKey, value: Vec<u8>) {
        let s = &self.shared;
        let mut out = s.out.lock().unwrap();
        out.archive.push(ArchiveEntry {
            key: key.clone(),
            value,
            seq: 0,
            timestamp_us: unix_us(),
        });
        flush_archive(s, &mut out);
    }

    /// Subscribes with a callback that runs on the bus reader thread; it
    /// must not block.
    pub(crate) fn subscribe_internal(
        &self,
        pattern: KeyPattern,
        route: Route,
        on_resubscribe: Option<Arc<dyn Fn() + Send + Sync>>,
    ) -> Result<u64, DueError> {
        let s = &self.shared;
        let id = s.next_wanted.fetch_add(1, Ordering::Relaxed);
        let sub_id = send_sub(s, &pattern, route.clone())?;
        s.wanted.lock().unwrap().push(Wanted {
            id,
            pattern,
            route,
            on_resubscribe,
            sub_id: Some(sub_id),
        });
        Ok(id)
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        if let Some(link) = self.tx.get_mut().map(|t| t.link.take()).ok().flatten() {
            link.shutdown();
        }
        if let Some((link, _)) = self.query.get_mut().ok().and_then(|q| q.take()) {
            link.shutdown();
        }
    }
}

impl Shared {
    fn max_frame(&self) -> u32 {
        self.tx
            .lock()
            .unwrap()
            .link
            .as_ref()
            .map(|l| l.max_frame)
            .unwrap_or(sdnator_core::wire::DEFAULT_MAX_FRAME)
    }
}

fn install(s: &Shared, epoch: u64, active: bool, set: &AssignmentSet) {
    let mut a = s.assigned.lock().unwrap();
    if epoch < a.epoch {
        return;
    }
    a.epoch = epoch;
    a.active = active;
    if active {
        a.pacer.apply(set);
    } else {
        a.pacer.clear();
    }
}

fn current_generation(s: &Shared) -> u64 {
    s.tx.lock().unwrap().generation
}

fn send_registration(s: &Shared) -> Result<(), DueError> {
    let req = RegisterRequest {
        identity: s.identity.clone(),
        manifest: s.manifest.clone(),
        reply_key: register_reply_key(s.identity.instance),
    };
    publish_raw(s, &register_request_key(), req.to_payload()).map(|_| ())
}

fn send_heartbeat(s: &Shared, status: HeartbeatStatus) -> Result<u64, DueError> {
    let hb = Heartbeat {
        status,
        uptime_us: s.started.elapsed().as_micros() as u64,
        writes: s.stats.writes.load(Ordering::Relaxed),
        paced: s.stats.paced.load(Ordering::Relaxed),
        delivered: s.stats.delivered.load(Ordering::Relaxed),
    };
    publish_raw(s, &heartbeat_key(&s.identity.app_id, s.identity.instance), hb.to_payload())
}

/// Sends one PUB_BATCH; returns its last sequence number.
fn send_batch(s: &Shared, items: Vec<(DataKey, Vec<u8>)>) -> Result<(u64, u64), DueError> {
    let mut tx = s.tx.lock().unwrap();
    let Some(link) = &tx.link else {
        return Err(if s.closed.load(Ordering::Relaxed) {
            DueError::Closed
        } else {
            DueError::Disconnected
        });
    };
    let first = tx.next_seq;
    let envs: Vec<PubEnvelope> = items
        .into_iter()
        .enumerate()
        .map(|(i, (key, value))| PubEnvelope {
            key,
            value,
            seq: first + i as u64,
        })
        .collect();
    let last = first + envs.len() as u64 - 1;
    link.send(Frame::PubBatch(envs).to_bytes()).map_err(|e| DueError::Transport(e.into()))?;
    tx.next_seq = last + 1;
    tx.expect.push_back(Expect::Pub(last));
    Ok((last, tx.generation))
}

fn publish_raw(s: &Shared, key: &DataKey, value: Vec<u8>) -> Result<u64, DueError> {
    send_batch(s, vec![(key.clone(), value)]).map(|(seq, _)| seq)
}

fn wait_acked(s: &Shared, seq: u64, generation: u64, timeout: Duration) -> Result<(), DueError> {
    let deadline = Instant::now() + timeout;
    let mut r = s.replies.lock().unwrap();
    loop {
        if let Some((failed, code, message)) = &r.failed {
            if *failed <= seq && r.generation == generation {
                let e = DueError::Server {
                    code: *code,
                    message: message.clone(),
                };
                r.failed = None;
                return Err(e);
            }
        }
        if r.generation != generation {
            return Err(DueError::Disconnected);
        }
        if r.acked >= seq {
            return Ok(());
        }
        if s.closed.load(Ordering::Relaxed) {
            return Err(DueError::Closed);
        }
        let now = Instant::now();
        if now >= deadline {
            return Err(DueError::Timeout("bus ack"));
        }
        r = s.replies_cv.wait_timeout(r, (deadline - now).min(Duration::from_millis(200))).unwrap().0;
    }
}

fn flush_updates(s: &Shared, out: &mut Outbox) -> Result<(), DueError> {
    if out.updates.is_empty() {
        return Ok(());
    }
    let items = std::mem::take(&mut out.updates);
    let (last, generation) = send_batch(s, items)?;
    wait_acked(s, last, generation, Duration::from_secs(30))
}

fn flush_archive(s: &Shared, out: &mut Outbox) {
    if out.archive.is_empty() {
        return;
    }
    let batch = std::mem::take(&mut out.archive);
    let tx = s.archive_tx.lock().unwrap().clone();
    let Some(tx) = tx else { return };
    s.archive_progress.lock().unwrap().queued += 1;
    if tx.send(batch).is_err() {
        let mut p = s.archive_progress.lock().unwrap();
        p.done += 1;
        s.archive_cv.notify_all();
    }
}

fn send_sub(s: &Shared, pattern: &KeyPattern, route: Route) -> Result<u64, DueError> {
    let (done_tx, done_rx) = mpsc::channel();
    {
        let mut tx = s.tx.lock().unwrap();
        let Some(link) = &tx.link else {
            return Err(DueError::Disconnected);
        };
        link.send_frame(&Frame::Sub {
            pattern: pattern.clone(),
        })
        .map_err(|e| DueError::Transport(e.into()))?;
        tx.expect.push_back(Expect::Sub { route, done: done_tx });
    }
    match done_rx.recv_timeout(Duration::from_secs(10)) {
        Ok(r) => r,
        Err(RecvTimeoutError::Timeout) => Err(DueError::Timeout("subscription ack")),
        Err(RecvTimeoutError::Disconnected) => Err(DueError::Disconnected),
    }
}

fn send_unsub(s: &Shared, sub_id: u64) {
    let mut tx = s.tx.lock().unwrap();
    if let Some(link) = &tx.link {
        if link.send_frame(&Frame::Unsub { sub_id }).is_ok() {
            tx.expect.push_back(Expect::Unsub);
        }
    }
}

/// Opens the bus connection and its reader thread.
fn connect_bus(s: &Arc<Shared>) -> Result<(), DueError> {
    let cfg = &s.cfg;
    let (link, reader) = Link::connect(
        cfg.bus_addr.as_str(),
        &s.identity.app_id,
        s.identity.instance,
        s.identity.roles,
        cfg.link,
        cfg.connect_timeout,
    )
    .map_err(|e| match e {
        TransportError::Io(io) => DueError::BackendUnreachable {
            addr: cfg.bus_addr.clone(),
            reason: io.to_string(),
        },
        other => DueError::Transport(other),
    })?;
    let latency = link.latency();
    let generation = {
        let mut tx = s.tx.lock().unwrap();
        tx.link = Some(link);
        tx.expect.clear();
        tx.generation
    };
    let handle_shared = Arc::downgrade(s);
    let close_shared = Arc::downgrade(s);
    spawn_reader(
        "due-bus-read",
        reader,
        latency,
        move |frame| {
            if let Some(s) = handle_shared.upgrade() {
                on_frame(&s, frame);
            }
        },
        move |_| {
            if let Some(s) = close_shared.upgrade() {
                on_bus_closed(&s, generation);
            }
        },
    );
    Ok(())
}

fn on_frame(s: &Shared, frame: Frame) {
    match frame {
        Frame::Deliver { sub_id, envelope } => {
            let route = s.routes.read().unwrap().get(&sub_id).cloned();
            if let Some(route) = route {
                route(envelope);
            }
        }
        Frame::Ack { last_seq, .. } => {
            let front = s.tx.lock().unwrap().expect.pop_front();
            if let Some(Expect::Pub(seq)) = front {
                let mut r = s.replies.lock().unwrap();
                r.acked = r.acked.max(seq.min(last_seq));
                s.replies_cv.notify_all();
            }
        }
        Frame::SubAck { sub_id } => {
            let front = s.tx.lock().unwrap().expect.pop_front();
            if let Some(Expect::Sub { route, done }) = front {
                s.routes.write().unwrap().insert(sub_id, route);
                let _ = done.send(Ok(sub_id));
            }
        }
        Frame::Err { code, message } => {
            let front = s.tx.lock().unwrap().expect.pop_front();
            match front {
                Some(Expect::Pub(seq)) => {
                    let mut r = s.replies.lock().unwrap();
                    r.failed = Some((seq, code, message));
                    s.replies_cv.notify_all();
                }
                Some(Expect::Sub { done, .. }) => {
                    let _ = done.send(Err(DueError::Server { code, message }));
                }
                _ => {}
            }
        }
        _ => {}
    }
}

fn on_bus_closed(s: &Shared, generation: u64) {
    let mut tx = s.tx.lock().unwrap();
    if tx.generation != generation {
        return;
    }
    tx.generation += 1;
    tx.link = None;
    tx.expect.clear();
    drop(tx);
    s.routes.write().unwrap().clear();
    {
        let mut r = s.replies.lock().unwrap();
        r.generation = generation + 1;
        s.replies_cv.notify_all();
    }
    if !s.closed.load(Ordering::SeqCst) {
        let _ = s.ctl.lock().unwrap().send(Ctl::Reconnect(generation + 1));
    }
}

/// Re-establishes the bus connection with exponential backoff, then every
/// wanted subscription and the registration.
fn reconnect(s: &Arc<Shared>) {
    let mut backoff = Duration::from_millis(100);
    loop {
        if s.closed.load(Ordering::SeqCst) {
            return;
        }
        if connect_bus(s).is_ok() {
            break;
        }
        thread::sleep(backoff);
        backoff = (backoff * 2).min(Duration::from_secs(5));
    }
    s.stats.reconnects.fetch_add(1, Ordering::Relaxed);
    let wanted: Vec<(u64, KeyPattern, Route)> = s
        .wanted
        .lock()
        .unwrap()
        .iter()
        .map(|w| (w.id, w.pattern.clone(), w.route.clone()))
        .collect();
    for (id, pattern, route) in wanted {
        let Ok(sub_id) = send_sub(s, &pattern, route) else { return };
        let mut all = s.wanted.lock().unwrap();
        if let Some(w) = all.iter_mut().find(|w| w.id == id) {
            w.sub_id = Some(sub_id);
            if let Some(cb) = &w.on_resubscribe {
                cb();
            }
        }
    }
    if s.registered {
        let _ = send_registration(s);
        let _ = send_heartbeat(s, HeartbeatStatus::Online);
    }
}

fn control_loop(weak: Weak<Shared>, rx: Receiver<Ctl>) {
    let Some(s) = weak.upgrade() else { return };
    let interval = s.cfg.heartbeat_interval;
    let linger = s.cfg.linger;
    let heartbeats = s.registered;
    drop(s);
    let mut next_beat = Instant::now() + interval;
    loop {
        let now = Instant::now();
        let mut wake = next_beat;
        if let Some(s) = weak.upgrade() {
            if let Some(since) = s.out.lock().unwrap().since {
                wake = wake.min(since + linger);
            }
        }
        let msg = rx.recv_timeout(wake.saturating_duration_since(now));
        let Some(s) = weak.upgrade() else { return };
        if s.closed.load(Ordering::SeqCst) {
            return;
        }
        match msg {
            Ok(Ctl::Wake) | Err(RecvTimeoutError::Timeout) => {}
            Ok(Ctl::Reregister) => {
                let _ = send_registration(&s);
            }
            Ok(Ctl::Reconnect(generation)) => {
                if current_generation(&s) == generation && s.tx.lock().unwrap().link.is_none() {
                    reconnect(&s);
                }
            }
            Err(RecvTimeoutError::Disconnected) => return,
        }
        {
            let mut out = s.out.lock().unwrap();
            if out.since.is_some_and(|t| t.elapsed() >= linger) {
                let _ = flush_updates(&s, &mut out);
                flush_archive(&s, &mut out);
                out.since = None;
            }
        }
        if Instant::now() >= next_beat {
            if heartbeats {
                let status = if s.active_since_tick.swap(false, Ordering::Relaxed) {
                    HeartbeatStatus::Online
                } else {
                    HeartbeatStatus::Idle
                };
                let _ = send_heartbeat(&s, status);
            }
            next_beat += interval;
            if next_beat < Instant::now() {
                next_beat = Instant::now() + interval;
            }
        }
    }
}

fn connect_archive(s: &Shared, addr: &str) -> Result<(Link, FrameReader<TcpStream>), DueError> {
    Link::connect(
        addr,
        &s.identity.app_id,
        s.identity.instance,
        s.identity.roles,
        s.cfg.link,
        s.cfg.connect_timeout,
    )
    .map_err(|e| match e {
        TransportError::Io(io) => DueError::BackendUnreachable {
            addr: addr.to_string(),
            reason: io.to_string(),
        },
        other => DueError::Transport(other),
    })
}

/// Sends archive batches one at a time, each waiting for its ack. While the
/// archive cannot be reached, batches are counted and dropped.
fn archive_loop(s: Arc<Shared>, addr: String, rx: Receiver<Vec<ArchiveEntry>>) {
    let weak = Arc::downgrade(&s);
    drop(s);
    let mut conn: Option<(Link, FrameReader<TcpStream>)> = None;
    let mut retry_at = Instant::now();
    let mut backoff = Duration::from_millis(100);
    let mut seq = 0u64;
    while let Ok(mut batch) = rx.recv() {
        let Some(s) = weak.upgrade() else { return };
        if conn.is_none() && Instant::now() >= retry_at {
            match connect_archive(&s, &addr) {
                Ok(c) => {
                    conn = Some(c);
                    backoff = Duration::from_millis(100);
                }
                Err(_) => {
                    retry_at = Instant::now() + backoff;
                    backoff = (backoff * 2).min(Duration::from_secs(5));
                }
            }
        }
        let mut ok = false;
        if let Some((link, reader)) = conn.as_mut() {
            for e in batch.iter_mut() {
                seq += 1;
                e.seq = seq;
            }
            if link.send(Frame::ArchiveBatch(batch).to_bytes()).is_ok() {
                ok = loop {
                    match reader.read_frame() {
                        Ok(Some(Frame::Ack { .. })) => break true,
                        Ok(Some(Frame::Err { .. })) => break false,
                        Ok(Some(_)) => continue,
                        _ => {
                            conn = None;
                            break false;
                        }
                    }
                };
                if let Some((link, _)) = &conn {
                    if !link.latency().is_zero() {
                        thread::sleep(link.latency());
                    }
                }
            } else {
                conn = None;
            }
        }
        if !ok {
            s.stats.archive_dropped.fetch_add(1, Ordering::Relaxed);
        }
        let mut p = s.archive_progress.lock().unwrap();
        p.done += 1;
        s.archive_cv.notify_all();
    }
}

pub enum ObserverEvent {
    Data(Envelope),
    /// The subscription was re-established after a reconnect; deliveries
    /// published in between may be missing.
    Resubscribed,
}

struct ObserverQueue {
    events: VecDeque<ObserverEvent>,
    closed: bool,
}

type DataCallback = Box<dyn FnMut(&Envelope) + Send>;
type ResubCallback = Box<dyn FnMut() + Send>;

struct ObserverInner {
    queue: Mutex<ObserverQueue>,
    ready: Condvar,
    space: Condvar,
    data_cbs: Mutex<Vec<DataCallback>>,
    resub_cbs: Mutex<Vec<ResubCallback>>,
    capacity: usize,
    overflow: ObserverOverflow,
    dropped: AtomicU64,
    received: AtomicU64,
}

impl ObserverInner {
    fn push(&self, ev: ObserverEvent) {
        let mut q = self.queue.lock().unwrap();
        if q.closed {
            return;
        }
        if let ObserverEvent::Data(_) = ev {
            self.received.fetch_add(1, Ordering::Relaxed);
        }
        while q.events.len() >= self.capacity {
            match self.overflow {
                ObserverOverflow::DropOldest => {
                    q.events.pop_front();
                    self.dropped.fetch_add(1, Ordering::Relaxed);
                }
                ObserverOverflow::Block => {
                    q = self.space.wait(q).unwrap();
                    if q.closed {
                        return;
                    }
                }
            }
        }
        q.events.push_back(ev);
        // the dispatcher only waits on an empty queue or before a callback exists
        if q.events.len() == 1 {
            self.ready.notify_one();
        }
    }

    fn dispatch(&self) {
        loop {
            let batch = {
                let mut q = self.queue.lock().unwrap();
                loop {
                    if q.closed {
                        return;
                    }
                    let has_cb = !self.data_cbs.lock().unwrap().is_empty();
                    if has_cb && !q.events.is_empty() {
                        if q.events.len() >= self.capacity {
                            self.space.notify_all();
                        }
                        break std::mem::take(&mut q.events);
                    }
                    q = self.ready.wait(q).unwrap();
                }
            };
            let mut data_cbs = self.data_cbs.lock().unwrap();
            for ev in batch {
                match ev {
                    ObserverEvent::Data(env) => {
                        for cb in data_cbs.iter_mut() {
                            cb(&env);
                        }
                    }
                    ObserverEvent::Resubscribed => {
                        for cb in self.resub_cbs.lock().unwrap().iter_mut() {
                            cb();
                        }
                    }
                }
            }
        }
    }
}

/// A subscription with callbacks. Dropping it unsubscribes.
pub struct Observer {
    inner: Arc<ObserverInner>,
    session: Weak<Shared>,
    wanted_id: u64,
    pattern: KeyPattern,
    dispatch: Option<thread::JoinHandle<()>>,
}

impl Observer {
    /// Adds a callback run for every delivery, in delivery order, on the
    /// observer's dispatch thread.
    pub fn on_data(&self, cb: impl FnMut(&Envelope) + Send + 'static) -> &Self {
        self.inner.data_cbs.lock().unwrap().push(Box::new(cb));
        let _q = self.inner.queue.lock().unwrap();
        self.inner.ready.notify_all();
        self
    }

    pub fn on_resubscribed(&self, cb: impl FnMut() + Send + 'static) -> &Self {
        self.inner.resub_cbs.lock().unwrap().push(Box::new(cb));
        self
    }

    pub fn pattern(&self) -> &KeyPattern {
        &self.pattern
    }

    /// Deliveries discarded because the callbacks fell behind.
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    pub fn received(&self) -> u64 {
        self.inner.received.load(Ordering::Relaxed)
    }

    pub fn close(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(s) = self.session.upgrade() {
            let removed = {
                let mut wanted = s.wanted.lock().unwrap();
                let pos = wanted.iter().position(|w| w.id == self.wanted_id);
                pos.map(|p| wanted.remove(p))
            };
            if let Some(Wanted { sub_id: Some(id), .. }) = removed {
                send_unsub(&s, id);
                s.routes.write().unwrap().remove(&id);
            }
        }
        {
            let mut q = self.inner.queue.lock().unwrap();
            q.closed = true;
            self.inner.ready.notify_all();
            self.inner.space.notify_all();
        }
        if let Some(t) = self.dispatch.take() {
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for Observer {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(DueConfig::default().validate().is_ok());
        let bad = DueConfig {
            updates_batch: 0,
            ..DueConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DueError::BadConfig(m)) if m.contains("updates_batch")));
        let bad = DueConfig {
            linger: Duration::ZERO,
            ..DueConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn observer_queue_drops_oldest() {
        let inner = ObserverInner {
            queue: Mutex::new(ObserverQueue {
                events: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
            space: Condvar::new(),
            data_cbs: Mutex::new(Vec::new()),
            resub_cbs: Mutex::new(Vec::new()),
            capacity: 2,
            overflow: ObserverOverflow::DropOldest,
            dropped: AtomicU64::new(0),
            received: AtomicU64::new(0),
        };
        for seq in 0..5 {
            inner.push(ObserverEvent::Data(Envelope {
                key: DataKey::parse("a.b").unwrap(),
                value: vec![],
                seq,
                producer_app: "p".into(),
                producer_instance: InstanceId(1),
            }));
        }
        assert_eq!(inner.dropped.load(Ordering::Relaxed), 3);
        let q = inner.queue.lock().unwrap();
        let seqs: Vec<u64> = q
            .events
            .iter()
            .map(|e| match e {
                ObserverEvent::Data(env) => env.seq,
                ObserverEvent::Resubscribed => 0,
            })
            .collect();
        assert_eq!(seqs, vec![3, 4]);
    }

    #[test]
    fn instance_ids_are_distinct() {
        assert_ne!(new_instance_id(), new_instance_id());
    }
}
