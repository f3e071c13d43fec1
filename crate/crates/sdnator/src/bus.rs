//! The updates bus: stateless publish/subscribe over framed TCP.
//!
//! Every connection gets a reader thread, which handles the connection's
//! inbound frames strictly in order, and a writer thread draining its
//! [`OutQueue`]. A publish is fanned out by the publisher's reader thread
//! straight into the subscribers' queues, so each producer's envelopes reach
//! every subscription in publish order.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use sdnator_core::key::{DataKey, KeyPattern};
use sdnator_core::manifest::{AppId, InstanceId};
use sdnator_core::payload::lost_key;
use sdnator_core::wire::{encode_deliver, ErrorCode, Frame, WireError, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};

use crate::error::ServiceError;
use crate::transport::{spawn_writer, FrameReader, OutQueue, Push, TransportError};

/// What happens when a subscriber's queue is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Drop the subscriber's connection.
    Disconnect,
    /// Discard the subscriber's oldest undelivered message.
    DropOldest,
    /// Hold the publisher until there is room, up to the given time, then disconnect.
    Block(Duration),
}

impl std::str::FromStr for OverflowPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "disconnect" => Ok(OverflowPolicy::Disconnect),
            "drop-oldest" => Ok(OverflowPolicy::DropOldest),
            "block" => Ok(OverflowPolicy::Block(Duration::from_secs(10))),
            _ => Err(format!("expected disconnect, drop-oldest or block, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BusConfig {
    pub listen: String,
    pub max_frame: u32,
    /// Undelivered messages held per subscriber connection.
    pub queue_depth: usize,
    pub overflow: OverflowPolicy,
    pub max_subscriptions: usize,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7401".into(),
            max_frame: DEFAULT_MAX_FRAME,
            queue_depth: 65_536,
            overflow: OverflowPolicy::Disconnect,
            max_subscriptions: 1024,
        }
    }
}

#[derive(Debug, Default)]
pub struct BusStats {
    pub published: AtomicU64,
    pub delivered: AtomicU64,
    /// Messages discarded by drop-oldest.
    pub dropped: AtomicU64,
    /// Subscribers disconnected for falling behind.
    pub evicted: AtomicU64,
    pub connections: AtomicU64,
}

#[derive(Clone)]
struct Sub {
    id: u64,
    conn: u64,
    queue: Arc<OutQueue>,
}

#[derive(Default)]
struct SubTable {
    /// Literal subscriptions by key base.
    exact: HashMap<String, Vec<Sub>>,
    wildcard: Vec<(KeyPattern, Sub)>,
    /// sub id -> (owning connection, pattern)
    owners: HashMap<u64, (u64, KeyPattern)>,
}

impl SubTable {
    fn insert(&mut self, pattern: KeyPattern, sub: Sub) {
        self.owners.insert(sub.id, (sub.conn, pattern.clone()));
        match pattern.literal_base() {
            Some(base) => self.exact.entry(base.to_string()).or_default().push(sub),
            None => self.wildcard.push((pattern, sub)),
        }
    }

    fn remove(&mut self, id: u64) -> bool {
        let Some((_, pattern)) = self.owners.remove(&id) else { return false };
        match pattern.literal_base() {
            Some(base) => {
                if let Some(v) = self.exact.get_mut(base) {
                    v.retain(|s| s.id != id);
                    if v.is_empty() {
                        self.exact.remove(base);
                    }
                }
            }
            None => self.wildcard.retain(|(_, s)| s.id != id),
        }
        true
    }

    fn remove_conn(&mut self, conn: u64) {
        let ids: Vec<u64> = self.owners.iter().filter(|(_, (c, _))| *c == conn).map(|(id, _)| *id).collect();
        for id in ids {
            self.remove(id);
        }
    }

    fn count_for(&self, conn: u64) -> usize {
        self.owners.values().filter(|(c, _)| *c == conn).count()
    }

    fn matching<'a>(&'a self, key: &'a DataKey) -> impl Iterator<Item = &'a Sub> + 'a {
        let exact = self.exact.get(key.base()).into_iter().flatten();
        let wild = self.wildcard.iter().filter(|(p, _)| p.matches(key)).map(|(_, s)| s);
        exact.chain(wild)
    }
}

struct Shared {
    cfg: BusConfig,
    subs: RwLock<SubTable>,
    next_sub: AtomicU64,
    next_conn: AtomicU64,
    /// Sequence for envelopes the bus itself emits.
    own_seq: AtomicU64,
    stats: BusStats,
    conns: Mutex<HashMap<u64, (TcpStream, Arc<OutQueue>)>>,
    stopping: AtomicBool,
}

/// Identity of the bus in envelopes it originates.
pub const BUS_APP: &str = "sdnator-bus";

pub struct BusServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<thread::JoinHandle<()>>,
}

impl BusServer {
    pub fn start(cfg: BusConfig) -> Result<Self, ServiceError> {
        let listener = bind(&cfg.listen)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            cfg,
            subs: RwLock::new(SubTable::default()),
            next_sub: AtomicU64::new(1),
            next_conn: AtomicU64::new(1),
            own_seq: AtomicU64::new(0),
            stats: BusStats::default(),
            conns: Mutex::new(HashMap::new()),
            stopping: AtomicBool::new(false),
        });
        let s = shared.clone();
        let accept = thread::Builder::new()
            .name("bus-accept".into())
            .spawn(move || accept_loop(listener, s))?;
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &BusStats {
        &self.shared.stats
    }

    pub fn subscription_count(&self) -> usize {
        self.shared.subs.read().unwrap().owners.len()
    }

    /// Stops accepting and closes every connection.
    pub fn shutdown(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        for (_, (stream, queue)) in self.shared.conns.lock().unwrap().drain() {
            queue.abort();
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Drop for BusServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub(crate) fn bind(addr: &str) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).map_err(|e| {
        if e.kind() == io::ErrorKind::AddrInUse {
            ServiceError::PortInUse(addr.to_string())
        } else {
            ServiceError::Io(e)
        }
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        let s = shared.clone();
        let _ = thread::Builder::new()
            .name(format!("bus-conn-{id}"))
            .spawn(move || serve(id, stream, s));
    }
}

fn err_frame(code: ErrorCode, message: impl Into<String>) -> Vec<u8> {
    Frame::Err {
        code,
        message: message.into(),
    }
    .to_bytes()
}

fn serve(conn: u64, stream: TcpStream, shared: Arc<Shared>) {
    let queue = OutQueue::new(shared.cfg.queue_depth);
    let (Ok(w), Ok(r), Ok(keep)) = (stream.try_clone(), stream.try_clone(), stream.try_clone()) else {
        return;
    };
    shared.conns.lock().unwrap().insert(conn, (keep, queue.clone()));
    shared.stats.connections.fetch_add(1, Ordering::Relaxed);
    let writer = spawn_writer(format!("bus-write-{conn}"), queue.clone(), w);
    let mut reader = FrameReader::new(r, shared.cfg.max_frame);

    let mut identity: Option<(AppId, InstanceId)> = None;
    let mut last_seq: Option<u64> = None;
    loop {
        let frame = match reader.read_frame() {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(TransportError::Wire(WireError::FrameTooLarge { len, max })) => {
                queue.push_control(err_frame(ErrorCode::FRAME_TOO_LARGE, format!("frame of {len} bytes exceeds {max}")));
                break;
            }
            Err(TransportError::Wire(e)) => {
                let code = match e {
                    WireError::Key(_) => ErrorCode::MALFORMED_KEY,
                    _ => ErrorCode::MALFORMED_FRAME,
                };
                queue.push_control(err_frame(code, e.to_string()));
                break;
            }
            Err(_) => break,
        };
        let Some((app, instance)) = &identity else {
            match frame {
                Frame::Hello {
                    version,
                    app_id,
                    instance,
                    ..
                } => {
                    if version != PROTOCOL_VERSION {
                        queue.push_control(err_frame(
                            ErrorCode::VERSION_MISMATCH,
                            format!("protocol {version} unsupported, server speaks {PROTOCOL_VERSION}"),
                        ));
                        break;
                    }
                    identity = Some((app_id, instance));
                    queue.push_control(
                        Frame::HelloAck {
                            version: PROTOCOL_VERSION,
                            max_frame: shared.cfg.max_frame,
                        }
                        .to_bytes(),
                    );
                }
                _ => {
                    queue.push_control(err_frame(ErrorCode::NOT_AUTHENTICATED, "HELLO required first"));
                    break;
                }
            }
            continue;
        };
        match frame {
            Frame::PubBatch(envs) => {
                if envs.is_empty() {
                    queue.push_control(err_frame(ErrorCode::EMPTY_BATCH, "empty batch"));
                    continue;
                }
                let mut expected = last_seq.map(|s| s + 1);
                if let Some(bad) = envs.iter().find_map(|e| {
                    let gap = expected.is_some_and(|x| x != e.seq);
                    expected = Some(e.seq + 1);
                    gap.then_some(e.seq)
                }) {
                    queue.push_control(err_frame(
                        ErrorCode::SEQUENCE_GAP,
                        format!("sequence gap at {bad} after {}", last_seq.unwrap_or(0)),
                    ));
                    break;
                }
                let count = envs.len() as u32;
                let last = envs.last().map(|e| e.seq).unwrap_or(0);
                {
                    let table = shared.subs.read().unwrap();
                    for env in &envs {
                        fan_out(&shared, &table, &env.key, &env.value, env.seq, app.as_str(), *instance);
                    }
                }
                shared.stats.published.fetch_add(count as u64, Ordering::Relaxed);
                last_seq = Some(last);
                queue.push_control(Frame::Ack { last_seq: last, count }.to_bytes());
            }
            Frame::Sub { pattern } => {
                let mut table = shared.subs.write().unwrap();
                if table.count_for(conn) >= shared.cfg.max_subscriptions {
                    drop(table);
                    queue.push_control(err_frame(
                        ErrorCode::TOO_MANY_SUBSCRIPTIONS,
                        format!("at most {} subscriptions per connection", shared.cfg.max_subscriptions),
                    ));
                    continue;
                }
                let id = shared.next_sub.fetch_add(1, Ordering::Relaxed);
                table.insert(
                    pattern,
                    Sub {
                        id,
                        conn,
                        queue: queue.clone(),
                    },
                );
                // queued under the lock: no delivery for this id can precede its SUB_ACK
                queue.push_control(Frame::SubAck { sub_id: id }.to_bytes());
            }
            Frame::Unsub { sub_id } => {
                let mut table = shared.subs.write().unwrap();
                let owned = table.owners.get(&sub_id).is_some_and(|(c, _)| *c == conn);
                if owned {
                    table.remove(sub_id);
                    queue.push_control(Frame::Ack { last_seq: sub_id, count: 1 }.to_bytes());
                } else {
                    queue.push_control(err_frame(ErrorCode::UNKNOWN_SUBSCRIPTION, format!("no subscription {sub_id}")));
                }
            }
            Frame::Ping(n) => {
                queue.push_control(Frame::Pong(n).to_bytes());
            }
            Frame::Pong(_) => {}
            Frame::Hello { .. } => {
                queue.push_control(err_frame(ErrorCode::MALFORMED_FRAME, "duplicate HELLO"));
                break;
            }
            other => {
                queue.push_control(err_frame(
                    ErrorCode::MALFORMED_FRAME,
                    format!("{:?} not accepted by the bus", other.frame_type()),
                ));
            }
        }
        if queue.is_closed() {
            break;
        }
    }

    shared.subs.write().unwrap().remove_conn(conn);
    shared.conns.lock().unwrap().remove(&conn);
    queue.close();
    let _ = writer.join();
    if let Some((app, instance)) = identity {
        if !shared.stopping.load(Ordering::SeqCst) && app.as_str() != BUS_APP {
            let key = lost_key(&app, instance);
            let seq = shared.own_seq.fetch_add(1, Ordering::Relaxed) + 1;
            let table = shared.subs.read().unwrap();
            fan_out(&shared, &table, &key, &[], seq, BUS_APP, InstanceId(0));
        }
    }
}

fn fan_out(
    shared: &Shared,
    table: &SubTable,
    key: &DataKey,
    value: &[u8],
    seq: u64,
    app: &str,
    instance: InstanceId,
) {
    for sub in table.matching(key) {
        let mut frame = Vec::with_capacity(64 + key.as_str().len() + value.len() + app.len());
        encode_deliver(&mut frame, sub.id, key.as_str(), value, seq, app, instance);
        let pushed = match shared.cfg.overflow {
            OverflowPolicy::Disconnect => sub.queue.push_data(frame, false, None),
            OverflowPolicy::DropOldest => sub.queue.push_data(frame, true, None),
            OverflowPolicy::Block(limit) => sub.queue.push_data(frame, false, Some(limit)),
        };
        match pushed {
            Push::Queued => {
                shared.stats.delivered.fetch_add(1, Ordering::Relaxed);
            }
            Push::DroppedOldest => {
                shared.stats.delivered.fetch_add(1, Ordering::Relaxed);
                shared.stats.dropped.fetch_add(1, Ordering::Relaxed);
            }
            Push::Full => {
                shared.stats.evicted.fetch_add(1, Ordering::Relaxed);
                sub.queue.push_control(err_frame(ErrorCode::BACKPRESSURE, "subscriber too slow"));
                sub.queue.close();
                if let Some((stream, _)) = shared.conns.lock().unwrap().get(&sub.conn) {
                    let _ = stream.shutdown(std::net::Shutdown::Read);
                }
            }
            Push::Closed => {}
        }
    }
}
