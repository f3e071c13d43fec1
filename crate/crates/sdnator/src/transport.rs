//! Framed TCP transport with optional injected one-way latency.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use sdnator_core::manifest::{AppId, InstanceId, Roles};
use sdnator_core::wire::{decode_from_buffer, ErrorCode, Frame, WireError, LEN_PREFIX, PROTOCOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server refused: {message} (code {})", code.0)]
    Refused { code: ErrorCode, message: String },
    #[error("unexpected {0:?} frame during handshake")]
    Handshake(sdnator_core::wire::FrameType),
    #[error("connection closed")]
    Closed,
}

/// Reads whole frames off a byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
    start: usize,
    end: usize,
    max_frame: u32,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R, max_frame: u32) -> Self {
        Self {
            inner,
            buf: vec![0; 64 * 1024],
            start: 0,
            end: 0,
            max_frame,
        }
    }

    /// Next frame, or `None` on a clean end of stream between frames.
    pub fn read_frame(&mut self) -> Result<Option<Frame>, TransportError> {
        loop {
            if let Some((frame, used)) = decode_from_buffer(&self.buf[self.start..self.end], self.max_frame)? {
                self.start += used;
                if self.start == self.end {
                    self.start = 0;
                    self.end = 0;
                }
                return Ok(Some(frame));
            }
            let pending = self.end - self.start;
            let need = if pending >= LEN_PREFIX {
                let len = u32::from_le_bytes(self.buf[self.start..self.start + LEN_PREFIX].try_into().unwrap());
                LEN_PREFIX + len as usize
            } else {
                LEN_PREFIX
            };
            if self.start > 0 && self.start + need > self.buf.len() {
                self.buf.copy_within(self.start..self.end, 0);
                self.start = 0;
                self.end = pending;
            }
            if need > self.buf.len() {
                self.buf.resize(need.next_power_of_two(), 0);
            }
            let n = match self.inner.read(&mut self.buf[self.end..]) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return if pending == 0 {
                    Ok(None)
                } else {
                    Err(TransportError::Io(io::ErrorKind::UnexpectedEof.into()))
                };
            }
            self.end += n;
        }
    }
}

/// Holds every item back by a fixed delay, preserving order. Used on both
/// directions of a client link to emulate a long network path.
struct DelayLine<T> {
    tx: mpsc::Sender<(Instant, T)>,
}

impl<T: Send + 'static> DelayLine<T> {
    fn spawn(name: &str, mut sink: impl FnMut(Vec<T>) -> bool + Send + 'static) -> Self {
        let (tx, rx) = mpsc::channel::<(Instant, T)>();
        thread::Builder::new()
            .name(name.into())
            .spawn(move || {
                while let Ok((due, item)) = rx.recv() {
                    let now = Instant::now();
                    if due > now {
                        thread::sleep(due - now);
                    }
                    let mut ready = vec![item];
                    let now = Instant::now();
                    // take whatever else is already due, keeping order
                    while let Ok((due, item)) = rx.try_recv() {
                        if due > now {
                            if !sink(std::mem::take(&mut ready)) {
                                return;
                            }
                            let wait = due.saturating_duration_since(Instant::now());
                            thread::sleep(wait);
                        }
                        ready.push(item);
                    }
                    if !sink(ready) {
                        return;
                    }
                }
            })
            .expect("spawn delay thread");
        Self { tx }
    }
}

/// Shape of an emulated network path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkShape {
    /// Added to every frame in each direction.
    pub one_way_latency: Duration,
}

enum Outbound {
    Direct(Mutex<TcpStream>),
    Delayed { delay: Duration, line: Mutex<DelayLine<Vec<u8>>> },
}

/// Client end of a framed connection after a successful HELLO.
pub struct Link {
    out: Outbound,
    stream: TcpStream,
    pub max_frame: u32,
}

impl Link {
    /// Connects, performs the HELLO exchange and returns the link plus the
    /// reader for the inbound half.
    pub fn connect(
        addr: impl ToSocketAddrs,
        app_id: &AppId,
        instance: InstanceId,
        roles: Roles,
        shape: LinkShape,
        timeout: Duration,
    ) -> Result<(Link, FrameReader<TcpStream>), TransportError> {
        let mut last = None;
        let mut stream = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let mut stream = match stream {
            Some(s) => s,
            None => return Err(last.unwrap_or_else(|| io::ErrorKind::AddrNotAvailable.into()).into()),
        };
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        let hello = Frame::Hello {
            version: PROTOCOL_VERSION,
            app_id: app_id.clone(),
            instance,
            roles,
        };
        if !shape.one_way_latency.is_zero() {
            thread::sleep(shape.one_way_latency);
        }
        stream.write_all(&hello.to_bytes())?;
        let mut reader = FrameReader::new(stream.try_clone()?, sdnator_core::wire::DEFAULT_MAX_FRAME);
        let max_frame = match reader.read_frame()? {
            Some(Frame::HelloAck { max_frame, .. }) => max_frame,
            Some(Frame::Err { code, message }) => return Err(TransportError::Refused { code, message }),
            Some(other) => return Err(TransportError::Handshake(other.frame_type())),
            None => return Err(TransportError::Closed),
        };
        if !shape.one_way_latency.is_zero() {
            thread::sleep(shape.one_way_latency);
        }
        stream.set_read_timeout(None)?;
        let out = if shape.one_way_latency.is_zero() {
            Outbound::Direct(Mutex::new(stream.try_clone()?))
        } else {
            let mut w = stream.try_clone()?;
            let line = DelayLine::spawn("link-out", move |chunks: Vec<Vec<u8>>| {
                let total: Vec<u8> = chunks.concat();
                w.write_all(&total).is_ok()
            });
            Outbound::Delayed {
                delay: shape.one_way_latency,
                line: Mutex::new(line),
            }
        };
        Ok((Link { out, stream, max_frame }, reader))
    }

    /// Sends already-encoded frames.
    pub fn send(&self, bytes: Vec<u8>) -> io::Result<()> {
        match &self.out {
            Outbound::Direct(s) => s.lock().unwrap().write_all(&bytes),
            Outbound::Delayed { delay, line } => line
                .lock()
                .unwrap()
                .tx
                .send((Instant::now() + *delay, bytes))
                .map_err(|_| io::ErrorKind::BrokenPipe.into()),
        }
    }

    pub fn send_frame(&self, frame: &Frame) -> io::Result<()> {
        self.send(frame.to_bytes())
    }

    pub fn latency(&self) -> Duration {
        match &self.out {
            Outbound::Direct(_) => Duration::ZERO,
            Outbound::Delayed { delay, .. } => *delay,
        }
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Runs `handle` for every inbound frame on a dedicated thread, after the
/// link's latency when one is set. `on_close` runs once the stream ends.
pub fn spawn_reader(
    name: &str,
    mut reader: FrameReader<TcpStream>,
    latency: Duration,
    mut handle: impl FnMut(Frame) + Send + 'static,
    on_close: impl FnOnce(Option<TransportError>) + Send + 'static,
) -> thread::JoinHandle<()> {
    if latency.is_zero() {
        return thread::Builder::new()
            .name(name.into())
            .spawn(move || {
                let err = loop {
                    match reader.read_frame() {
                        Ok(Some(f)) => handle(f),
                        Ok(None) => break None,
                        Err(e) => break Some(e),
                    }
                };
                on_close(err);
            })
            .expect("spawn reader");
    }
    // Frames and the close notice both pass through the delay line so the
    // close is seen only after every earlier frame.
    enum Item {
        Frame(Frame),
        Closed(Option<TransportError>),
    }
    let mut on_close = Some(on_close);
    let line = DelayLine::spawn("link-in", move |items: Vec<Item>| {
        for item in items {
            match item {
                Item::Frame(f) => handle(f),
                Item::Closed(e) => {
                    if let Some(c) = on_close.take() {
                        c(e);
                    }
                    return false;
                }
            }
        }
        true
    });
    thread::Builder::new()
        .name(name.into())
        .spawn(move || loop {
            let item = match reader.read_frame() {
                Ok(Some(f)) => Item::Frame(f),
                Ok(None) => Item::Closed(None),
                Err(e) => Item::Closed(Some(e)),
            };
            let last = matches!(item, Item::Closed(_));
            if line.tx.send((Instant::now() + latency, item)).is_err() || last {
                return;
            }
        })
        .expect("spawn reader")
}

/// Outbound frame queue drained by one writer thread, shared by the bus and
/// the store for their server-side connections.
pub struct OutQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
    space: Condvar,
    depth: usize,
}

struct QueueState {
    frames: VecDeque<(Vec<u8>, bool)>,
    droppable: usize,
    closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Push {
    Queued,
    /// One older droppable frame was discarded to make room.
    DroppedOldest,
    Full,
    Closed,
}

impl OutQueue {
    pub fn new(depth: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(QueueState {
                frames: VecDeque::new(),
                droppable: 0,
                closed: false,
            }),
            ready: Condvar::new(),
            space: Condvar::new(),
            depth: depth.max(1),
        })
    }

    /// Control frames: never dropped, never refused for space.
    pub fn push_control(&self, frame: Vec<u8>) -> Push {
        let mut s = self.state.lock().unwrap();
        if s.closed {
            return Push::Closed;
        }
        s.frames.push_back((frame, false));
        // the writer only waits on an empty queue
        if s.frames.len() == 1 {
            self.ready.notify_one();
        }
        Push::Queued
    }

    /// Data frames count against the depth. With `drop_oldest` the oldest
    /// queued data frame makes room; with `block` the caller waits up to that
    /// long for room.
    pub fn push_data(&self, frame: Vec<u8>, drop_oldest: bool, block: Option<Duration>) -> Push {
        let mut s = self.state.lock().unwrap();
        if s.closed {
            return Push::Closed;
        }
        let mut result = Push::Queued;
        if s.droppable >= self.depth {
            if drop_oldest {
                if let Some(pos) = s.frames.iter().position(|(_, d)| *d) {
                    s.frames.remove(pos);
                    s.droppable -= 1;
                }
                result = Push::DroppedOldest;
            } else if let Some(limit) = block {
                let deadline = Instant::now() + limit;
                while s.droppable >= self.depth && !s.closed {
                    let now = Instant::now();
                    if now >= deadline {
                        return Push::Full;
                    }
                    s = self.space.wait_timeout(s, deadline - now).unwrap().0;
                }
                if s.closed {
                    return Push::Closed;
                }
            } else {
                return Push::Full;
            }
        }
        s.frames.push_back((frame, true));
        s.droppable += 1;
        if s.frames.len() == 1 {
            self.ready.notify_one();
        }
        result
    }

    /// Waits for frames and returns all of them concatenated; `None` once
    /// closed and drained.
    pub fn take_all(&self, into: &mut Vec<u8>) -> bool {
        let mut s = self.state.lock().unwrap();
        while s.frames.is_empty() {
            if s.closed {
                return false;
            }
            s = self.ready.wait(s).unwrap();
        }
        into.clear();
        for (f, _) in s.frames.drain(..) {
            into.extend_from_slice(&f);
        }
        // pushers only wait on a full queue
        if s.droppable >= self.depth {
            self.space.notify_all();
        }
        s.droppable = 0;
        true
    }

    pub fn close(&self) {
        let mut s = self.state.lock().unwrap();
        s.closed = true;
        self.ready.notify_all();
        self.space.notify_all();
    }

    /// Stops accepting and discards anything queued.
    pub fn abort(&self) {
        let mut s = self.state.lock().unwrap();
        s.closed = true;
        s.frames.clear();
        s.droppable = 0;
        self.ready.notify_all();
        self.space.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }
}

/// Spawns the thread that drains `queue` into `stream`; closes the socket
/// when the queue is closed and empty or a write fails.
pub fn spawn_writer(name: String, queue: Arc<OutQueue>, mut stream: TcpStream) -> thread::JoinHandle<()> {
    thread::Builder::new()
        .name(name)
        .spawn(move || {
            let mut buf = Vec::with_capacity(64 * 1024);
            while queue.take_all(&mut buf) {
                if stream.write_all(&buf).is_err() {
                    queue.abort();
                    break;
                }
            }
            let _ = stream.shutdown(Shutdown::Both);
        })
        .expect("spawn writer")
}
