//! Raw archive client and a brute-force query oracle.

use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnator::transport::FrameReader;
use sdnator_core::archive::{ArchiveQuery, ArchiveRecord, TimeRange};
use sdnator_core::manifest::{AppId, InstanceId, Roles};
use sdnator_core::wire::{ArchiveEntry, Frame, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};
use sdnator_core::{DataKey, KeyPattern};

pub struct ArchiveClient {
    out: TcpStream,
    reader: FrameReader<TcpStream>,
    pub app: String,
    pub instance: InstanceId,
    seq: u64,
}

impl ArchiveClient {
    pub fn connect(addr: SocketAddr, app: &str, instance: u8) -> std::io::Result<Self> {
        let out = TcpStream::connect(addr)?;
        out.set_read_timeout(Some(Duration::from_secs(30)))?;
        let reader = FrameReader::new(out.try_clone()?, DEFAULT_MAX_FRAME);
        let mut c = Self {
            out,
            reader,
            app: app.into(),
            instance: InstanceId::from_bytes([instance; 16]),
            seq: 0,
        };
        c.send(&Frame::Hello {
            version: PROTOCOL_VERSION,
            app_id: AppId::new(app).unwrap(),
            instance: c.instance,
            roles: Roles::PRODUCER,
        })?;
        match c.recv()? {
            Frame::HelloAck { .. } => Ok(c),
            other => panic!("expected HELLO_ACK, got {other:?}"),
        }
    }

    fn send(&mut self, f: &Frame) -> std::io::Result<()> {
        self.out.write_all(&f.to_bytes())
    }

    fn recv(&mut self) -> std::io::Result<Frame> {
        match self.reader.read_frame() {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(std::io::ErrorKind::UnexpectedEof.into()),
            Err(e) => Err(std::io::Error::other(e.to_string())),
        }
    }

    /// Appends and waits for the ack; returns the acked count.
    pub fn append(&mut self, records: &[(DataKey, Vec<u8>, u64)]) -> std::io::Result<u32> {
        let entries = records
            .iter()
            .map(|(key, value, ts)| {
                self.seq += 1;
                ArchiveEntry {
                    key: key.clone(),
                    value: value.clone(),
                    seq: self.seq,
                    timestamp_us: *ts,
                }
            })
            .collect();
        self.send(&Frame::ArchiveBatch(entries))?;
        match self.recv()? {
            Frame::Ack { count, .. } => Ok(count),
            other => Err(std::io::Error::other(format!("expected ACK, got {other:?}"))),
        }
    }

    pub fn query(&mut self, q: &ArchiveQuery) -> std::io::Result<Vec<ArchiveRecord>> {
        self.send(&Frame::Query(q.clone()))?;
        let mut out = Vec::new();
        loop {
            match self.recv()? {
                Frame::QueryResult { done, records } => {
                    out.extend(records);
                    if done {
                        return Ok(out);
                    }
                }
                other => return Err(std::io::Error::other(format!("expected QUERY_RESULT, got {other:?}"))),
            }
        }
    }

    pub fn set_index(&mut self, key: &DataKey, enabled: bool) -> std::io::Result<()> {
        self.send(&Frame::SetIndex {
            key: key.clone(),
            enabled,
        })?;
        match self.recv()? {
            Frame::Ack { .. } => Ok(()),
            other => Err(std::io::Error::other(format!("expected ACK, got {other:?}"))),
        }
    }
}

pub const PRODUCERS: [&str; 3] = ["prod-a", "prod-b", "prod-c"];

/// One randomly generated record with the producer that sends it.
pub fn random_record(rng: &mut impl Rng) -> (usize, DataKey, Vec<u8>, u64) {
    let app = rng.gen_range(0..4);
    let dev = rng.gen_range(0..3);
    let metric = ["temp", "load", "rate"][rng.gen_range(0..3)];
    let spec = match rng.gen_range(0..4) {
        0 => ":unit=c",
        1 => ":unit=f",
        _ => "",
    };
    let key = DataKey::parse(&format!("app{app}.dev{dev}.{metric}{spec}")).unwrap();
    let len = rng.gen_range(0..24);
    let value: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
    // A narrow time span so ties are common.
    let ts = rng.gen_range(1..=20_000);
    (rng.gen_range(0..PRODUCERS.len()), key, value, ts)
}

pub fn random_query(rng: &mut impl Rng, corpus: &[(usize, DataKey, Vec<u8>, u64)]) -> ArchiveQuery {
    let pattern = match rng.gen_range(0..6) {
        0 => corpus.choose(rng).unwrap().1.as_str().to_string(),
        1 => corpus.choose(rng).unwrap().1.base().to_string(),
        2 => format!("app{}.**", rng.gen_range(0..5)),
        3 => format!("app{}.*.load", rng.gen_range(0..4)),
        4 => format!("*.dev{}.*:unit=c", rng.gen_range(0..3)),
        _ => "*.**".to_string(),
    };
    let mut q = ArchiveQuery::new(KeyPattern::parse(&pattern).unwrap());
    if rng.gen_bool(0.4) {
        let lo = rng.gen_range(0..20_000);
        let hi = lo + rng.gen_range(1..8_000);
        q = q.range(TimeRange::new(lo, hi).unwrap());
    }
    if rng.gen_bool(0.3) {
        q = q.producer(PRODUCERS.choose(rng).unwrap());
    }
    if rng.gen_bool(0.3) {
        q = q.limit(rng.gen_range(0..50));
    }
    if rng.gen_bool(0.5) {
        q = q.descending();
    }
    q
}

/// Brute-force answer: a linear filter over the append log, then a stable
/// sort by timestamp, then the limit.
pub fn oracle(log: &[ArchiveRecord], q: &ArchiveQuery) -> Vec<ArchiveRecord> {
    fn seg_match(p: &[&str], k: &[&str]) -> bool {
        match (p.first(), k.first()) {
            (Some(&"**"), _) => true,
            (None, None) => true,
            (Some(&"*"), Some(_)) => seg_match(&p[1..], &k[1..]),
            (Some(a), Some(b)) if a == b => seg_match(&p[1..], &k[1..]),
            _ => false,
        }
    }
    let text = q.pattern.as_str();
    let (p_base, p_spec) = match text.split_once(':') {
        Some((b, s)) => (b, Some(s)),
        None => (text, None),
    };
    let p_segs: Vec<&str> = p_base.split('.').collect();
    let mut hits: Vec<&ArchiveRecord> = log
        .iter()
        .filter(|r| {
            let (k_base, k_spec) = match r.key.as_str().split_once(':') {
                Some((b, s)) => (b, Some(s)),
                None => (r.key.as_str(), None),
            };
            seg_match(&p_segs, &k_base.split('.').collect::<Vec<_>>())
                && (p_spec.is_none() || p_spec == k_spec)
                && q.time_range.is_none_or(|t| t.lo() <= r.timestamp_us && r.timestamp_us < t.hi())
                && q.producer_app.as_ref().is_none_or(|p| *p == r.producer_app)
        })
        .collect();
    match q.order {
        sdnator_core::archive::SortOrder::Ascending => hits.sort_by_key(|r| r.timestamp_us),
        sdnator_core::archive::SortOrder::Descending => hits.sort_by_key(|r| std::cmp::Reverse(r.timestamp_us)),
    }
    if let Some(n) = q.limit {
        hits.truncate(n as usize);
    }
    hits.into_iter().cloned().collect()
}

/// Appends `n` random records from three producers; returns the log in
/// append order.
pub fn fill(addr: SocketAddr, n: usize, seed: u64) -> Vec<ArchiveRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clients: Vec<ArchiveClient> = PRODUCERS
        .iter()
        .enumerate()
        .map(|(i, p)| ArchiveClient::connect(addr, p, i as u8 + 1).unwrap())
        .collect();
    let mut log = Vec::with_capacity(n);
    while log.len() < n {
        let who = rng.gen_range(0..clients.len());
        let size = rng.gen_range(1..=200).min(n - log.len());
        let batch: Vec<_> = (0..size)
            .map(|_| {
                let (_, k, v, ts) = random_record(&mut rng);
                (k, v, ts)
            })
            .collect();
        let c = &mut clients[who];
        assert_eq!(c.append(&batch).unwrap() as usize, size);
        log.extend(batch.into_iter().map(|(key, value, timestamp_us)| ArchiveRecord {
            key,
            value,
            timestamp_us,
            producer_app: c.app.clone(),
            producer_instance: c.instance,
        }));
    }
    log
}

pub struct StoreProcess(pub Child);

impl StoreProcess {
    pub fn spawn(addr: &str, dir: &Path) -> Self {
        let child = Command::new(env!("CARGO_BIN_EXE_sdnator"))
            .args(["run", "store"])
            .env("SDNATOR_STORE__LISTEN", addr)
            .env("SDNATOR_STORE__DATA_DIR", dir)
            .env("SDNATOR_STORE__FSYNC", "batch")
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        StoreProcess(child)
    }
}

impl Drop for StoreProcess {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

pub fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

pub fn connect_retry(addr: SocketAddr, app: &str) -> ArchiveClient {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match ArchiveClient::connect(addr, app, 1) {
            Ok(c) => return c,
            Err(e) if Instant::now() > deadline => panic!("store never came up: {e}"),
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}
