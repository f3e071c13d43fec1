//! Latency, throughput and scalability benchmarks.
//!
//! Every run uses one producer and one consumer application per pair, each
//! with its own session. Latency and throughput runs keep both in this
//! process; scale runs start one worker process per pair against a bus
//! hosted here. Results are reported as CSV rows with a fixed column set.

use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnator_core::manifest::{AppId, AppIdentity, Manifest, Roles, WriteFlags};
use sdnator_core::wire::Envelope;
use sdnator_core::{DataKey, KeyPattern};

use crate::bus::{BusConfig, BusServer, OverflowPolicy};
use crate::coord::{CoordinatorService, CoordinatorServiceConfig};
use crate::due::{new_instance_id, DueConfig, DueError, Observer, ObserverOverflow, Session, WriteOutcome};
use crate::error::ServiceError;
use crate::store::{StoreConfig, StoreServer};
use crate::transport::LinkShape;

/// Column set of every CSV the harness writes.
pub const CSV_COLUMNS: [&str; 15] = [
    "mode",
    "pair",
    "msg_size",
    "updates_batch",
    "archive_batch",
    "archive",
    "latency_ms",
    "duration_s",
    "sent",
    "delivered",
    "throughput_msgs_s",
    "p50_us",
    "p95_us",
    "p99_us",
    "cov",
];

/// Bytes at the front of each message that carry its batch and position.
const HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Latency,
    Throughput,
    Scale,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Latency => "latency",
            Mode::Throughput => "throughput",
            Mode::Scale => "scale",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "latency" => Ok(Mode::Latency),
            "throughput" => Ok(Mode::Throughput),
            "scale" => Ok(Mode::Scale),
            _ => Err(format!("expected latency, throughput or scale, got {s:?}")),
        }
    }
}

/// Where the bus, store and coordinator come from.
#[derive(Debug, Clone)]
pub enum Backends {
    /// Started inside the harness on ephemeral loopback ports.
    InProcess { store: StoreConfig },
    /// Already running; the coordinator must be up too.
    External { bus: String, archive: Option<String> },
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: Mode,
    pub msg_size: usize,
    pub updates_batch: usize,
    pub archive_batch: usize,
    pub archive: bool,
    pub pairs: u32,
    pub latency_ms: u64,
    pub duration: Duration,
    /// Defaults to a fifth of the duration, at most one second.
    pub warmup: Option<Duration>,
    pub seed: u64,
    pub heartbeat: Duration,
    pub backends: Backends,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Throughput,
            msg_size: 1024,
            updates_batch: 1,
            archive_batch: 1,
            archive: false,
            pairs: 1,
            latency_ms: 0,
            duration: Duration::from_secs(5),
            warmup: None,
            seed: 1,
            heartbeat: Duration::from_secs(1),
            backends: Backends::InProcess {
                store: StoreConfig::default(),
            },
        }
    }
}

impl BenchConfig {
    pub fn warmup(&self) -> Duration {
        self.warmup
            .unwrap_or_else(|| (self.duration / 5).min(Duration::from_secs(1)))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |key: &str, reason: &str| {
            Err(BenchError::Service(ServiceError::bad_config(format!("bench.{key}"), reason)))
        };
        if self.msg_size < HEADER {
            return bad("msg_size", &format!("must be at least {HEADER} bytes"));
        }
        if self.updates_batch == 0 || self.archive_batch == 0 {
            return bad("updates_batch", "batch sizes must be at least 1");
        }
        if self.pairs == 0 {
            return bad("pairs", "must be at least 1");
        }
        if !self.duration.is_zero() && self.warmup() >= self.duration {
            return bad("warmup", "must be shorter than the duration");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("backend unreachable at {addr}: {reason}")]
    BackendUnreachable { addr: String, reason: String },
    #[error("cannot start {wanted} worker processes: {reason}")]
    ResourceExhausted { wanted: u32, reason: String },
    #[error("worker {pair}: {reason}")]
    Worker { pair: u32, reason: String },
    #[error("{0}")]
    Stalled(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Due(DueError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<DueError> for BenchError {
    fn from(e: DueError) -> Self {
        match e {
            DueError::BackendUnreachable { addr, reason } => BenchError::BackendUnreachable { addr, reason },
            other => BenchError::Due(other),
        }
    }
}

/// One CSV row. `pair` is `None` on the aggregate row of a scale run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub pair: Option<u32>,
    pub sent: u64,
    pub delivered: u64,
    pub throughput: f64,
    pub p50_us: Option<f64>,
    pub p95_us: Option<f64>,
    pub p99_us: Option<f64>,
    pub cov: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub cfg: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Every row delivered everything it sent.
    pub fn zero_loss(&self) -> bool {
        self.rows.iter().all(|r| r.sent == r.delivered)
    }

    pub fn aggregate(&self) -> Option<&BenchRow> {
        match self.cfg.mode {
            Mode::Scale => self.rows.iter().find(|r| r.pair.is_none()),
            _ => self.rows.first(),
        }
    }

    pub fn per_pair(&self) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(|r| r.pair.is_some())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        let c = &self.cfg;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                c.mode.as_str().to_string(),
                r.pair.map(|p| p.to_string()).unwrap_or_else(|| "all".into()),
                c.msg_size.to_string(),
                c.updates_batch.to_string(),
                c.archive_batch.to_string(),
                if c.archive { "on" } else { "off" }.to_string(),
                c.latency_ms.to_string(),
                format!("{:.3}", c.duration.as_secs_f64()),
                r.sent.to_string(),
                r.delivered.to_string(),
                format!("{:.1}", r.throughput),
                opt(r.p50_us),
                opt(r.p95_us),
                opt(r.p99_us),
                r.cov.map(|x| format!("{x:.4}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

/// Bus, store and coordinator for one benchmark run.
pub struct BenchEnv {
    pub bus: Option<BusServer>,
    pub store: Option<StoreServer>,
    pub coordinator: Option<CoordinatorService>,
    bus_addr: String,
    archive_addr: Option<String>,
    _dir: Option<tempfile::TempDir>,
}

impl BenchEnv {
    pub fn start(cfg: &BenchConfig) -> Result<Self, BenchError> {
        match &cfg.backends {
            Backends::External { bus, archive } => Ok(Self {
                bus: None,
                store: None,
                coordinator: None,
                bus_addr: bus.clone(),
                archive_addr: if cfg.archive { archive.clone() } else { None },
                _dir: None,
            }),
            Backends::InProcess { store } => {
                let bus = BusServer::start(BusConfig {
                    listen: "127.0.0.1:0".into(),
                    // Hold publishers back rather than lose messages.
                    overflow: OverflowPolicy::Block(Duration::from_secs(30)),
                    ..BusConfig::default()
                })?;
                let (store, dir) = if cfg.archive {
                    let dir = tempfile::tempdir()?;
                    let s = StoreServer::start(StoreConfig {
                        listen: "127.0.0.1:0".into(),
                        data_dir: dir.path().join("archive"),
                        ..store.clone()
                    })?;
                    (Some(s), Some(dir))
                } else {
                    (None, None)
                };
                let bus_addr = bus.local_addr().to_string();
                let archive_addr = store.as_ref().map(|s| s.local_addr().to_string());
                let mut ccfg = CoordinatorServiceConfig {
                    due: DueConfig {
                        bus_addr: bus_addr.clone(),
                        archive_addr: archive_addr.clone(),
                        heartbeat_interval: cfg.heartbeat,
                        ..DueConfig::default()
                    },
                    seed: Some(cfg.seed),
                    ..CoordinatorServiceConfig::default()
                };
                ccfg.core.heartbeat_interval_us = cfg.heartbeat.as_micros() as u64;
                let coordinator = CoordinatorService::start(ccfg)?;
                Ok(Self {
                    bus: Some(bus),
                    store,
                    coordinator: Some(coordinator),
                    bus_addr,
                    archive_addr,
                    _dir: dir,
                })
            }
        }
    }

    pub fn bus_addr(&self) -> &str {
        &self.bus_addr
    }

    pub fn archive_addr(&self) -> Option<&str> {
        self.archive_addr.as_deref()
    }
}

/// Client settings shared by every bench session.
#[derive(Debug, Clone)]
pub struct PairSettings {
    pub bus: String,
    pub archive: Option<String>,
    pub msg_size: usize,
    pub updates_batch: usize,
    pub archive_batch: usize,
    pub latency_ms: u64,
    pub heartbeat: Duration,
    pub seed: u64,
}

impl PairSettings {
    fn from_cfg(cfg: &BenchConfig, env: &BenchEnv) -> Self {
        Self {
            bus: env.bus_addr.clone(),
            archive: env.archive_addr.clone(),
            msg_size: cfg.msg_size,
            updates_batch: cfg.updates_batch,
            archive_batch: cfg.archive_batch,
            latency_ms: cfg.latency_ms,
            heartbeat: cfg.heartbeat,
            seed: cfg.seed,
        }
    }

    fn due(&self) -> DueConfig {
        DueConfig {
            bus_addr: self.bus.clone(),
            archive_addr: self.archive.clone(),
            updates_batch: self.updates_batch,
            archive_batch: self.archive_batch,
            heartbeat_interval: self.heartbeat,
            link: LinkShape {
                one_way_latency: Duration::from_millis(self.latency_ms),
            },
            observer_overflow: ObserverOverflow::Block,
            ..DueConfig::default()
        }
    }
}

/// Result of one pair's throughput run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairResult {
    pub sent: u64,
    pub delivered: u64,
    pub throughput: f64,
}

/// A registered producer and consumer with the consumer's interest assigned.
pub struct Pair {
    index: u32,
    key: DataKey,
    producer: Session,
    consumer: Session,
    observer: Observer,
    delivered: Arc<AtomicU64>,
    settings: PairSettings,
}

fn identity(app: String, roles: Roles) -> AppIdentity {
    AppIdentity {
        app_id: AppId::new(&app).expect("bench app id"),
        instance: new_instance_id(),
        roles,
    }
}

impl Pair {
    pub fn setup(index: u32, settings: PairSettings) -> Result<Self, BenchError> {
        let key = DataKey::parse(&format!("bench.pair.{index}.data")).expect("bench key");
        let due = settings.due();
        let consumer = Session::init(
            identity(format!("bench-consumer-{index}"), Roles::CONSUMER),
            Manifest::new().interest(KeyPattern::exact(&key), None),
            due.clone(),
        )?;
        let producer = Session::init(
            identity(format!("bench-producer-{index}"), Roles::PRODUCER),
            Manifest::new().capability(key.clone(), None, false),
            due,
        )?;
        if !producer.wait_assigned(&key, Duration::from_secs(10)) {
            return Err(BenchError::Stalled(format!("{key} was never assigned")));
        }
        let observer = consumer.observe(KeyPattern::exact(&key))?;
        Ok(Self {
            index,
            key,
            producer,
            consumer,
            observer,
            delivered: Arc::new(AtomicU64::new(0)),
            settings,
        })
    }

    fn payload_source(&self) -> (ChaCha8Rng, Vec<u8>) {
        let rng = ChaCha8Rng::seed_from_u64(self.settings.seed.wrapping_add(self.index as u64));
        (rng, vec![0u8; self.settings.msg_size])
    }

    fn send(&self, msg: &[u8]) -> Result<(), BenchError> {
        match self.producer.write(&self.key, msg, WriteFlags::NONE)? {
            WriteOutcome::Accepted => Ok(()),
            other => Err(BenchError::Stalled(format!("write to {} was {other:?}", self.key))),
        }
    }

    /// Drains both paths and waits for the consumer to catch up.
    fn settle(&self, sent: u64) -> Result<u64, BenchError> {
        self.producer.flush()?;
        let deadline = Instant::now() + Duration::from_secs(30);
        while self.delivered.load(Ordering::Acquire) < sent && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        Ok(self.delivered.load(Ordering::Acquire))
    }

    /// Writes as fast as the client allows for `duration`; the rate is
    /// taken at the consumer over the part after `warmup`.
    pub fn throughput(&self, duration: Duration, warmup: Duration) -> Result<PairResult, BenchError> {
        let d = self.delivered.clone();
        self.observer.on_data(move |_: &Envelope| {
            d.fetch_add(1, Ordering::Release);
        });
        let (mut rng, mut msg) = self.payload_source();
        let start = Instant::now();
        let mut mark: Option<(Instant, u64)> = None;
        let mut sent = 0u64;
        let end = loop {
            let now = Instant::now();
            let elapsed = now - start;
            if elapsed >= duration {
                break (now, self.delivered.load(Ordering::Acquire));
            }
            if mark.is_none() && elapsed >= warmup {
                mark = Some((now, self.delivered.load(Ordering::Acquire)));
            }
            rng.fill_bytes(&mut msg[HEADER..]);
            msg[..8].copy_from_slice(&sent.to_le_bytes());
            self.send(&msg)?;
            sent += 1;
        };
        let (t0, d0) = mark.unwrap_or((start, 0));
        let window = (end.0 - t0).as_secs_f64();
        let throughput = if window > 0.0 {
            (end.1 - d0) as f64 / window
        } else {
            0.0
        };
        let delivered = self.settle(sent)?;
        Ok(PairResult {
            sent,
            delivered,
            throughput,
        })
    }

    /// Sends one batch at a time and waits for its last message; returns
    /// the per-batch send-to-delivery times in microseconds after warmup.
    pub fn latency(&self, duration: Duration, warmup: Duration) -> Result<(Vec<f64>, u64, u64), BenchError> {
        let batch = self.settings.updates_batch as u32;
        let (tx, rx) = mpsc::channel::<u64>();
        let d = self.delivered.clone();
        self.observer.on_data(move |env: &Envelope| {
            d.fetch_add(1, Ordering::Release);
            let v = &env.value;
            if v.len() >= HEADER && u32::from_le_bytes(v[8..12].try_into().unwrap()) + 1 == batch {
                let _ = tx.send(u64::from_le_bytes(v[..8].try_into().unwrap()));
            }
        });
        let (mut rng, mut msg) = self.payload_source();
        let start = Instant::now();
        let mut samples = Vec::new();
        let mut sent = 0u64;
        let mut round = 0u64;
        while start.elapsed() < duration {
            let t0 = Instant::now();
            for i in 0..batch {
                rng.fill_bytes(&mut msg[HEADER..]);
                msg[..8].copy_from_slice(&round.to_le_bytes());
                msg[8..12].copy_from_slice(&i.to_le_bytes());
                self.send(&msg)?;
                sent += 1;
            }
            loop {
                match rx.recv_timeout(Duration::from_secs(10)) {
                    Ok(r) if r == round => break,
                    Ok(_) => continue,
                    Err(_) => return Err(BenchError::Stalled(format!("batch {round} never arrived"))),
                }
            }
            if t0 - start >= warmup {
                samples.push(t0.elapsed().as_secs_f64() * 1e6);
            }
            round += 1;
        }
        let delivered = self.settle(sent)?;
        Ok((samples, sent, delivered))
    }

    pub fn close(self) {
        self.observer.close();
        self.producer.close();
        self.consumer.close();
    }
}

/// Runs the benchmark `cfg` describes. Scale runs start `exe` once per pair
/// with the hidden worker subcommand.
pub fn run(cfg: &BenchConfig, exe: Option<&Path>) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    if cfg.duration.is_zero() {
        return Ok(BenchReport {
            cfg: cfg.clone(),
            rows: Vec::new(),
        });
    }
    let env = BenchEnv::start(cfg)?;
    let settings = PairSettings::from_cfg(cfg, &env);
    let rows = match cfg.mode {
        Mode::Latency => {
            let pair = Pair::setup(0, settings)?;
            let (mut samples, sent, delivered) = pair.latency(cfg.duration, cfg.warmup())?;
            pair.close();
            samples.sort_by(f64::total_cmp);
            let window = (cfg.duration - cfg.warmup()).as_secs_f64();
            vec![BenchRow {
                pair: Some(0),
                sent,
                delivered,
                throughput: samples.len() as f64 * cfg.updates_batch as f64 / window,
                p50_us: percentile(&samples, 50.0),
                p95_us: percentile(&samples, 95.0),
                p99_us: percentile(&samples, 99.0),
                cov: None,
            }]
        }
        Mode::Throughput => {
            let pair = Pair::setup(0, settings)?;
            let r = pair.throughput(cfg.duration, cfg.warmup())?;
            pair.close();
            vec![row(Some(0), r)]
        }
        Mode::Scale => {
            let exe = match exe {
                Some(p) => p.to_path_buf(),
                None => std::env::current_exe()?,
            };
            scale(cfg, &settings, &exe)?
        }
    };
    Ok(BenchReport { cfg: cfg.clone(), rows })
}

fn row(pair: Option<u32>, r: PairResult) -> BenchRow {
    BenchRow {
        pair,
        sent: r.sent,
        delivered: r.delivered,
        throughput: r.throughput,
        p50_us: None,
        p95_us: None,
        p99_us: None,
        cov: None,
    }
}

struct Worker {
    pair: u32,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: std::io::Lines<BufReader<std::process::ChildStdout>>,
}

impl Worker {
    fn expect(&mut self, prefix: &str) -> Result<String, BenchError> {
        let pair = self.pair;
        match self.lines.next() {
            Some(Ok(line)) => line
                .strip_prefix(prefix)
                .map(|s| s.trim().to_string())
                .ok_or(BenchError::Worker { pair, reason: line }),
            Some(Err(e)) => Err(BenchError::Worker {
                pair,
                reason: e.to_string(),
            }),
            None => Err(BenchError::Worker {
                pair,
                reason: "exited early".into(),
            }),
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        drop(self.stdin.take());
        if matches!(self.child.try_wait(), Ok(None)) {
            let deadline = Instant::now() + Duration::from_secs(5);
            while Instant::now() < deadline {
                if !matches!(self.child.try_wait(), Ok(None)) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

fn scale(cfg: &BenchConfig, s: &PairSettings, exe: &Path) -> Result<Vec<BenchRow>, BenchError> {
    let mut workers = Vec::with_capacity(cfg.pairs as usize);
    for pair in 0..cfg.pairs {
        let mut cmd = Command::new(exe);
        cmd.arg("bench-worker")
            .args(["--bus", &s.bus])
            .args(["--pair", &pair.to_string()])
            .args(["--msg-size", &s.msg_size.to_string()])
            .args(["--updates-batch", &s.updates_batch.to_string()])
            .args(["--archive-batch", &s.archive_batch.to_string()])
            .args(["--latency-ms", &s.latency_ms.to_string()])
            .args(["--heartbeat-ms", &s.heartbeat.as_millis().to_string()])
            .args(["--duration", &cfg.duration.as_secs_f64().to_string()])
            .args(["--warmup", &cfg.warmup().as_secs_f64().to_string()])
            .args(["--seed", &s.seed.to_string()]);
        if let Some(a) = &s.archive {
            cmd.args(["--archive", a]);
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BenchError::ResourceExhausted {
                wanted: cfg.pairs,
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        workers.push(Worker {
            pair,
            child,
            stdin,
            lines: BufReader::new(stdout).lines(),
        });
    }
    for w in &mut workers {
        w.expect("ready")?;
    }
    for w in &mut workers {
        let stdin = w.stdin.as_mut().expect("worker stdin");
        writeln!(stdin, "go")?;
        stdin.flush()?;
    }
    let mut rows = Vec::with_capacity(workers.len() + 1);
    for w in &mut workers {
        let line = w.expect("result")?;
        let r = parse_result(&line).ok_or_else(|| BenchError::Worker {
            pair: w.pair,
            reason: format!("bad result line {line:?}"),
        })?;
        rows.push(row(Some(w.pair), r));
    }
    drop(workers);
    let rates: Vec<f64> = rows.iter().map(|r| r.throughput).collect();
    rows.push(BenchRow {
        pair: None,
        sent: rows.iter().map(|r| r.sent).sum(),
        delivered: rows.iter().map(|r| r.delivered).sum(),
        throughput: rates.iter().sum(),
        p50_us: None,
        p95_us: None,
        p99_us: None,
        cov: coefficient_of_variation(&rates),
    });
    Ok(rows)
}

fn parse_result(line: &str) -> Option<PairResult> {
    let mut it = line.split_whitespace();
    let r = PairResult {
        sent: it.next()?.parse().ok()?,
        delivered: it.next()?.parse().ok()?,
        throughput: it.next()?.parse().ok()?,
    };
    it.next().is_none().then_some(r)
}

/// Arguments of one scale worker process.
#[derive(Debug, Clone)]
pub struct WorkerArgs {
    pub pair: u32,
    pub settings: PairSettings,
    pub duration: Duration,
    pub warmup: Duration,
}

/// Body of a scale worker: register, report `ready`, wait for `go` on
/// `input`, run, report `result <sent> <delivered> <msgs/s>`.
pub fn worker_main(args: WorkerArgs, input: impl BufRead, mut out: impl Write) -> Result<(), BenchError> {
    let pair = Pair::setup(args.pair, args.settings)?;
    writeln!(out, "ready")?;
    out.flush()?;
    let mut line = String::new();
    input.take(64).read_line(&mut line)?;
    if line.trim() != "go" {
        return Err(BenchError::Stalled("harness went away before start".into()));
    }
    let r = pair.throughput(args.duration, args.warmup)?;
    writeln!(out, "result {} {} {:.3}", r.sent, r.delivered, r.throughput)?;
    out.flush()?;
    pair.close();
    Ok(())
}

/// Default CSV destination for a mode.
pub fn default_out(mode: Mode) -> PathBuf {
    PathBuf::from(format!("bench-{}.csv", mode.as_str()))
}
