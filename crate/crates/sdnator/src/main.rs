use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdnator::bench::{self, BenchConfig, Mode, PairSettings, WorkerArgs};
use sdnator::bus::BusServer;
use sdnator::config::Config;
use sdnator::coord::CoordinatorService;
use sdnator::fleetnet;
use sdnator::store::StoreServer;
use sdnator::ServiceError;

/// Bus, archive store, coordinator, fleet simulator and benchmarks.
///
/// Every setting can come from the `--config` TOML file or from an
/// environment variable `SDNATOR_<SECTION>__<KEY>`.
#[derive(Parser)]
#[command(name = "sdnator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark and write CSV.
    Bench {
        mode: BenchMode,
        #[command(flatten)]
        opts: BenchOpts,
    },
    /// Start a component in the foreground.
    Run {
        component: Component,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
    },
    #[command(hide = true)]
    BenchWorker(WorkerOpts),
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Latency,
    Throughput,
    Scale,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Bus,
    Store,
    Coordinator,
    Sim,
}

impl Component {
    fn name(self) -> &'static str {
        match self {
            Component::Bus => "bus",
            Component::Store => "store",
            Component::Coordinator => "coordinator",
            Component::Sim => "sim",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct BenchOpts {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Message size in bytes.
    #[arg(long, value_name = "N")]
    msg_size: Option<usize>,
    /// Writes per bus publication.
    #[arg(long, value_name = "N")]
    updates_batch: Option<usize>,
    /// Writes per archive append.
    #[arg(long, value_name = "N")]
    archive_batch: Option<usize>,
    /// Mirror writes to the archive store.
    #[arg(long)]
    archive: Option<OnOff>,
    /// Producer/consumer pairs (scale mode).
    #[arg(long, value_name = "N")]
    pairs: Option<u32>,
    /// Injected one-way latency on every client link.
    #[arg(long, value_name = "N")]
    latency_ms: Option<u64>,
    /// Run length in seconds; 0 writes only the CSV header.
    #[arg(long, value_name = "S")]
    duration: Option<f64>,
    /// Leading seconds excluded from the measurement.
    #[arg(long, value_name = "S")]
    warmup: Option<f64>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// CSV destination; standard output when absent.
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerOpts {
    #[arg(long)]
    bus: String,
    #[arg(long)]
    archive: Option<String>,
    #[arg(long)]
    pair: u32,
    #[arg(long)]
    msg_size: usize,
    #[arg(long)]
    updates_batch: usize,
    #[arg(long)]
    archive_batch: usize,
    #[arg(long)]
    latency_ms: u64,
    #[arg(long)]
    heartbeat_ms: u64,
    #[arg(long)]
    duration: f64,
    #[arg(long)]
    warmup: f64,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
    #[error(transparent)]
    Fleet(#[from] fleetnet::FleetError),
    #[error(transparent)]
    Due(#[from] sdnator::due::DueError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Usage(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sdnator: {e}");
            match e {
                CliError::Service(ServiceError::BadConfig { .. }) | CliError::Usage(_) => ExitCode::from(2),
                CliError::Bench(bench::BenchError::Service(ServiceError::BadConfig { .. })) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load(path: Option<&PathBuf>) -> Result<Config, ServiceError> {
    match path {
        Some(p) => Config::load(p),
        None => Config::from_env(),
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Bench { mode, opts } => run_bench(mode, opts),
        Command::Run { component, config } => {
            let cfg = load(config.as_ref())?;
            if config.is_some() {
                cfg.require(component.name())?;
            }
            run_component(component, cfg)
        }
        Command::BenchWorker(w) => {
            let args = WorkerArgs {
                pair: w.pair,
                settings: PairSettings {
                    bus: w.bus,
                    archive: w.archive,
                    msg_size: w.msg_size,
                    updates_batch: w.updates_batch,
                    archive_batch: w.archive_batch,
                    latency_ms: w.latency_ms,
                    heartbeat: Duration::from_millis(w.heartbeat_ms),
                    seed: w.seed,
                },
                duration: secs("--duration", w.duration)?,
                warmup: secs("--warmup", w.warmup)?,
            };
            bench::worker_main(args, io::stdin().lock(), io::stdout().lock())?;
            Ok(())
        }
    }
}

fn secs(flag: &str, s: f64) -> Result<Duration, CliError> {
    if s.is_finite() && s >= 0.0 {
        Ok(Duration::from_secs_f64(s))
    } else {
        Err(CliError::Usage(format!("{flag} must be a non-negative number of seconds")))
    }
}

fn run_bench(mode: BenchMode, o: BenchOpts) -> Result<(), CliError> {
    let cfg = load(o.config.as_ref())?;
    let d = cfg.bench;
    let bc = BenchConfig {
        mode: match mode {
            BenchMode::Latency => Mode::Latency,
            BenchMode::Throughput => Mode::Throughput,
            BenchMode::Scale => Mode::Scale,
        },
        msg_size: o.msg_size.unwrap_or(d.msg_size),
        updates_batch: o.updates_batch.unwrap_or(d.updates_batch),
        archive_batch: o.archive_batch.unwrap_or(d.archive_batch),
        archive: o.archive.map(|a| matches!(a, OnOff::On)).unwrap_or(d.archive),
        pairs: o.pairs.unwrap_or(d.pairs),
        latency_ms: o.latency_ms.unwrap_or(d.latency_ms),
        duration: match o.duration {
            Some(s) => secs("--duration", s)?,
            None => d.duration,
        },
        warmup: match o.warmup {
            Some(s) => Some(secs("--warmup", s)?),
            None => d.warmup,
        },
        seed: o.seed.unwrap_or(d.seed),
        ..d
    };
    let report = bench::run(&bc, None)?;
    match &o.out {
        Some(path) => report.write_csv(BufWriter::new(File::create(path)?))?,
        None => report.write_csv(io::stdout().lock())?,
    }
    if let Some(agg) = report.aggregate() {
        let mut line = format!(
            "{}: sent {} delivered {} ({:.0} msgs/s)",
            bc.mode.as_str(),
            agg.sent,
            agg.delivered,
            agg.throughput
        );
        if let Some(p50) = agg.p50_us {
            line.push_str(&format!(", p50 {p50:.1} us"));
        }
        if let Some(cov) = agg.cov {
            line.push_str(&format!(", per-pair cov {cov:.3}"));
        }
        eprintln!("{line}");
    }
    if !report.zero_loss() {
        return Err(CliError::Usage("messages were lost: sent != delivered".into()));
    }
    Ok(())
}

fn park() -> ! {
    loop {
        std::thread::park();
    }
}

fn run_component(component: Component, cfg: Config) -> Result<(), CliError> {
    match component {
        Component::Bus => {
            let bus = BusServer::start(cfg.bus)?;
            eprintln!("bus listening on {}", bus.local_addr());
            park()
        }
        Component::Store => {
            let store = StoreServer::start(cfg.store)?;
            eprintln!(
                "store listening on {} ({} records)",
                store.local_addr(),
                store.store().len()
            );
            park()
        }
        Component::Coordinator => {
            let c = CoordinatorService::start(cfg.coordinator)?;
            eprintln!(
                "coordinator connected to {}{}",
                cfg.due.bus_addr,
                if c.recovered() { ", state recovered from archive" } else { "" }
            );
            park()
        }
        Component::Sim => run_sim(cfg),
    }
}

fn run_sim(cfg: Config) -> Result<(), CliError> {
    let s = &cfg.sim;
    let mut reports = Vec::with_capacity(s.seeds as usize);
    for i in 0..s.seeds.max(1) {
        let seed = s.seed.wrapping_add(i as u64);
        let report = if s.networked {
            fleetnet::run_networked(&s.scenario, seed, &cfg.due, s.stall)?
        } else {
            fleetnet::run_local(&s.scenario, seed).map_err(fleetnet::FleetError::from)?
        };
        eprintln!(
            "{} seed {seed}: mean makespan {:.1} min, max {:.1} min",
            report.summary.scheduler, report.summary.mean_makespan, report.summary.max_makespan
        );
        reports.push(report);
    }
    let mut out = BufWriter::new(File::create(&s.summary_csv)?);
    fleetnet::write_summary_csv(&reports, &mut out)?;
    out.flush()?;
    if let Some(path) = &s.jobs_csv {
        let mut out = BufWriter::new(File::create(path)?);
        fleetnet::write_jobs_csv(&reports, &mut out)?;
        out.flush()?;
    }
    Ok(())
}
