//! Shared configuration file.
//!
//! One TOML file with a section per component: `[bus]`, `[store]`, `[due]`,
//! `[coordinator]`, `[sim]` and `[bench]`. Any key can be overridden by an
//! environment variable named `SDNATOR_<SECTION>__<KEY>` in upper case, for
//! example `SDNATOR_BUS__LISTEN=0.0.0.0:7401`. Unknown keys are rejected.
//! Durations are given in milliseconds unless the key name says otherwise.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use sdnator_core::fleet::{OrderSchedule, PpeInjection, ScenarioConfig, SchedulerKind};
use toml::{Table, Value};

use crate::bench::{Backends, BenchConfig};
use crate::bus::{BusConfig, OverflowPolicy};
use crate::coord::CoordinatorServiceConfig;
use crate::due::{DueConfig, ObserverOverflow};
use crate::error::ServiceError;
use crate::store::{FsyncPolicy, StoreConfig};
use crate::transport::LinkShape;

pub const ENV_PREFIX: &str = "SDNATOR_";

pub const SECTIONS: [&str; 6] = ["bus", "store", "due", "coordinator", "sim", "bench"];

/// Fleet scenario plus how to run it.
#[derive(Debug, Clone)]
pub struct SimSettings {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    /// Consecutive seeds starting at `seed`.
    pub seeds: u32,
    /// Route twins and decisions through the framework.
    pub networked: bool,
    pub stall: Duration,
    pub jobs_csv: Option<PathBuf>,
    pub summary_csv: PathBuf,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            seed: 1,
            seeds: 1,
            networked: true,
            stall: Duration::from_secs(10),
            jobs_csv: None,
            summary_csv: PathBuf::from("sim-summary.csv"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    pub bus: BusConfig,
    pub store: StoreConfig,
    pub due: DueConfig,
    pub coordinator: CoordinatorServiceConfig,
    pub sim: SimSettings,
    pub bench: BenchConfig,
    /// Keys the file or environment set explicitly, as `section.key`.
    present: BTreeSet<String>,
}

/// Keys a component cannot start without when a config file is given.
pub fn required_keys(component: &str) -> &'static [&'static str] {
    match component {
        "bus" => &["bus.listen"],
        "store" => &["store.listen", "store.data_dir"],
        "coordinator" => &["due.bus_addr"],
        "sim" => &["due.bus_addr", "sim.scheduler"],
        _ => &[],
    }
}

impl Config {
    /// Defaults plus environment overrides.
    pub fn from_env() -> Result<Self, ServiceError> {
        Self::from_sources(None, &env_vars())
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::bad_config("--config", format!("{}: {e}", path.display())))?;
        Self::from_sources(Some(&text), &env_vars())
    }

    /// Builds a config from file text and `SDNATOR_*` variables.
    pub fn from_sources(text: Option<&str>, env: &HashMap<String, String>) -> Result<Self, ServiceError> {
        let table: Table = match text {
            Some(t) => t
                .parse()
                .map_err(|e: toml::de::Error| ServiceError::bad_config("--config", e.message().to_string()))?,
            None => Table::new(),
        };
        for (name, v) in &table {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ServiceError::bad_config(name.clone(), "unknown section"));
            }
            if !v.is_table() {
                return Err(ServiceError::bad_config(name.clone(), "expected a section"));
            }
        }
        let mut present = BTreeSet::new();
        let mut sections = HashMap::new();
        for name in SECTIONS {
            let t = table.get(name).and_then(Value::as_table).cloned().unwrap_or_default();
            sections.insert(name, Section::new(name, t, env));
        }
        let mut take = |name: &str| sections.remove(name).expect("known section");

        let mut s = take("bus");
        let d = BusConfig::default();
        let bus = BusConfig {
            listen: s.string("listen")?.unwrap_or(d.listen),
            max_frame: s.parse("max_frame")?.unwrap_or(d.max_frame),
            queue_depth: s.parse("queue_depth")?.unwrap_or(d.queue_depth),
            overflow: s.parse::<OverflowPolicy>("overflow")?.unwrap_or(d.overflow),
            max_subscriptions: s.parse("max_subscriptions")?.unwrap_or(d.max_subscriptions),
        };
        s.finish(&mut present)?;

        let mut s = take("store");
        let d = StoreConfig::default();
        let store = StoreConfig {
            listen: s.string("listen")?.unwrap_or(d.listen),
            data_dir: s.string("data_dir")?.map(PathBuf::from).unwrap_or(d.data_dir),
            segment_bytes: s.parse("segment_bytes")?.unwrap_or(d.segment_bytes),
            fsync: s.parse::<FsyncPolicy>("fsync")?.unwrap_or(d.fsync),
            max_bytes: s.parse("max_bytes")?.or(d.max_bytes),
            max_frame: s.parse("max_frame")?.unwrap_or(d.max_frame),
        };
        s.finish(&mut present)?;

        let mut s = take("due");
        let d = DueConfig::default();
        let archive_addr = match s.string("archive_addr")? {
            Some(a) if a.is_empty() || a == "off" => None,
            Some(a) => Some(a),
            None => d.archive_addr,
        };
        let due = DueConfig {
            bus_addr: s.string("bus_addr")?.unwrap_or(d.bus_addr),
            archive_addr,
            updates_batch: s.parse("updates_batch")?.unwrap_or(d.updates_batch),
            archive_batch: s.parse("archive_batch")?.unwrap_or(d.archive_batch),
            linger: s.millis("linger_ms")?.unwrap_or(d.linger),
            heartbeat_interval: s.millis("heartbeat_ms")?.unwrap_or(d.heartbeat_interval),
            heartbeat_multiplier: s.parse("heartbeat_multiplier")?.unwrap_or(d.heartbeat_multiplier),
            handshake_timeout: s.millis("handshake_timeout_ms")?.unwrap_or(d.handshake_timeout),
            connect_timeout: s.millis("connect_timeout_ms")?.unwrap_or(d.connect_timeout),
            link: LinkShape {
                one_way_latency: s.millis("latency_ms")?.unwrap_or(d.link.one_way_latency),
            },
            observer_queue: s.parse("observer_queue")?.unwrap_or(d.observer_queue),
            observer_overflow: match s.string("observer_overflow")?.as_deref() {
                None => d.observer_overflow,
                Some("drop-oldest") => ObserverOverflow::DropOldest,
                Some("block") => ObserverOverflow::Block,
                Some(other) => {
                    return Err(s.bad("observer_overflow", format!("expected drop-oldest or block, got {other:?}")))
                }
            },
            archive_queue: s.parse("archive_queue")?.unwrap_or(d.archive_queue),
        };
        due.validate().map_err(|e| ServiceError::bad_config("due", e.to_string()))?;
        s.finish(&mut present)?;

        let mut s = take("coordinator");
        let d = CoordinatorServiceConfig::default();
        let mut coordinator = CoordinatorServiceConfig {
            due: due.clone(),
            core: d.core,
            sweep_interval: s.millis("sweep_ms")?.unwrap_or(d.sweep_interval),
            seed: s.parse("seed")?.or(d.seed),
        };
        coordinator.core.heartbeat_interval_us = due.heartbeat_interval.as_micros() as u64;
        coordinator.core.timeout_multiplier = due.heartbeat_multiplier;
        s.finish(&mut present)?;

        let mut s = take("sim");
        let sim = sim_settings(&mut s)?;
        s.finish(&mut present)?;

        let mut s = take("bench");
        let d = BenchConfig::default();
        let backends = if s.parse::<bool>("external")?.unwrap_or(false) {
            Backends::External {
                bus: due.bus_addr.clone(),
                archive: due.archive_addr.clone(),
            }
        } else {
            Backends::InProcess { store: store.clone() }
        };
        let bench = BenchConfig {
            mode: d.mode,
            msg_size: s.parse("msg_size")?.unwrap_or(d.msg_size),
            updates_batch: s.parse("updates_batch")?.unwrap_or(d.updates_batch),
            archive_batch: s.parse("archive_batch")?.unwrap_or(d.archive_batch),
            archive: s.on_off("archive")?.unwrap_or(d.archive),
            pairs: s.parse("pairs")?.unwrap_or(d.pairs),
            latency_ms: s.parse("latency_ms")?.unwrap_or(d.latency_ms),
            duration: s.seconds("duration_s")?.unwrap_or(d.duration),
            warmup: s.seconds("warmup_s")?.or(d.warmup),
            seed: s.parse("seed")?.unwrap_or(d.seed),
            heartbeat: due.heartbeat_interval,
            backends,
        };
        s.finish(&mut present)?;

        Ok(Self {
            bus,
            store,
            due,
            coordinator,
            sim,
            bench,
            present,
        })
    }

    /// Fails with the first missing key `component` needs.
    pub fn require(&self, component: &str) -> Result<(), ServiceError> {
        for key in required_keys(component) {
            if !self.present.contains(*key) {
                return Err(ServiceError::bad_config(*key, "missing"));
            }
        }
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.present.contains(key)
    }
}

fn sim_settings(s: &mut Section) -> Result<SimSettings, ServiceError> {
    let d = SimSettings::default();
    let c = d.scenario.clone();
    let scheduler = match s.string("scheduler")? {
        Some(name) => SchedulerKind::from_str(&name).map_err(|e| s.bad("scheduler", e.to_string()))?,
        None => c.scheduler,
    };
    let ppe = if s.parse::<bool>("ppe")?.unwrap_or(false) {
        let p = c.clone().with_ppe().ppe.expect("default injection");
        Some(PpeInjection {
            jobs: s.parse("ppe_jobs")?.unwrap_or(p.jobs),
            jobs_per_order: s.parse("ppe_jobs_per_order")?.unwrap_or(p.jobs_per_order),
            print_min: s.parse("ppe_print_min")?.unwrap_or(p.print_min),
            at_progress: s.parse("ppe_at_progress")?.unwrap_or(p.at_progress),
        })
    } else {
        None
    };
    let scenario = ScenarioConfig {
        scheduler,
        machines: s.parse("machines")?.unwrap_or(c.machines),
        setup_min: s.parse("setup_min")?.unwrap_or(c.setup_min),
        maintenance_min: s.parse("maintenance_min")?.unwrap_or(c.maintenance_min),
        anomaly_prob: s.parse("anomaly_prob")?.unwrap_or(c.anomaly_prob),
        max_reprints: s.parse("max_reprints")?.or(c.max_reprints),
        normal_min_print: s.parse("normal_min_print")?.unwrap_or(c.normal_min_print),
        normal_max_print: s.parse("normal_max_print")?.unwrap_or(c.normal_max_print),
        orders: OrderSchedule {
            orders: s.parse("orders")?.unwrap_or(c.orders.orders),
            jobs_per_order: s.parse("jobs_per_order")?.unwrap_or(c.orders.jobs_per_order),
            first_at_min: s.parse("first_order_min")?.unwrap_or(c.orders.first_at_min),
            interval_min: s.parse("order_interval_min")?.unwrap_or(c.orders.interval_min),
        },
        ppe,
        ppe_priority: s.parse("ppe_priority")?.unwrap_or(c.ppe_priority),
        exact_limit: s.parse("exact_limit")?.unwrap_or(c.exact_limit),
        node_budget: s.parse("node_budget")?.unwrap_or(c.node_budget),
    };
    scenario
        .validate()
        .map_err(|e| ServiceError::bad_config("sim", e.to_string()))?;
    Ok(SimSettings {
        scenario,
        seed: s.parse("seed")?.unwrap_or(d.seed),
        seeds: s.parse("seeds")?.unwrap_or(d.seeds),
        networked: s.parse("networked")?.unwrap_or(d.networked),
        stall: s.millis("stall_ms")?.unwrap_or(d.stall),
        jobs_csv: s.string("jobs_csv")?.map(PathBuf::from).or(d.jobs_csv),
        summary_csv: s.string("summary_csv")?.map(PathBuf::from).unwrap_or(d.summary_csv),
    })
}

fn env_vars() -> HashMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

/// Environment variable overriding `section.key`.
pub fn env_name(section: &str, key: &str) -> String {
    format!("{ENV_PREFIX}{}__{}", section.to_uppercase(), key.to_uppercase())
}

/// One section's values, with lookups recorded so leftovers can be reported.
struct Section<'e> {
    name: &'static str,
    table: Table,
    env: &'e HashMap<String, String>,
    seen: BTreeSet<String>,
}

impl<'e> Section<'e> {
    fn new(name: &'static str, table: Table, env: &'e HashMap<String, String>) -> Self {
        Self {
            name,
            table,
            env,
            seen: BTreeSet::new(),
        }
    }

    fn bad(&self, key: &str, reason: impl Into<String>) -> ServiceError {
        ServiceError::bad_config(format!("{}.{key}", self.name), reason)
    }

    /// Raw text of a key: the environment wins over the file.
    fn raw(&mut self, key: &str) -> Result<Option<String>, ServiceError> {
        self.seen.insert(key.to_string());
        if let Some(v) = self.env.get(&env_name(self.name, key)) {
            return Ok(Some(v.clone()));
        }
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(Value::Integer(i)) => Ok(Some(i.to_string())),
            Some(Value::Float(f)) => Ok(Some(f.to_string())),
            Some(Value::Boolean(b)) => Ok(Some(b.to_string())),
            Some(other) => Err(self.bad(key, format!("unsupported value {other}"))),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, ServiceError> {
        self.raw(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ServiceError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key)? {
            None => Ok(None),
            Some(text) => text
                .trim()
                .parse()
                .map(Some)
                .map_err(|e: T::Err| self.bad(key, format!("{text:?}: {e}"))),
        }
    }

    fn millis(&mut self, key: &str) -> Result<Option<Duration>, ServiceError> {
        Ok(self.parse::<u64>(key)?.map(Duration::from_millis))
    }

    fn seconds(&mut self, key: &str) -> Result<Option<Duration>, ServiceError> {
        match self.parse::<f64>(key)? {
            Some(s) if s.is_finite() && s >= 0.0 => Ok(Some(Duration::from_secs_f64(s))),
            Some(_) => Err(self.bad(key, "must be a non-negative number of seconds")),
            None => Ok(None),
        }
    }

    fn on_off(&mut self, key: &str) -> Result<Option<bool>, ServiceError> {
        match self.raw(key)?.as_deref() {
            None => Ok(None),
            Some("on" | "true") => Ok(Some(true)),
            Some("off" | "false") => Ok(Some(false)),
            Some(other) => Err(self.bad(key, format!("expected on or off, got {other:?}"))),
        }
    }

    /// Rejects unknown keys and records which ones were set.
    fn finish(self, present: &mut BTreeSet<String>) -> Result<(), ServiceError> {
        for key in self.table.keys() {
            if !self.seen.contains(key) {
                return Err(self.bad(key, "unknown key"));
            }
            present.insert(format!("{}.{key}", self.name));
        }
        for key in &self.seen {
            if self.env.contains_key(&env_name(self.name, key)) {
                present.insert(format!("{}.{key}", self.name));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, env: &[(&str, &str)]) -> Result<Config, ServiceError> {
        let env = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Config::from_sources(Some(text), &env)
    }

    #[test]
    fn file_values_and_defaults() {
        let c = load(
            "[bus]\nlisten = \"127.0.0.1:9000\"\noverflow = \"drop-oldest\"\n[due]\nupdates_batch = 100\nlatency_ms = 10\n",
            &[],
        )
        .unwrap();
        assert_eq!(c.bus.listen, "127.0.0.1:9000");
        assert_eq!(c.bus.overflow, OverflowPolicy::DropOldest);
        assert_eq!(c.due.updates_batch, 100);
        assert_eq!(c.due.link.one_way_latency, Duration::from_millis(10));
        assert_eq!(c.store.listen, StoreConfig::default().listen);
        assert!(c.is_set("bus.listen") && !c.is_set("store.listen"));
    }

    #[test]
    fn environment_overrides_file() {
        let c = load(
            "[bus]\nlisten = \"127.0.0.1:9000\"\n",
            &[("SDNATOR_BUS__LISTEN", "127.0.0.1:9100"), ("SDNATOR_SIM__MACHINES", "4")],
        )
        .unwrap();
        assert_eq!(c.bus.listen, "127.0.0.1:9100");
        assert_eq!(c.sim.scenario.machines, 4);
        assert!(c.is_set("sim.machines"));
    }

    #[test]
    fn unknown_keys_and_sections_are_named() {
        let e = load("[bus]\nlisen = \"x\"\n", &[]).unwrap_err();
        assert!(matches!(e, ServiceError::BadConfig { ref key, .. } if key == "bus.lisen"), "{e}");
        let e = load("[busses]\n", &[]).unwrap_err();
        assert!(matches!(e, ServiceError::BadConfig { ref key, .. } if key == "busses"));
    }

    #[test]
    fn bad_values_name_the_key() {
        let e = load("[due]\nupdates_batch = \"many\"\n", &[]).unwrap_err();
        assert!(matches!(e, ServiceError::BadConfig { ref key, .. } if key == "due.updates_batch"));
        let e = load("[sim]\nscheduler = \"greedy\"\n", &[]).unwrap_err();
        assert!(matches!(e, ServiceError::BadConfig { ref key, .. } if key == "sim.scheduler"));
    }

    #[test]
    fn missing_required_key_is_named() {
        let c = load("[store]\nlisten = \"127.0.0.1:0\"\n", &[]).unwrap();
        let e = c.require("store").unwrap_err();
        assert!(matches!(e, ServiceError::BadConfig { ref key, .. } if key == "store.data_dir"));
        assert!(c.require("bench").is_ok());
    }

    #[test]
    fn sim_section_builds_scenario() {
        let c = load(
            "[sim]\nscheduler = \"fcfs\"\nmachines = 4\nanomaly_prob = 0.1\nppe = true\nseeds = 3\n",
            &[],
        )
        .unwrap();
        assert_eq!(c.sim.scenario.scheduler, SchedulerKind::Fcfs);
        assert_eq!(c.sim.scenario.machines, 4);
        assert_eq!(c.sim.scenario.anomaly_prob, 0.1);
        assert!(c.sim.scenario.ppe.is_some());
        assert_eq!(c.sim.seeds, 3);
    }
}
