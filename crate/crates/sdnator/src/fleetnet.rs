//! The fleet simulator wired through the framework.
//!
//! Three applications take part in every scheduling round:
//!
//! - the machine assets app (the simulator side of [`NetLink`]) publishes the
//!   raw state of each machine on `fleet.machine.<m>.raw` and the pending jobs
//!   on `fleet.order`;
//! - the twin app turns raw state into one record per facet on
//!   `fleet.twin.<m>.<facet>`. Facets no scheduler asked for are refused by
//!   the client's assignment gate, so they never reach the bus;
//! - the scheduler app gathers the twins of a round, runs its algorithm and
//!   answers on `fleet.decision`.
//!
//! The simulator blocks on each decision, so virtual time only advances
//! past a decision point once the scheduler has answered.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use sdnator_core::fleet::{
    central_scheduler, CentralScheduler, Dynamic, Facet, Facets, JobKind, JobTicket, LocalLink, Placement,
    ScenarioConfig, SimError, SimReport, TwinLink, TwinSnapshot,
};
use sdnator_core::manifest::{AppId, AppIdentity, Manifest, Roles, WriteFlags};
use sdnator_core::wire::{Envelope, Reader, WireError, Writer};
use sdnator_core::{DataKey, KeyPattern};

use crate::due::{new_instance_id, DueConfig, DueError, Observer, Session, WriteOutcome};

pub const ASSETS_APP: &str = "fleet-assets";
pub const TWIN_APP: &str = "fleet-twins";
pub const SCHEDULER_APP: &str = "fleet-scheduler";

fn key(text: &str) -> DataKey {
    DataKey::parse(text).expect("fleet key")
}

fn pattern(text: &str) -> KeyPattern {
    KeyPattern::parse(text).expect("fleet pattern")
}

fn raw_key(machine: u32) -> DataKey {
    key(&format!("fleet.machine.{machine}.raw"))
}

fn twin_key(machine: u32, facet: Facet) -> DataKey {
    key(&format!("fleet.twin.{machine}.{}", facet.as_str()))
}

fn order_key() -> DataKey {
    key("fleet.order")
}

fn decision_key() -> DataKey {
    key("fleet.decision")
}

/// The scheduler a scenario asks for, configured from the scenario.
pub fn scheduler_for(cfg: &ScenarioConfig) -> Option<Box<dyn CentralScheduler + Send>> {
    central_scheduler(
        cfg.scheduler,
        Dynamic {
            exact_limit: cfg.exact_limit,
            node_budget: cfg.node_budget,
            priority: cfg.ppe_priority,
            ..Dynamic::default()
        },
    )
}

/// Runs a scenario with the scheduler called in process.
pub fn run_local(cfg: &ScenarioConfig, seed: u64) -> Result<SimReport, SimError> {
    match scheduler_for(cfg) {
        None => sdnator_core::fleet::run_scenario(cfg, seed, None),
        Some(s) => {
            let mut link = LocalLink::new(s);
            sdnator_core::fleet::run_scenario(cfg, seed, Some(&mut link))
        }
    }
}

/// Runs a scenario with twins and scheduler as framework apps. The
/// decentralized scheduler has nothing to consult, so it runs without them.
pub fn run_networked(cfg: &ScenarioConfig, seed: u64, due: &DueConfig, stall: Duration) -> Result<SimReport, FleetError> {
    let Some(scheduler) = scheduler_for(cfg) else {
        return Ok(sdnator_core::fleet::run_scenario(cfg, seed, None)?);
    };
    let sched = SchedulerApp::start(scheduler, cfg.machines, due.clone())?;
    let twins = TwinApp::start(cfg.machines, due.clone())?;
    let mut link = NetLink::start(cfg.machines, due.clone(), stall)?;
    link.wait_ready(cfg.scheduler.interests(), &twins, &sched, stall)?;
    let report = sdnator_core::fleet::run_scenario(cfg, seed, Some(&mut link));
    link.close();
    twins.close();
    sched.close();
    Ok(report?)
}

#[derive(Debug, thiserror::Error)]
pub enum FleetError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Due(#[from] DueError),
    #[error("fleet apps did not get their assignments within {0:?}")]
    NotAssigned(Duration),
}

fn session(app: &str, roles: Roles, manifest: Manifest, due: DueConfig) -> Result<Session, DueError> {
    let identity = AppIdentity {
        app_id: AppId::new(app).expect("fleet app id"),
        instance: new_instance_id(),
        roles,
    };
    Session::init(identity, manifest, due)
}

fn encode_order(round: u64, now_min: f64, jobs: &[JobTicket]) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut w = Writer::new(&mut buf);
    w.u64(round).f64(now_min).u32(jobs.len() as u32);
    for j in jobs {
        w.u64(j.id).u8(matches!(j.kind, JobKind::Ppe) as u8).f64(j.print_min);
    }
    buf
}

fn decode_order(bytes: &[u8]) -> Result<(u64, Vec<JobTicket>), WireError> {
    let mut r = Reader::new(bytes);
    let round = r.u64()?;
    let _now = r.f64()?;
    let n = r.u32()?;
    let mut jobs = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let id = r.u64()?;
        let kind = match r.u8()? {
            0 => JobKind::Normal,
            1 => JobKind::Ppe,
            b => return Err(WireError::BadFlag(b)),
        };
        jobs.push(JobTicket {
            id,
            kind,
            print_min: r.f64()?,
        });
    }
    r.finish()?;
    Ok((round, jobs))
}

fn encode_raw(round: u64, snap: &TwinSnapshot) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut w = Writer::new(&mut buf);
    w.u64(round);
    for facet in Facet::ALL {
        match snap.encode_facet(facet) {
            Some(b) => w.bool(true).bytes(&b),
            None => w.bool(false),
        };
    }
    buf
}

fn encode_decision(round: u64, result: &Result<Vec<Placement>, String>) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut w = Writer::new(&mut buf);
    w.u64(round);
    match result {
        Ok(ps) => {
            w.bool(true).u32(ps.len() as u32);
            for p in ps {
                w.u64(p.job).u32(p.machine).bool(p.priority);
            }
        }
        Err(msg) => {
            w.bool(false).str(msg);
        }
    }
    buf
}

fn decode_decision(bytes: &[u8]) -> Result<(u64, Result<Vec<Placement>, String>), WireError> {
    let mut r = Reader::new(bytes);
    let round = r.u64()?;
    let result = if r.bool()? {
        let n = r.u32()?;
        let mut ps = Vec::with_capacity(n as usize);
        for _ in 0..n {
            ps.push(Placement {
                job: r.u64()?,
                machine: r.u32()?,
                priority: r.bool()?,
            });
        }
        Ok(ps)
    } else {
        Err(r.string()?)
    };
    r.finish()?;
    Ok((round, result))
}

type Decisions = Arc<(Mutex<HashMap<u64, Result<Vec<Placement>, String>>>, Condvar)>;

/// The machine assets app: the simulator's side of a networked round.
pub struct NetLink {
    session: Session,
    machines: u32,
    round: u64,
    decisions: Decisions,
    stall: Duration,
    _observer: Observer,
}

impl NetLink {
    pub fn start(machines: u32, due: DueConfig, stall: Duration) -> Result<Self, DueError> {
        let mut manifest = Manifest::new()
            .interest(pattern("fleet.decision"), None)
            .capability(order_key(), None, false);
        for m in 0..machines {
            manifest = manifest.capability(raw_key(m), None, false);
        }
        let session = session(ASSETS_APP, Roles::BOTH, manifest, due)?;
        let decisions: Decisions = Arc::new((Mutex::new(HashMap::new()), Condvar::new()));
        let observer = session.observe(pattern("fleet.decision"))?;
        let d = decisions.clone();
        observer.on_data(move |env: &Envelope| {
            if let Ok((round, result)) = decode_decision(&env.value) {
                d.0.lock().unwrap().insert(round, result);
                d.1.notify_all();
            }
        });
        Ok(Self {
            session,
            machines,
            round: 0,
            decisions,
            stall,
            _observer: observer,
        })
    }

    /// Waits until every key of the round trip has been assigned.
    pub fn wait_ready(&self, facets: Facets, twins: &TwinApp, sched: &SchedulerApp, timeout: Duration) -> Result<(), FleetError> {
        let deadline = Instant::now() + timeout;
        let left = || deadline.saturating_duration_since(Instant::now());
        let mut ok = self.session.wait_assigned(&order_key(), left())
            && sched.session.wait_assigned(&decision_key(), left());
        for m in 0..self.machines {
            ok = ok && self.session.wait_assigned(&raw_key(m), left());
            for f in facets.iter() {
                ok = ok && twins.session.wait_assigned(&twin_key(m, f), left());
            }
        }
        if ok {
            Ok(())
        } else {
            Err(FleetError::NotAssigned(timeout))
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn close(&self) {
        self.session.close();
    }

    fn send(&self, key: &DataKey, value: &[u8]) -> Result<(), SimError> {
        match self.session.write(key, value, WriteFlags::PUB_ONLY) {
            Ok(WriteOutcome::Accepted) => Ok(()),
            Ok(other) => Err(SimError::Stalled(format!("write to {key} was {other:?}"))),
            Err(e) => Err(SimError::Stalled(format!("write to {key}: {e}"))),
        }
    }
}

impl TwinLink for NetLink {
    fn decide(&mut self, now_min: f64, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, SimError> {
        self.round += 1;
        let round = self.round;
        for snap in fleet {
            self.send(&raw_key(snap.machine), &encode_raw(round, snap))?;
        }
        self.send(&order_key(), &encode_order(round, now_min, jobs))?;
        self.session
            .flush()
            .map_err(|e| SimError::Stalled(format!("flush: {e}")))?;

        let (lock, cv) = &*self.decisions;
        let deadline = Instant::now() + self.stall;
        let mut d = lock.lock().unwrap();
        loop {
            if let Some(result) = d.remove(&round) {
                return result.map_err(SimError::Stalled);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(SimError::Stalled(format!(
                    "no decision for round {round} within {:?}",
                    self.stall
                )));
            }
            d = cv.wait_timeout(d, left).unwrap().0;
        }
    }
}

/// Digital twins: raw machine state in, one record per facet out.
pub struct TwinApp {
    session: Session,
    _observer: Observer,
}

impl TwinApp {
    pub fn start(machines: u32, due: DueConfig) -> Result<Self, DueError> {
        let mut manifest = Manifest::new().interest(pattern("fleet.machine.*.raw"), None);
        for m in 0..machines {
            for f in Facet::ALL {
                manifest = manifest.capability(twin_key(m, f), None, false);
            }
        }
        let session = session(TWIN_APP, Roles::BOTH, manifest, due)?;
        let observer = session.observe(pattern("fleet.machine.*.raw"))?;
        let s = session.clone();
        observer.on_data(move |env: &Envelope| {
            let Some(machine) = env.key.segments().nth(2).and_then(|m| m.parse::<u32>().ok()) else {
                return;
            };
            let _ = publish_twins(&s, machine, &env.value);
        });
        Ok(Self {
            session,
            _observer: observer,
        })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn close(&self) {
        self.session.close();
    }
}

fn publish_twins(s: &Session, machine: u32, raw: &[u8]) -> Result<(), WireError> {
    let mut r = Reader::new(raw);
    let round = r.u64()?;
    for facet in Facet::ALL {
        if !r.bool()? {
            continue;
        }
        let body = r.bytes()?;
        let mut buf = Vec::with_capacity(body.len() + 8);
        Writer::new(&mut buf).u64(round).bytes(body);
        // Unassigned facets come back Rejected and are simply not produced.
        let _ = s.write(&twin_key(machine, facet), &buf, WriteFlags::PUB_ONLY);
    }
    let _ = s.flush();
    Ok(())
}

#[derive(Default)]
struct Round {
    jobs: Option<Vec<JobTicket>>,
    twins: HashMap<u32, TwinSnapshot>,
    records: usize,
}

struct Gather {
    scheduler: Box<dyn CentralScheduler + Send>,
    rounds: HashMap<u64, Round>,
    expected: usize,
}

/// A central scheduler running as its own application.
pub struct SchedulerApp {
    session: Session,
    _observers: Vec<Observer>,
}

impl SchedulerApp {
    pub fn start(scheduler: Box<dyn CentralScheduler + Send>, machines: u32, due: DueConfig) -> Result<Self, DueError> {
        let facets = scheduler.kind().interests();
        let mut manifest = Manifest::new()
            .interest(pattern("fleet.order"), None)
            .capability(decision_key(), None, false);
        for f in facets.iter() {
            manifest = manifest.interest(pattern(&format!("fleet.twin.*.{}", f.as_str())), None);
        }
        let session = session(SCHEDULER_APP, Roles::BOTH, manifest, due)?;
        let gather = Arc::new(Mutex::new(Gather {
            scheduler,
            rounds: HashMap::new(),
            expected: machines as usize * facets.iter().count(),
        }));
        let mut observers = Vec::new();

        let order = session.observe(pattern("fleet.order"))?;
        let (g, s) = (gather.clone(), session.clone());
        order.on_data(move |env: &Envelope| {
            if let Ok((round, jobs)) = decode_order(&env.value) {
                let mut g = g.lock().unwrap();
                g.rounds.entry(round).or_default().jobs = Some(jobs);
                try_decide(&mut g, round, &s);
            }
        });
        observers.push(order);

        for f in facets.iter() {
            let obs = session.observe(pattern(&format!("fleet.twin.*.{}", f.as_str())))?;
            let (g, s) = (gather.clone(), session.clone());
            obs.on_data(move |env: &Envelope| {
                let Some(machine) = env.key.segments().nth(2).and_then(|m| m.parse::<u32>().ok()) else {
                    return;
                };
                let mut r = Reader::new(&env.value);
                let (Ok(round), Ok(body)) = (r.u64(), r.bytes()) else {
                    return;
                };
                let mut g = g.lock().unwrap();
                let entry = g.rounds.entry(round).or_default();
                let snap = entry
                    .twins
                    .entry(machine)
                    .or_insert_with(|| TwinSnapshot::empty(machine, 0.0));
                if snap.merge_facet(f, body).is_ok() {
                    entry.records += 1;
                }
                try_decide(&mut g, round, &s);
            });
            observers.push(obs);
        }
        Ok(Self {
            session,
            _observers: observers,
        })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn close(&self) {
        self.session.close();
    }
}

fn try_decide(g: &mut Gather, round: u64, s: &Session) {
    let ready = g
        .rounds
        .get(&round)
        .is_some_and(|r| r.jobs.is_some() && r.records >= g.expected);
    if !ready {
        return;
    }
    let r = g.rounds.remove(&round).expect("round present");
    let mut view: Vec<TwinSnapshot> = r.twins.into_values().collect();
    view.sort_by_key(|t| t.machine);
    let jobs = r.jobs.expect("jobs present");
    let result = g.scheduler.place(&jobs, &view).map_err(|e| e.to_string());
    let _ = s.write(&decision_key(), &encode_decision(round, &result), WriteFlags::PUB_ONLY);
    let _ = s.flush();
}

/// Column set of the per-job report.
pub const JOB_COLUMNS: [&str; 9] = [
    "seed", "id", "kind", "created_min", "started_min", "finished_min", "machine", "reprints", "makespan_min",
];

/// Column set of the per-run summary.
pub const SUMMARY_COLUMNS: [&str; 9] = [
    "scheduler",
    "seed",
    "mean_makespan_min",
    "max_makespan_min",
    "normalized_makespan",
    "normal_mean_makespan_min",
    "ppe_mean_makespan_min",
    "reprints",
    "end_min",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn write_jobs_csv<W: std::io::Write>(reports: &[SimReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(JOB_COLUMNS)?;
    for r in reports {
        for j in &r.jobs {
            w.write_record([
                r.summary.seed.to_string(),
                j.id.to_string(),
                j.kind.as_str().to_string(),
                format!("{:.4}", j.created_min),
                opt(j.started_min),
                opt(j.finished_min),
                j.machine.map(|m| m.to_string()).unwrap_or_default(),
                j.reprints.to_string(),
                opt(j.makespan()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per run; normalization is over all the runs given.
pub fn write_summary_csv<W: std::io::Write>(reports: &[SimReport], out: W) -> Result<(), csv::Error> {
    let runs: Vec<_> = reports.iter().map(|r| r.summary.clone()).collect();
    let norm = sdnator_core::fleet::normalized_makespans(&runs);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for (s, n) in runs.iter().zip(norm) {
        w.write_record([
            s.scheduler.as_str().to_string(),
            s.seed.to_string(),
            format!("{:.4}", s.mean_makespan),
            format!("{:.4}", s.max_makespan),
            format!("{n:.4}"),
            format!("{:.4}", s.normal_mean_makespan),
            opt(s.ppe_mean_makespan),
            s.reprints.to_string(),
            format!("{:.4}", s.end_min),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_decision_round_trip() {
        let jobs = vec![
            JobTicket {
                id: 3,
                kind: JobKind::Normal,
                print_min: 41.5,
            },
            JobTicket {
                id: 9,
                kind: JobKind::Ppe,
                print_min: 20.0,
            },
        ];
        let (round, back) = decode_order(&encode_order(7, 12.0, &jobs)).unwrap();
        assert_eq!(round, 7);
        assert_eq!(back, jobs);

        let ps = Ok(vec![Placement {
            job: 3,
            machine: 1,
            priority: true,
        }]);
        assert_eq!(decode_decision(&encode_decision(2, &ps)).unwrap(), (2, ps));
        let err: Result<Vec<Placement>, String> = Err("no twins".into());
        assert_eq!(decode_decision(&encode_decision(5, &err)).unwrap(), (5, err));
    }
}
