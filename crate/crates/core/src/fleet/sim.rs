//! Discrete-event simulation of a printer fleet.
//!
//! Virtual time is in minutes. Printers are single-job FIFO machines with a
//! setup phase and a print phase; an anomaly aborts a print part way, puts
//! the printer into maintenance and sends the job back for a reprint. Every
//! scheduling decision is a barrier: the simulation hands the order and the
//! current twin snapshots to a [`TwinLink`] and does not advance until the
//! placements come back.
//!
//! Randomness comes from independent streams (job durations, anomaly draws
//! per print attempt, decentralized pulls), so different schedulers run on
//! identical job sets and identical anomaly outcomes for a given seed.

use alloc::collections::{BinaryHeap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sched::{CentralScheduler, JobKind, JobTicket, Placement, SchedulerKind};
use super::twin::{AnomalyTwin, Facets, MachineStatus, QueueTwin, StateTwin, TwinSnapshot};

/// Production orders created at fixed times.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderSchedule {
    pub orders: u32,
    pub jobs_per_order: u32,
    pub first_at_min: f64,
    pub interval_min: f64,
}

/// A priority batch injected once a share of the NORMAL jobs has finished.
#[derive(Debug, Clone, PartialEq)]
pub struct PpeInjection {
    pub jobs: u32,
    pub jobs_per_order: u32,
    pub print_min: f64,
    /// Fraction of NORMAL jobs finished that triggers the injection.
    pub at_progress: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scheduler: SchedulerKind,
    pub machines: u32,
    pub setup_min: f64,
    pub maintenance_min: f64,
    pub anomaly_prob: f64,
    /// Abort the run when a job needs more reprints than this.
    pub max_reprints: Option<u32>,
    pub normal_min_print: f64,
    pub normal_max_print: f64,
    pub orders: OrderSchedule,
    pub ppe: Option<PpeInjection>,
    /// Dynamic only: PPE jobs jump ahead of NORMAL jobs not yet started.
    pub ppe_priority: bool,
    pub exact_limit: usize,
    pub node_budget: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Dynamic,
            machines: 8,
            setup_min: 5.0,
            maintenance_min: 15.0,
            anomaly_prob: 0.0,
            max_reprints: None,
            normal_min_print: 30.0,
            normal_max_print: 120.0,
            orders: OrderSchedule {
                orders: 20,
                jobs_per_order: 5,
                first_at_min: 0.0,
                interval_min: 45.0,
            },
            ppe: None,
            ppe_priority: true,
            exact_limit: 80,
            node_budget: 2_000_000,
        }
    }
}

impl ScenarioConfig {
    pub fn with_anomalies(mut self, prob: f64) -> Self {
        self.anomaly_prob = prob;
        self
    }

    pub fn with_ppe(mut self) -> Self {
        self.ppe = Some(PpeInjection {
            jobs: 40,
            jobs_per_order: 5,
            print_min: 20.0,
            at_progress: 0.25,
        });
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| Err(SimError::InvalidConfig(what.into()));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if self.machines == 0 {
            return bad("machines must be at least 1");
        }
        if !nonneg(self.setup_min) || !nonneg(self.maintenance_min) {
            return bad("setup and maintenance times must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.anomaly_prob) {
            return bad("anomaly_prob must lie in [0, 1]");
        }
        if self.anomaly_prob >= 1.0 && self.max_reprints.is_none() {
            return bad("anomaly_prob 1 needs max_reprints");
        }
        if !pos(self.normal_min_print) || self.normal_max_print < self.normal_min_print || !self.normal_max_print.is_finite() {
            return bad("print durations must satisfy 0 < min <= max");
        }
        let o = &self.orders;
        if o.jobs_per_order == 0 || !nonneg(o.first_at_min) || !nonneg(o.interval_min) {
            return bad("order schedule needs jobs_per_order >= 1 and non-negative times");
        }
        if let Some(p) = &self.ppe {
            if p.jobs_per_order == 0 || !pos(p.print_min) || !(0.0..=1.0).contains(&p.at_progress) {
                return bad("ppe injection needs jobs_per_order >= 1, print_min > 0, at_progress in [0, 1]");
            }
        }
        Ok(())
    }

    fn normal_jobs(&self) -> u64 {
        self.orders.orders as u64 * self.orders.jobs_per_order as u64
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("job {job} exceeded {limit} reprints")]
    ReprintLimit { job: u64, limit: u32 },
    #[error("scheduler stalled: {0}")]
    Stalled(String),
    #[error("scheduler returned an invalid decision: {0}")]
    BadDecision(String),
}

/// Carries one scheduling round trip between the simulated fleet and a
/// scheduler, which may run in process or as a separate framework app.
pub trait TwinLink {
    /// `fleet` holds every facet of every machine; the link decides what the
    /// scheduler actually gets to see.
    fn decide(&mut self, now_min: f64, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, SimError>;
}

/// In-process link: restricts snapshots to the scheduler's interests and
/// calls it directly.
pub struct LocalLink<S> {
    pub scheduler: S,
    pub facets: Facets,
}

impl<S: CentralScheduler> LocalLink<S> {
    pub fn new(scheduler: S) -> Self {
        let facets = scheduler.kind().interests();
        Self { scheduler, facets }
    }
}

impl<S: CentralScheduler> TwinLink for LocalLink<S> {
    fn decide(&mut self, _now: f64, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, SimError> {
        let view: Vec<TwinSnapshot> = fleet.iter().map(|t| t.restricted(self.facets)).collect();
        self.scheduler
            .place(jobs, &view)
            .map_err(|e| SimError::Stalled(alloc::format!("{e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub id: u64,
    pub kind: JobKind,
    pub print_min: f64,
    pub created_min: f64,
    pub started_min: Option<f64>,
    pub finished_min: Option<f64>,
    pub machine: Option<u32>,
    pub reprints: u32,
}

impl JobRecord {
    pub fn makespan(&self) -> Option<f64> {
        self.finished_min.map(|f| f - self.created_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub scheduler: SchedulerKind,
    pub seed: u64,
    /// Over every job, NORMAL and PPE.
    pub mean_makespan: f64,
    pub max_makespan: f64,
    pub normal_mean_makespan: f64,
    pub ppe_mean_makespan: Option<f64>,
    pub reprints: u64,
    pub end_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub jobs: Vec<JobRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Setup,
    Printing,
    Maintenance,
}

#[derive(Debug, Clone)]
struct Machine {
    phase: Phase,
    phase_end: f64,
    current: Option<u64>,
    /// Sorted by (class, job id); class 0 is priority.
    queue: VecDeque<(u8, u64)>,
    last_anomaly: bool,
    anomalies: u32,
    completed: u32,
    wait_sum: f64,
    waits: u32,
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Order(usize),
    SetupDone(usize),
    PrintDone(usize),
    Abort(usize),
    MaintenanceDone(usize),
}

struct Queued {
    at: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Whether print attempt `attempt` of `job` fails, and at which fraction.
fn anomaly_draw(seed: u64, job: u64, attempt: u32, prob: f64) -> Option<f64> {
    if prob <= 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(job ^ mix(attempt as u64 + 1))));
    let hit = prob >= 1.0 || rng.gen_bool(prob);
    let frac: f64 = rng.gen();
    hit.then_some(frac)
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    seed: u64,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Queued>,
    jobs: Vec<JobRecord>,
    machines: Vec<Machine>,
    orders: Vec<Vec<u64>>,
    pending: VecDeque<usize>,
    link: Option<&'a mut dyn TwinLink>,
    pull_rng: ChaCha8Rng,
    normal_done: u64,
    ppe_injected: bool,
}

impl Sim<'_> {
    fn push(&mut self, at: f64, event: Event) {
        self.seq += 1;
        self.heap.push(Queued { at, seq: self.seq, event });
    }

    fn decentralized(&self) -> bool {
        self.cfg.scheduler == SchedulerKind::Decentralized
    }

    fn job(&self, id: u64) -> &JobRecord {
        &self.jobs[id as usize - 1]
    }

    fn job_mut(&mut self, id: u64) -> &mut JobRecord {
        &mut self.jobs[id as usize - 1]
    }

    fn new_order(&mut self, kind: JobKind, durations: &[f64]) -> usize {
        let mut ids = Vec::with_capacity(durations.len());
        for &d in durations {
            let id = self.jobs.len() as u64 + 1;
            self.jobs.push(JobRecord {
                id,
                kind,
                print_min: d,
                created_min: f64::NAN,
                started_min: None,
                finished_min: None,
                machine: None,
                reprints: 0,
            });
            ids.push(id);
        }
        self.orders.push(ids);
        self.orders.len() - 1
    }

    fn snapshot(&self, m: usize) -> TwinSnapshot {
        let mc = &self.machines[m];
        let remaining = (mc.phase_end - self.now).max(0.0);
        let current_rest = match mc.phase {
            Phase::Idle => 0.0,
            Phase::Setup => remaining + mc.current.map_or(0.0, |j| self.job(j).print_min),
            Phase::Printing | Phase::Maintenance => remaining,
        };
        let work = |&(_, j): &(u8, u64)| self.cfg.setup_min + self.job(j).print_min;
        let queued: f64 = mc.queue.iter().map(work).sum();
        let priority: f64 = mc.queue.iter().filter(|e| e.0 == 0).map(work).sum();
        let status = match mc.phase {
            Phase::Idle => MachineStatus::Idle,
            Phase::Setup => MachineStatus::Setup,
            Phase::Printing => MachineStatus::Printing,
            Phase::Maintenance => MachineStatus::Maintenance,
        };
        TwinSnapshot {
            machine: m as u32,
            at_min: self.now,
            state: Some(StateTwin {
                status,
                current_job: mc.current,
                setup_min: self.cfg.setup_min,
                phase_remaining_min: remaining,
            }),
            queue: Some(QueueTwin {
                queue_length: mc.queue.len() as u32 + u32::from(mc.current.is_some()),
                queue_finish_min: current_rest + queued,
                priority_finish_min: current_rest + priority,
                avg_wait_min: if mc.waits == 0 { 0.0 } else { mc.wait_sum / mc.waits as f64 },
                completed: mc.completed,
            }),
            anomaly: Some(AnomalyTwin {
                last_anomaly: mc.last_anomaly,
                anomalies: mc.anomalies,
                anomaly_prob: self.cfg.anomaly_prob,
            }),
        }
    }

    fn enqueue(&mut self, m: usize, class: u8, job: u64) {
        self.job_mut(job).machine = Some(m as u32);
        let q = &mut self.machines[m].queue;
        let pos = q.partition_point(|e| *e < (class, job));
        q.insert(pos, (class, job));
    }

    fn dispatch(&mut self, ids: &[u64]) -> Result<(), SimError> {
        let tickets: Vec<JobTicket> = ids
            .iter()
            .map(|&id| {
                let j = self.job(id);
                JobTicket {
                    id,
                    kind: j.kind,
                    print_min: j.print_min,
                }
            })
            .collect();
        let fleet: Vec<TwinSnapshot> = (0..self.machines.len()).map(|m| self.snapshot(m)).collect();
        let now = self.now;
        let link = self.link.as_mut().expect("central schedulers have a link");
        let placements = link.decide(now, &tickets, &fleet)?;

        let mut seen: Vec<u64> = placements.iter().map(|p| p.job).collect();
        seen.sort_unstable();
        let mut want = ids.to_vec();
        want.sort_unstable();
        if seen != want {
            return Err(SimError::BadDecision(alloc::format!(
                "placed {seen:?}, expected {want:?}"
            )));
        }
        for p in &placements {
            if p.machine as usize >= self.machines.len() {
                return Err(SimError::BadDecision(alloc::format!("no machine {}", p.machine)));
            }
            let prio = p.priority && self.cfg.ppe_priority && self.job(p.job).kind == JobKind::Ppe;
            self.enqueue(p.machine as usize, if prio { 0 } else { 1 }, p.job);
        }
        for m in 0..self.machines.len() {
            self.try_start(m);
        }
        Ok(())
    }

    fn try_start(&mut self, m: usize) {
        if self.machines[m].phase != Phase::Idle {
            return;
        }
        let Some((_, job)) = self.machines[m].queue.pop_front() else {
            if self.decentralized() {
                self.pull();
            }
            return;
        };
        let now = self.now;
        let setup = self.cfg.setup_min;
        let rec = self.job_mut(job);
        rec.machine = Some(m as u32);
        let first_start = rec.started_min.is_none();
        if first_start {
            rec.started_min = Some(now);
        }
        let wait = now - rec.created_min;
        let mc = &mut self.machines[m];
        if first_start {
            mc.wait_sum += wait;
            mc.waits += 1;
        }
        mc.phase = Phase::Setup;
        mc.current = Some(job);
        mc.phase_end = now + setup;
        self.push(now + setup, Event::SetupDone(m));
    }

    /// Idle machines with empty queues take whole waiting orders, each order
    /// going to a uniformly random one of them.
    fn pull(&mut self) {
        loop {
            if self.pending.is_empty() {
                return;
            }
            let idle: Vec<usize> = (0..self.machines.len())
                .filter(|&m| self.machines[m].phase == Phase::Idle && self.machines[m].queue.is_empty())
                .collect();
            if idle.is_empty() {
                return;
            }
            let m = idle[self.pull_rng.gen_range(0..idle.len())];
            let order = self.pending.pop_front().expect("checked");
            let ids = self.orders[order].clone();
            for id in ids {
                self.job_mut(id).machine = Some(m as u32);
                self.machines[m].queue.push_back((1, id));
            }
            self.try_start(m);
        }
    }

    fn arrive(&mut self, order: usize) -> Result<(), SimError> {
        let now = self.now;
        let ids = self.orders[order].clone();
        for &id in &ids {
            self.job_mut(id).created_min = now;
        }
        if self.decentralized() {
            self.pending.push_back(order);
            self.pull();
            Ok(())
        } else {
            self.dispatch(&ids)
        }
    }

    fn inject_ppe(&mut self) -> Result<(), SimError> {
        let Some(ppe) = self.cfg.ppe.clone() else { return Ok(()) };
        self.ppe_injected = true;
        let mut left = ppe.jobs;
        while left > 0 {
            let n = left.min(ppe.jobs_per_order);
            left -= n;
            let durations: Vec<f64> = (0..n).map(|_| ppe.print_min).collect();
            let order = self.new_order(JobKind::Ppe, &durations);
            self.arrive(order)?;
        }
        Ok(())
    }

    fn maybe_inject(&mut self) -> Result<(), SimError> {
        let Some(ppe) = &self.cfg.ppe else { return Ok(()) };
        if self.ppe_injected {
            return Ok(());
        }
        let threshold = libm_ceil(ppe.at_progress * self.cfg.normal_jobs() as f64) as u64;
        if self.normal_done >= threshold {
            self.inject_ppe()?;
        }
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Order(o) => self.arrive(o)?,
            Event::SetupDone(m) => {
                let job = self.machines[m].current.expect("setup has a job");
                let (print, attempt) = {
                    let j = self.job(job);
                    (j.print_min, j.reprints)
                };
                let now = self.now;
                let mc = &mut self.machines[m];
                mc.phase = Phase::Printing;
                match anomaly_draw(self.seed, job, attempt, self.cfg.anomaly_prob) {
                    Some(frac) => {
                        mc.phase_end = now + frac * print;
                        self.push(now + frac * print, Event::Abort(m));
                    }
                    None => {
                        mc.phase_end = now + print;
                        self.push(now + print, Event::PrintDone(m));
                    }
                }
            }
            Event::PrintDone(m) => {
                let job = self.machines[m].current.take().expect("printing has a job");
                let now = self.now;
                let rec = self.job_mut(job);
                rec.finished_min = Some(now);
                let kind = rec.kind;
                let mc = &mut self.machines[m];
                mc.phase = Phase::Idle;
                mc.completed += 1;
                mc.last_anomaly = false;
                if kind == JobKind::Normal {
                    self.normal_done += 1;
                }
                self.maybe_inject()?;
                self.try_start(m);
            }
            Event::Abort(m) => {
                let job = self.machines[m].current.take().expect("printing has a job");
                let rec = self.job_mut(job);
                rec.reprints += 1;
                let reprints = rec.reprints;
                if let Some(limit) = self.cfg.max_reprints {
                    if reprints > limit {
                        return Err(SimError::ReprintLimit { job, limit });
                    }
                }
                let now = self.now;
                let end = now + self.cfg.maintenance_min;
                let mc = &mut self.machines[m];
                mc.phase = Phase::Maintenance;
                mc.phase_end = end;
                mc.last_anomaly = true;
                mc.anomalies += 1;
                self.push(end, Event::MaintenanceDone(m));
                if self.decentralized() {
                    self.machines[m].queue.push_front((1, job));
                } else {
                    self.dispatch(&[job])?;
                }
            }
            Event::MaintenanceDone(m) => {
                self.machines[m].phase = Phase::Idle;
                self.try_start(m);
            }
        }
        Ok(())
    }
}

// `f64::ceil` lives in std; the values here are small and non-negative.
fn libm_ceil(x: f64) -> f64 {
    let t = x as u64 as f64;
    if t < x {
        t + 1.0
    } else {
        t
    }
}

/// Runs one scenario. `link` must be present for every scheduler except the
/// decentralized one.
pub fn run_scenario<'a>(cfg: &'a ScenarioConfig, seed: u64, link: Option<&'a mut dyn TwinLink>) -> Result<SimReport, SimError> {
    cfg.validate()?;
    if cfg.scheduler != SchedulerKind::Decentralized && link.is_none() {
        return Err(SimError::InvalidConfig(alloc::format!(
            "scheduler {} needs a twin link",
            cfg.scheduler
        )));
    }
    let mut job_rng = ChaCha8Rng::seed_from_u64(seed);
    job_rng.set_stream(1);
    let mut pull_rng = ChaCha8Rng::seed_from_u64(seed);
    pull_rng.set_stream(3);

    let mut sim = Sim {
        cfg,
        seed,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        jobs: Vec::new(),
        machines: (0..cfg.machines)
            .map(|_| Machine {
                phase: Phase::Idle,
                phase_end: 0.0,
                current: None,
                queue: VecDeque::new(),
                last_anomaly: false,
                anomalies: 0,
                completed: 0,
                wait_sum: 0.0,
                waits: 0,
            })
            .collect(),
        orders: Vec::new(),
        pending: VecDeque::new(),
        link,
        pull_rng,
        normal_done: 0,
        ppe_injected: false,
    };
    for i in 0..cfg.orders.orders {
        let durations: Vec<f64> = (0..cfg.orders.jobs_per_order)
            .map(|_| job_rng.gen_range(cfg.normal_min_print..=cfg.normal_max_print))
            .collect();
        let order = sim.new_order(JobKind::Normal, &durations);
        let at = cfg.orders.first_at_min + i as f64 * cfg.orders.interval_min;
        sim.push(at, Event::Order(order));
    }
    sim.maybe_inject()?;
    while let Some(Queued { at, event, .. }) = sim.heap.pop() {
        sim.now = at;
        sim.handle(event)?;
    }

    let end = sim.now;
    let summary = summarize(cfg.scheduler, seed, &sim.jobs, end);
    Ok(SimReport {
        jobs: sim.jobs,
        summary,
    })
}

/// Each run's mean makespan divided by the largest per-scheduler average
/// of mean makespans across all the runs given.
pub fn normalized_makespans(runs: &[RunSummary]) -> Vec<f64> {
    let mut worst = 0.0f64;
    for kind in SchedulerKind::ALL {
        if let Some(m) = mean(runs.iter().filter(|r| r.scheduler == kind).map(|r| r.mean_makespan)) {
            worst = worst.max(m);
        }
    }
    runs.iter()
        .map(|r| if worst > 0.0 { r.mean_makespan / worst } else { 0.0 })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0u64), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize(scheduler: SchedulerKind, seed: u64, jobs: &[JobRecord], end_min: f64) -> RunSummary {
    let spans = |kind: Option<JobKind>| {
        jobs.iter()
            .filter(move |j| kind.is_none_or(|k| j.kind == k))
            .filter_map(JobRecord::makespan)
    };
    RunSummary {
        scheduler,
        seed,
        mean_makespan: mean(spans(None)).unwrap_or(0.0),
        max_makespan: spans(None).fold(0.0, f64::max),
        normal_mean_makespan: mean(spans(Some(JobKind::Normal))).unwrap_or(0.0),
        ppe_mean_makespan: mean(spans(Some(JobKind::Ppe))),
        reprints: jobs.iter().map(|j| j.reprints as u64).sum(),
        end_min,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::sched::{Baseline, Dynamic, Fcfs};
    use alloc::boxed::Box;

    fn run(cfg: &ScenarioConfig, seed: u64) -> Result<SimReport, SimError> {
        let mut link: Option<Box<dyn TwinLink>> = match cfg.scheduler {
            SchedulerKind::Decentralized => None,
            SchedulerKind::Baseline => Some(Box::new(LocalLink::new(Baseline::default()))),
            SchedulerKind::Fcfs => Some(Box::new(LocalLink::new(Fcfs))),
            SchedulerKind::Dynamic => Some(Box::new(LocalLink::new(Dynamic {
                priority: cfg.ppe_priority,
                ..Dynamic::default()
            }))),
        };
        run_scenario(cfg, seed, link.as_deref_mut().map(|l| l as &mut dyn TwinLink))
    }

    fn cfg(kind: SchedulerKind) -> ScenarioConfig {
        ScenarioConfig {
            scheduler: kind,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn every_job_finishes_once_without_anomalies() {
        for kind in SchedulerKind::ALL {
            let r = run(&cfg(kind), 1).unwrap();
            assert_eq!(r.jobs.len(), 100);
            assert!(r.jobs.iter().all(|j| j.finished_min.is_some() && j.reprints == 0));
            assert_eq!(r.summary.reprints, 0);
            for j in &r.jobs {
                let (c, s, f) = (j.created_min, j.started_min.unwrap(), j.finished_min.unwrap());
                assert!(c <= s && s <= f);
                assert!(f - s >= j.print_min + 5.0 - 1e-9);
            }
        }
    }

    #[test]
    fn conservation_under_anomalies_and_ppe() {
        for kind in SchedulerKind::ALL {
            let c = cfg(kind).with_anomalies(0.3).with_ppe();
            let r = run(&c, 4).unwrap();
            assert_eq!(r.jobs.len(), 140);
            assert!(r.jobs.iter().all(|j| j.finished_min.is_some()));
            assert!(r.summary.reprints > 0);
            assert_eq!(r.jobs.iter().filter(|j| j.kind == JobKind::Ppe).count(), 40);
        }
    }

    #[test]
    fn single_machine_makes_schedulers_equal() {
        for anomaly in [0.0, 0.2] {
            let mut base = None;
            for kind in SchedulerKind::ALL {
                let c = ScenarioConfig {
                    machines: 1,
                    ..cfg(kind).with_anomalies(anomaly)
                };
                let spans: Vec<Option<f64>> = run(&c, 9).unwrap().jobs.iter().map(JobRecord::makespan).collect();
                match &base {
                    None => base = Some(spans),
                    Some(b) => assert_eq!(b, &spans, "{kind} anomaly {anomaly}"),
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in SchedulerKind::ALL {
            let c = cfg(kind).with_anomalies(0.1).with_ppe();
            assert_eq!(run(&c, 17).unwrap(), run(&c, 17).unwrap());
        }
    }

    #[test]
    fn zero_anomaly_probability_equals_no_anomaly_model() {
        let a = run(&cfg(SchedulerKind::Fcfs), 5).unwrap();
        let b = run(&cfg(SchedulerKind::Fcfs).with_anomalies(0.0), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn certain_anomalies_hit_the_cap() {
        for kind in SchedulerKind::ALL {
            let c = ScenarioConfig {
                max_reprints: Some(3),
                ..cfg(kind).with_anomalies(1.0)
            };
            assert!(matches!(run(&c, 1), Err(SimError::ReprintLimit { limit: 3, .. })));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = ScenarioConfig {
            machines: 0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(run(&c, 0), Err(SimError::InvalidConfig(_))));
        let c = ScenarioConfig::default().with_anomalies(1.0);
        assert!(matches!(run(&c, 0), Err(SimError::InvalidConfig(_))));
        assert!(matches!(
            run_scenario(&cfg(SchedulerKind::Fcfs), 0, None),
            Err(SimError::InvalidConfig(_))
        ));
    }

    /// Independent straight-line model of the decentralized fleet: orders
    /// arrive at fixed times, an order waits until some machine is idle with
    /// an empty queue, then a uniformly random such machine (same random
    /// stream) runs the whole order back to back.
    #[test]
    fn decentralized_matches_straight_line_oracle() {
        for seed in 0..10 {
            let c = ScenarioConfig {
                machines: 3,
                ..cfg(SchedulerKind::Decentralized)
            };
            let r = run(&c, seed).unwrap();

            let mut job_rng = ChaCha8Rng::seed_from_u64(seed);
            job_rng.set_stream(1);
            let mut pick = ChaCha8Rng::seed_from_u64(seed);
            pick.set_stream(3);
            let orders: Vec<(f64, Vec<f64>)> = (0..c.orders.orders)
                .map(|i| {
                    let d = (0..c.orders.jobs_per_order)
                        .map(|_| job_rng.gen_range(c.normal_min_print..=c.normal_max_print))
                        .collect();
                    (i as f64 * c.orders.interval_min, d)
                })
                .collect();
            let mut free_at = [0.0f64; 3];
            let mut finish = Vec::new();
            for (arrival, durations) in &orders {
                // the order is taken at the first instant some machine is free
                let t = free_at.iter().copied().fold(f64::INFINITY, f64::min).max(*arrival);
                let idle: Vec<usize> = (0..3).filter(|&m| free_at[m] <= t).collect();
                let m = idle[pick.gen_range(0..idle.len())];
                let mut clock = t;
                for d in durations {
                    clock += c.setup_min + d;
                    finish.push(clock - arrival);
                }
                free_at[m] = clock;
            }
            let got: Vec<f64> = r.jobs.iter().map(|j| j.makespan().unwrap()).collect();
            assert_eq!(got.len(), finish.len());
            for (g, w) in got.iter().zip(&finish) {
                assert!((g - w).abs() < 1e-6, "seed {seed}: {got:?} vs {finish:?}");
            }
        }
    }

    #[test]
    fn ppe_priority_does_not_cost_total_makespan() {
        let with = cfg(SchedulerKind::Dynamic).with_ppe();
        let without = ScenarioConfig {
            ppe_priority: false,
            ..with.clone()
        };
        let total = |c: &ScenarioConfig| (0..10).map(|s| run(c, s).unwrap().summary.mean_makespan).sum::<f64>();
        assert!(total(&with) <= 1.05 * total(&without));
    }

    #[test]
    fn normalization_divides_by_worst_scheduler() {
        let runs: Vec<RunSummary> = SchedulerKind::ALL
            .into_iter()
            .flat_map(|k| [0, 1].map(|s| run(&cfg(k), s).unwrap().summary))
            .collect();
        let n = normalized_makespans(&runs);
        let max_avg = SchedulerKind::ALL
            .into_iter()
            .map(|k| {
                let v: Vec<f64> = runs.iter().filter(|r| r.scheduler == k).map(|r| r.mean_makespan).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .fold(0.0, f64::max);
        for (r, x) in runs.iter().zip(&n) {
            assert!((x - r.mean_makespan / max_avg).abs() < 1e-12);
        }
    }

    #[test]
    fn ppe_injected_after_quarter_progress() {
        let r = run(&cfg(SchedulerKind::Fcfs).with_ppe(), 2).unwrap();
        let first_ppe = r
            .jobs
            .iter()
            .filter(|j| j.kind == JobKind::Ppe)
            .map(|j| j.created_min)
            .fold(f64::INFINITY, f64::min);
        let mut normal_finishes: Vec<f64> = r
            .jobs
            .iter()
            .filter(|j| j.kind == JobKind::Normal)
            .map(|j| j.finished_min.unwrap())
            .collect();
        normal_finishes.sort_by(f64::total_cmp);
        assert_eq!(first_ppe, normal_finishes[24]);
    }
}
