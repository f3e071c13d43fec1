//! Central schedulers. Each one places the jobs of a production order onto
//! machines using only the twin snapshots it subscribed to.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::solve::{lpt, solve_exact, Solution};
use super::twin::{Facet, Facets, TwinSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchedulerKind {
    Decentralized,
    Baseline,
    Fcfs,
    Dynamic,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Decentralized,
        SchedulerKind::Baseline,
        SchedulerKind::Fcfs,
        SchedulerKind::Dynamic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Decentralized => "decentralized",
            SchedulerKind::Baseline => "baseline",
            SchedulerKind::Fcfs => "fcfs",
            SchedulerKind::Dynamic => "dynamic",
        }
    }

    /// Twin facets the scheduler consumes.
    pub fn interests(self) -> Facets {
        match self {
            SchedulerKind::Decentralized => Facets::NONE,
            SchedulerKind::Baseline => Facets {
                state: true,
                ..Facets::NONE
            },
            SchedulerKind::Fcfs => Facets {
                state: true,
                queue: true,
                anomaly: false,
            },
            SchedulerKind::Dynamic => Facets {
                state: true,
                queue: true,
                anomaly: true,
            },
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown scheduler {0:?}: expected decentralized, baseline, fcfs or dynamic")]
pub struct UnknownScheduler(pub String);

impl FromStr for SchedulerKind {
    type Err = UnknownScheduler;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownScheduler(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JobKind {
    Normal,
    Ppe,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Normal => "NORMAL",
            JobKind::Ppe => "PPE",
        }
    }
}

/// A job as the scheduler sees it in a production order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobTicket {
    pub id: u64,
    pub kind: JobKind,
    pub print_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub job: u64,
    pub machine: u32,
    /// Enter the machine's queue ahead of every NORMAL job not yet started.
    pub priority: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("no twin snapshots available")]
    NoMachines,
    #[error("machine {machine} has no {facet} twin")]
    MissingFacet { machine: u32, facet: Facet },
}

pub trait CentralScheduler {
    fn kind(&self) -> SchedulerKind;
    fn place(&mut self, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, ScheduleError>;
}

impl<S: CentralScheduler + ?Sized> CentralScheduler for alloc::boxed::Box<S> {
    fn kind(&self) -> SchedulerKind {
        (**self).kind()
    }

    fn place(&mut self, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, ScheduleError> {
        (**self).place(jobs, fleet)
    }
}

fn machine_ids(fleet: &[TwinSnapshot], facet: Facet, has: impl Fn(&TwinSnapshot) -> bool) -> Result<Vec<u32>, ScheduleError> {
    if fleet.is_empty() {
        return Err(ScheduleError::NoMachines);
    }
    let mut ids = Vec::with_capacity(fleet.len());
    for t in fleet {
        if !has(t) {
            return Err(ScheduleError::MissingFacet { machine: t.machine, facet });
        }
        ids.push(t.machine);
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Round robin over machine ids, ignoring machine state.
#[derive(Debug, Clone, Default)]
pub struct Baseline {
    next: usize,
}

impl CentralScheduler for Baseline {
    fn kind(&self) -> SchedulerKind {
        SchedulerKind::Baseline
    }

    fn place(&mut self, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, ScheduleError> {
        let ids = machine_ids(fleet, Facet::State, |t| t.state.is_some())?;
        Ok(jobs
            .iter()
            .map(|j| {
                let machine = ids[self.next % ids.len()];
                self.next = (self.next + 1) % ids.len();
                Placement {
                    job: j.id,
                    machine,
                    priority: false,
                }
            })
            .collect())
    }
}

/// Each job in arrival order to the machine with the shortest queue
/// (counting the job in progress), ties to the lowest id.
#[derive(Debug, Clone, Default)]
pub struct Fcfs;

impl CentralScheduler for Fcfs {
    fn kind(&self) -> SchedulerKind {
        SchedulerKind::Fcfs
    }

    fn place(&mut self, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, ScheduleError> {
        machine_ids(fleet, Facet::Queue, |t| t.queue.is_some())?;
        let mut lens: Vec<(u32, u32)> = fleet
            .iter()
            .map(|t| (t.machine, t.queue.expect("checked").queue_length))
            .collect();
        lens.sort_unstable();
        Ok(jobs
            .iter()
            .map(|j| {
                let slot = (0..lens.len())
                    .min_by_key(|&i| (lens[i].1, lens[i].0))
                    .expect("non-empty fleet");
                lens[slot].1 += 1;
                Placement {
                    job: j.id,
                    machine: lens[slot].0,
                    priority: false,
                }
            })
            .collect())
    }
}

/// Counters over the optimizations a [`Dynamic`] scheduler ran.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub exact: u64,
    pub heuristic: u64,
    /// Largest reported gap between a returned makespan and its lower bound.
    pub max_gap_min: f64,
}

/// Expected-makespan minimization over the twin-reported queue finish times.
#[derive(Debug, Clone)]
pub struct Dynamic {
    /// Exact search when jobs × machines is at most this.
    pub exact_limit: usize,
    pub node_budget: u64,
    /// Put PPE jobs ahead of not-yet-started NORMAL jobs.
    pub priority: bool,
    pub stats: SolveStats,
}

impl Default for Dynamic {
    fn default() -> Self {
        Self {
            exact_limit: 80,
            node_budget: 2_000_000,
            priority: true,
            stats: SolveStats::default(),
        }
    }
}

impl Dynamic {
    fn solve(&mut self, ready: &[f64], cost: &[Vec<f64>]) -> Solution {
        let s = if cost.len() * ready.len() <= self.exact_limit {
            solve_exact(ready, cost, self.node_budget)
        } else {
            lpt(ready, cost)
        };
        if s.proven_optimal {
            self.stats.exact += 1;
        } else {
            self.stats.heuristic += 1;
        }
        self.stats.max_gap_min = self.stats.max_gap_min.max(s.gap());
        s
    }
}

impl CentralScheduler for Dynamic {
    fn kind(&self) -> SchedulerKind {
        SchedulerKind::Dynamic
    }

    fn place(&mut self, jobs: &[JobTicket], fleet: &[TwinSnapshot]) -> Result<Vec<Placement>, ScheduleError> {
        machine_ids(fleet, Facet::State, |t| t.state.is_some())?;
        machine_ids(fleet, Facet::Queue, |t| t.queue.is_some())?;
        machine_ids(fleet, Facet::Anomaly, |t| t.anomaly.is_some())?;
        let mut machines: Vec<&TwinSnapshot> = fleet.iter().collect();
        machines.sort_by_key(|t| t.machine);

        // Expected duration under geometric reprints.
        let cost_of = |j: &JobTicket| -> Vec<f64> {
            machines
                .iter()
                .map(|t| {
                    let p = t.anomaly.expect("checked").anomaly_prob.clamp(0.0, 0.99);
                    (t.state.expect("checked").setup_min + j.print_min) / (1.0 - p)
                })
                .collect()
        };
        let (urgent, normal): (Vec<&JobTicket>, Vec<&JobTicket>) =
            jobs.iter().partition(|j| self.priority && j.kind == JobKind::Ppe);

        let mut out = Vec::with_capacity(jobs.len());
        let mut added = alloc::vec![0.0; machines.len()];
        if !urgent.is_empty() {
            let ready: Vec<f64> = machines
                .iter()
                .map(|t| t.queue.expect("checked").priority_finish_min)
                .collect();
            let cost: Vec<Vec<f64>> = urgent.iter().map(|j| cost_of(j)).collect();
            let s = self.solve(&ready, &cost);
            for (j, &m) in urgent.iter().zip(&s.assign) {
                added[m] += cost[out.len()][m];
                out.push(Placement {
                    job: j.id,
                    machine: machines[m].machine,
                    priority: true,
                });
            }
        }
        if !normal.is_empty() {
            let ready: Vec<f64> = machines
                .iter()
                .zip(&added)
                .map(|(t, a)| t.queue.expect("checked").queue_finish_min + a)
                .collect();
            let cost: Vec<Vec<f64>> = normal.iter().map(|j| cost_of(j)).collect();
            let s = self.solve(&ready, &cost);
            for (j, &m) in normal.iter().zip(&s.assign) {
                out.push(Placement {
                    job: j.id,
                    machine: machines[m].machine,
                    priority: false,
                });
            }
        }
        Ok(out)
    }
}

pub fn central_scheduler(kind: SchedulerKind, dynamic: Dynamic) -> Option<alloc::boxed::Box<dyn CentralScheduler + Send>> {
    match kind {
        SchedulerKind::Decentralized => None,
        SchedulerKind::Baseline => Some(alloc::boxed::Box::new(Baseline::default())),
        SchedulerKind::Fcfs => Some(alloc::boxed::Box::new(Fcfs)),
        SchedulerKind::Dynamic => Some(alloc::boxed::Box::new(dynamic)),
    }
}
