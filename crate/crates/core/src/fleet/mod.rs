//! Simulated 3D-printer fleet driven by digital twins.

pub mod sched;
pub mod sim;
pub mod solve;
pub mod twin;

pub use sched::{
    central_scheduler, Baseline, CentralScheduler, Dynamic, Fcfs, JobKind, JobTicket, Placement, ScheduleError,
    SchedulerKind, SolveStats, UnknownScheduler,
};
pub use sim::{
    normalized_makespans, run_scenario, JobRecord, LocalLink, OrderSchedule, PpeInjection, RunSummary, ScenarioConfig, SimError, SimReport,
    TwinLink,
};
pub use solve::Solution;
pub use twin::{AnomalyTwin, Facet, Facets, MachineStatus, QueueTwin, StateTwin, TwinSnapshot};
