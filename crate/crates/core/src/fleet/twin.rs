//! Digital-twin facets published per machine.
//!
//! Schedulers see the fleet only through these snapshots. Each facet travels
//! as its own record on `fleet.twin.<machine>.<facet>`; the encodings below
//! are the record values.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MachineStatus {
    Idle,
    Setup,
    Printing,
    Maintenance,
}

impl MachineStatus {
    fn code(self) -> u8 {
        match self {
            MachineStatus::Idle => 0,
            MachineStatus::Setup => 1,
            MachineStatus::Printing => 2,
            MachineStatus::Maintenance => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self, WireError> {
        Ok(match c {
            0 => MachineStatus::Idle,
            1 => MachineStatus::Setup,
            2 => MachineStatus::Printing,
            3 => MachineStatus::Maintenance,
            _ => return Err(WireError::BadFlag(c)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Facet {
    State,
    Queue,
    Anomaly,
}

impl Facet {
    pub const ALL: [Facet; 3] = [Facet::State, Facet::Queue, Facet::Anomaly];

    pub fn as_str(self) -> &'static str {
        match self {
            Facet::State => "state",
            Facet::Queue => "queue",
            Facet::Anomaly => "anomaly",
        }
    }
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Facet {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Facet::ALL.into_iter().find(|f| f.as_str() == s).ok_or(())
    }
}

/// A set of facets, as a scheduler's interests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Facets {
    pub state: bool,
    pub queue: bool,
    pub anomaly: bool,
}

impl Facets {
    pub const NONE: Facets = Facets {
        state: false,
        queue: false,
        anomaly: false,
    };

    pub fn contains(self, f: Facet) -> bool {
        match f {
            Facet::State => self.state,
            Facet::Queue => self.queue,
            Facet::Anomaly => self.anomaly,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Facet> {
        Facet::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    pub fn is_empty(self) -> bool {
        self.iter().next().is_none()
    }
}

/// Functional state, physical properties and time information of a printer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateTwin {
    pub status: MachineStatus,
    pub current_job: Option<u64>,
    pub setup_min: f64,
    /// Time left in the current phase.
    pub phase_remaining_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueTwin {
    /// Jobs queued plus the one in progress.
    pub queue_length: u32,
    /// Time until everything queued is done, from the snapshot time.
    pub queue_finish_min: f64,
    /// Time until the current job and queued priority jobs are done.
    pub priority_finish_min: f64,
    pub avg_wait_min: f64,
    /// Jobs finished on this machine so far (the queue history length).
    pub completed: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyTwin {
    pub last_anomaly: bool,
    pub anomalies: u32,
    pub anomaly_prob: f64,
}

/// What one scheduler knows about one machine at one instant. Facets the
/// scheduler is not interested in stay `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinSnapshot {
    pub machine: u32,
    pub at_min: f64,
    pub state: Option<StateTwin>,
    pub queue: Option<QueueTwin>,
    pub anomaly: Option<AnomalyTwin>,
}

impl TwinSnapshot {
    pub fn empty(machine: u32, at_min: f64) -> Self {
        Self {
            machine,
            at_min,
            state: None,
            queue: None,
            anomaly: None,
        }
    }

    pub fn restricted(&self, facets: Facets) -> Self {
        Self {
            state: self.state.filter(|_| facets.state),
            queue: self.queue.filter(|_| facets.queue),
            anomaly: self.anomaly.filter(|_| facets.anomaly),
            ..*self
        }
    }

    /// Encodes one facet as a record value: u32 machine, f64 time, then the facet fields.
    pub fn encode_facet(&self, facet: Facet) -> Option<Vec<u8>> {
        let mut buf = Vec::new();
        let mut w = Writer::new(&mut buf);
        w.u32(self.machine).f64(self.at_min);
        match facet {
            Facet::State => {
                let s = self.state?;
                w.u8(s.status.code());
                match s.current_job {
                    Some(j) => w.u8(1).u64(j),
                    None => w.u8(0),
                };
                w.f64(s.setup_min).f64(s.phase_remaining_min);
            }
            Facet::Queue => {
                let q = self.queue?;
                w.u32(q.queue_length)
                    .f64(q.queue_finish_min)
                    .f64(q.priority_finish_min)
                    .f64(q.avg_wait_min)
                    .u32(q.completed);
            }
            Facet::Anomaly => {
                let a = self.anomaly?;
                w.bool(a.last_anomaly).u32(a.anomalies).f64(a.anomaly_prob);
            }
        }
        Some(buf)
    }

    /// Merges one encoded facet into `self`; returns the machine and time it carried.
    pub fn merge_facet(&mut self, facet: Facet, bytes: &[u8]) -> Result<(), WireError> {
        let mut r = Reader::new(bytes);
        let machine = r.u32()?;
        let at = r.f64()?;
        match facet {
            Facet::State => {
                let status = MachineStatus::from_code(r.u8()?)?;
                let current_job = if r.bool()? { Some(r.u64()?) } else { None };
                self.state = Some(StateTwin {
                    status,
                    current_job,
                    setup_min: r.f64()?,
                    phase_remaining_min: r.f64()?,
                });
            }
            Facet::Queue => {
                self.queue = Some(QueueTwin {
                    queue_length: r.u32()?,
                    queue_finish_min: r.f64()?,
                    priority_finish_min: r.f64()?,
                    avg_wait_min: r.f64()?,
                    completed: r.u32()?,
                });
            }
            Facet::Anomaly => {
                self.anomaly = Some(AnomalyTwin {
                    last_anomaly: r.bool()?,
                    anomalies: r.u32()?,
                    anomaly_prob: r.f64()?,
                });
            }
        }
        r.finish()?;
        self.machine = machine;
        self.at_min = self.at_min.max(at);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn facets_round_trip() {
        let full = TwinSnapshot {
            machine: 3,
            at_min: 12.5,
            state: Some(StateTwin {
                status: MachineStatus::Printing,
                current_job: Some(44),
                setup_min: 5.0,
                phase_remaining_min: 17.25,
            }),
            queue: Some(QueueTwin {
                queue_length: 4,
                queue_finish_min: 300.0,
                priority_finish_min: 17.25,
                avg_wait_min: 61.0,
                completed: 9,
            }),
            anomaly: Some(AnomalyTwin {
                last_anomaly: true,
                anomalies: 2,
                anomaly_prob: 0.1,
            }),
        };
        let mut rebuilt = TwinSnapshot::empty(0, 0.0);
        for f in Facet::ALL {
            rebuilt.merge_facet(f, &full.encode_facet(f).unwrap()).unwrap();
        }
        assert_eq!(rebuilt, full);
        let only_queue = full.restricted(Facets {
            queue: true,
            ..Facets::NONE
        });
        assert!(only_queue.state.is_none() && only_queue.anomaly.is_none());
        assert!(only_queue.encode_facet(Facet::State).is_none());
    }
}
