//! Write pacing for frequency-bound keys.

use alloc::collections::BTreeMap;

use crate::key::DataKey;
use crate::manifest::{AssignmentSet, Rate};

/// Single-token bucket refilled at the assigned rate, kept in virtual
/// scheduling form: a write is admitted when it arrives no earlier than half a
/// period before its theoretical slot, and each admission moves the slot one
/// period past the later of the old slot and the arrival.
///
/// Two writes are never admitted closer than half a period apart, nothing is
/// banked across idle gaps, and under any offered load of at least twice the
/// rate the admitted rate is exactly the assigned one. A strict one-token
/// bucket would instead round every gap up to a whole number of arrivals.
/// Writes that are not admitted are dropped by the caller, never queued.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_hz: f64,
    period_us: f64,
    next_slot_us: Option<f64>,
}

impl TokenBucket {
    pub fn new(rate_hz: f64) -> Self {
        Self {
            rate_hz,
            period_us: 1e6 / rate_hz,
            next_slot_us: None,
        }
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// Takes the token if the write arriving at `now_us` is admitted.
    pub fn try_acquire(&mut self, now_us: u64) -> bool {
        let t = now_us as f64;
        match self.next_slot_us {
            Some(slot) if t < slot - self.period_us / 2.0 => false,
            Some(slot) => {
                self.next_slot_us = Some(slot.max(t) + self.period_us);
                true
            }
            None => {
                self.next_slot_us = Some(t + self.period_us);
                true
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaceDecision {
    Accept,
    /// Over budget for the key's assigned rate.
    Paced,
    /// The key has no assignment: nobody is interested right now.
    Unassigned,
}

/// Per-key pacing state derived from the current assignment set.
#[derive(Debug, Clone, Default)]
pub struct Pacer {
    keys: BTreeMap<DataKey, Option<TokenBucket>>,
}

impl Pacer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs a new assignment set. Buckets of keys whose rate did not change
    /// keep their state so a re-sent assignment does not hand out a burst.
    pub fn apply(&mut self, set: &AssignmentSet) {
        let mut next = BTreeMap::new();
        for (key, rate) in &set.entries {
            let bucket = match rate {
                Rate::Unbounded => None,
                Rate::Hz(f) => match self.keys.remove(key) {
                    Some(Some(b)) if b.rate_hz == f.hz() => Some(b),
                    _ => Some(TokenBucket::new(f.hz())),
                },
            };
            next.insert(key.clone(), bucket);
        }
        self.keys = next;
    }

    pub fn clear(&mut self) {
        self.keys.clear();
    }

    pub fn is_assigned(&self, key: &DataKey) -> bool {
        self.keys.contains_key(key)
    }

    pub fn check(&mut self, key: &DataKey, now_us: u64) -> PaceDecision {
        match self.keys.get_mut(key) {
            None => PaceDecision::Unassigned,
            Some(None) => PaceDecision::Accept,
            Some(Some(bucket)) => {
                if bucket.try_acquire(now_us) {
                    PaceDecision::Accept
                } else {
                    PaceDecision::Paced
                }
            }
        }
    }
}
