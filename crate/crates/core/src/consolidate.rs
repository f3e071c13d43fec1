//! Interest/capability consolidation.
//!
//! For every capability key of every producer, collect the interests (from
//! any application) whose pattern matches the key. No match means no
//! assignment: nobody asked, so nothing is produced. Otherwise the assigned
//! rate is the highest desired rate among the matches, clamped to the
//! producer's declared maximum. Interests without a desired rate add no term
//! to that maximum; when none of the matches carries a rate, the producer's
//! maximum (or an unbounded rate) is assigned.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::key::KeyPattern;
use crate::manifest::{AppId, AssignmentSet, Frequency, Manifest, Rate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum UnmetReason {
    /// No capability of any application matches the interest.
    NoProducer,
    /// A matched producer cannot reach the desired rate and was clamped.
    FrequencyExceedsCapacity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unmet {
    /// Application holding the interest.
    pub app_id: AppId,
    pub pattern: KeyPattern,
    pub reason: UnmetReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsolidationResult {
    /// One entry per input application; consumers get an empty set.
    pub per_app: BTreeMap<AppId, AssignmentSet>,
    /// Ordered by holding application, then interest position, then reason.
    pub unmet: Vec<Unmet>,
}

impl ConsolidationResult {
    pub fn assignments(&self, app: &AppId) -> Option<&AssignmentSet> {
        self.per_app.get(app)
    }
}

/// Consolidates a set of application manifests. The output depends only on
/// the multiset of `(app, manifest)` pairs, not on their order.
pub fn consolidate(apps: &[(AppId, Manifest)]) -> ConsolidationResult {
    let mut sorted: Vec<&(AppId, Manifest)> = apps.iter().collect();
    sorted.sort();

    let mut per_app: BTreeMap<AppId, AssignmentSet> = BTreeMap::new();
    // (holder position in `sorted`, interest index, reason)
    let mut unmet: BTreeSet<(usize, usize, UnmetReason)> = BTreeSet::new();

    for (app_id, manifest) in &sorted {
        let set = per_app.entry(app_id.clone()).or_default();
        for cap in &manifest.capabilities {
            let mut matched_any = false;
            let mut highest: Option<Frequency> = None;
            for (holder, (_, other)) in sorted.iter().enumerate() {
                for (idx, interest) in other.interests.iter().enumerate() {
                    if !interest.pattern.matches(&cap.key) {
                        continue;
                    }
                    matched_any = true;
                    if let Some(want) = interest.desired_hz {
                        highest = Some(highest.map_or(want, |h| h.max(want)));
                        if cap.max_hz.is_some_and(|max| want > max) {
                            unmet.insert((holder, idx, UnmetReason::FrequencyExceedsCapacity));
                        }
                    }
                }
            }
            if !matched_any {
                continue;
            }
            let rate = match (highest, cap.max_hz) {
                (Some(want), Some(max)) => Rate::Hz(want.min(max)),
                (Some(want), None) => Rate::Hz(want),
                (None, Some(max)) => Rate::Hz(max),
                (None, None) => Rate::Unbounded,
            };
            // The same key declared twice by one app keeps the larger rate.
            let rate = match set.get(&cap.key) {
                Some(prev) => prev.max(rate),
                None => rate,
            };
            set.insert(cap.key.clone(), rate);
        }
    }

    for (holder, (_, manifest)) in sorted.iter().enumerate() {
        for (idx, interest) in manifest.interests.iter().enumerate() {
            let produced = sorted.iter().any(|(_, m)| {
                m.capabilities
                    .iter()
                    .any(|c| interest.pattern.matches(&c.key))
            });
            if !produced {
                unmet.insert((holder, idx, UnmetReason::NoProducer));
            }
        }
    }

    let unmet = unmet
        .into_iter()
        .map(|(holder, idx, reason)| Unmet {
            app_id: sorted[holder].0.clone(),
            pattern: sorted[holder].1.interests[idx].pattern.clone(),
            reason,
        })
        .collect();

    ConsolidationResult { per_app, unmet }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::DataKey;
    use alloc::vec;

    fn app(s: &str) -> AppId {
        AppId::new(s).unwrap()
    }

    fn key(s: &str) -> DataKey {
        DataKey::parse(s).unwrap()
    }

    fn pat(s: &str) -> KeyPattern {
        KeyPattern::parse(s).unwrap()
    }

    fn hz(x: f64) -> Rate {
        Rate::Hz(Frequency::new(x).unwrap())
    }

    #[test]
    fn highest_demand_within_capacity() {
        let apps = vec![
            (app("x"), Manifest::new().interest(pat("fleet.k"), Some(10.0))),
            (app("y"), Manifest::new().interest(pat("fleet.k"), Some(5.0))),
            (app("p"), Manifest::new().capability(key("fleet.k"), Some(20.0), false)),
        ];
        let r = consolidate(&apps);
        assert_eq!(r.per_app[&app("p")].get(&key("fleet.k")), Some(hz(10.0)));
        assert!(r.per_app[&app("x")].is_empty());
        assert!(r.unmet.is_empty());
    }

    #[test]
    fn demand_above_capacity_is_clamped_and_reported() {
        let apps = vec![
            (app("x"), Manifest::new().interest(pat("fleet.k"), Some(50.0))),
            (app("p"), Manifest::new().capability(key("fleet.k"), Some(20.0), false)),
        ];
        let r = consolidate(&apps);
        assert_eq!(r.per_app[&app("p")].get(&key("fleet.k")), Some(hz(20.0)));
        assert_eq!(
            r.unmet,
            vec![Unmet {
                app_id: app("x"),
                pattern: pat("fleet.k"),
                reason: UnmetReason::FrequencyExceedsCapacity
            }]
        );
    }

    #[test]
    fn no_interest_means_no_assignment() {
        let apps = vec![(app("p"), Manifest::new().capability(key("fleet.k"), Some(20.0), false))];
        let r = consolidate(&apps);
        assert!(r.per_app[&app("p")].is_empty());
    }

    #[test]
    fn interest_without_producer_is_unmet() {
        let apps = vec![(app("x"), Manifest::new().interest(pat("net.**"), None))];
        let r = consolidate(&apps);
        assert_eq!(r.unmet.len(), 1);
        assert_eq!(r.unmet[0].reason, UnmetReason::NoProducer);
    }

    #[test]
    fn unconstrained_interests_take_producer_max_or_unbounded() {
        let apps = vec![
            (app("x"), Manifest::new().interest(pat("fleet.*"), None)),
            (
                app("p"),
                Manifest::new()
                    .capability(key("fleet.a"), Some(7.0), false)
                    .capability(key("fleet.b"), None, false),
            ),
        ];
        let r = consolidate(&apps);
        let set = &r.per_app[&app("p")];
        assert_eq!(set.get(&key("fleet.a")), Some(hz(7.0)));
        assert_eq!(set.get(&key("fleet.b")), Some(Rate::Unbounded));
    }

    #[test]
    fn unconstrained_interest_adds_no_term() {
        let apps = vec![
            (app("x"), Manifest::new().interest(pat("fleet.k"), None)),
            (app("y"), Manifest::new().interest(pat("fleet.k"), Some(3.0))),
            (app("p"), Manifest::new().capability(key("fleet.k"), Some(20.0), false)),
        ];
        let r = consolidate(&apps);
        assert_eq!(r.per_app[&app("p")].get(&key("fleet.k")), Some(hz(3.0)));
    }

    #[test]
    fn two_producers_of_one_key_both_assigned() {
        let apps = vec![
            (app("x"), Manifest::new().interest(pat("fleet.k"), Some(4.0))),
            (app("p"), Manifest::new().capability(key("fleet.k"), None, false)),
            (app("q"), Manifest::new().capability(key("fleet.k"), Some(2.0), false)),
        ];
        let r = consolidate(&apps);
        assert_eq!(r.per_app[&app("p")].get(&key("fleet.k")), Some(hz(4.0)));
        assert_eq!(r.per_app[&app("q")].get(&key("fleet.k")), Some(hz(2.0)));
        assert_eq!(r.unmet.len(), 1);
    }

    #[test]
    fn order_of_input_does_not_matter() {
        let mut apps = vec![
            (app("x"), Manifest::new().interest(pat("a.*"), Some(4.0)).interest(pat("z.z"), None)),
            (app("p"), Manifest::new().capability(key("a.b"), Some(3.0), false)),
            (app("q"), Manifest::new().capability(key("a.c"), None, true)),
        ];
        let first = consolidate(&apps);
        apps.reverse();
        assert_eq!(consolidate(&apps), first);
        apps.swap(0, 1);
        assert_eq!(consolidate(&apps), first);
    }

    #[test]
    fn own_interest_counts() {
        let apps = vec![(
            app("p"),
            Manifest::new()
                .interest(pat("a.b"), Some(1.0))
                .capability(key("a.b"), None, false),
        )];
        assert_eq!(consolidate(&apps).per_app[&app("p")].get(&key("a.b")), Some(hz(1.0)));
    }
}
