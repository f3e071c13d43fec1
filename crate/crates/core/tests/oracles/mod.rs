//! Reference implementations written against plain strings and numbers,
//! sharing nothing with the library beyond its input types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use sdnator_core::{AppId, Manifest, Rate};

/// One application's declarations as plain data.
#[derive(Debug, Clone)]
pub struct Declared {
    pub app: String,
    /// (pattern text, desired hz)
    pub interests: Vec<(String, Option<f64>)>,
    /// (key text, max hz)
    pub capabilities: Vec<(String, Option<f64>)>,
}

impl Declared {
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        for (p, hz) in &self.interests {
            m = m.interest(p.parse().unwrap(), *hz);
        }
        for (k, hz) in &self.capabilities {
            m = m.capability(k.parse().unwrap(), *hz, false);
        }
        m
    }

    pub fn app_id(&self) -> AppId {
        AppId::new(&self.app).unwrap()
    }
}

const SEGMENTS: [&str; 3] = ["a", "b", "c"];

/// Up to five apps over at most ten distinct keys with random rates.
pub fn random_declarations(rng: &mut impl Rng) -> Vec<Declared> {
    let universe: Vec<String> = {
        let mut all = Vec::new();
        for x in SEGMENTS {
            for y in SEGMENTS {
                all.push(format!("plant.{x}.{y}"));
            }
        }
        all.push("plant.a.b:unit=c".into());
        all.push("plant.a".into());
        all.shuffle(rng);
        all.truncate(rng.gen_range(1..=10));
        all
    };
    let rate = |rng: &mut dyn rand::RngCore| -> Option<f64> {
        match rng.gen_range(0..4) {
            0 => None,
            1 => Some([1.0, 5.0, 10.0, 20.0][rng.gen_range(0..4)]),
            _ => Some(rng.gen_range(0.5..50.0)),
        }
    };
    let apps = rng.gen_range(1..=5);
    (0..apps)
        .map(|i| {
            let interests = (0..rng.gen_range(0..4))
                .map(|_| {
                    let base = universe.choose(rng).unwrap();
                    let segs: Vec<&str> = base.split(':').next().unwrap().split('.').collect();
                    let mut out: Vec<String> = Vec::new();
                    for (n, s) in segs.iter().enumerate() {
                        match rng.gen_range(0..6) {
                            0 => {
                                out.push("**".into());
                                break;
                            }
                            1 | 2 if n > 0 => out.push("*".into()),
                            _ => out.push(s.to_string()),
                        }
                    }
                    if out.last().is_some_and(|s| s != "**") && rng.gen_bool(0.1) {
                        out.push("extra".into());
                    }
                    (out.join("."), rate(rng))
                })
                .collect();
            let capabilities = (0..rng.gen_range(0..4))
                .map(|_| (universe.choose(rng).unwrap().clone(), rate(rng)))
                .collect();
            Declared {
                app: format!("app{i}"),
                interests,
                capabilities,
            }
        })
        .collect()
}

fn segment_match(pattern: &[&str], key: &[&str]) -> bool {
    match (pattern.split_first(), key.split_first()) {
        (Some((&"**", _)), _) => true,
        (None, None) => true,
        (Some((&"*", p)), Some((_, k))) => segment_match(p, k),
        (Some((a, p)), Some((b, k))) if a == b => segment_match(p, k),
        _ => false,
    }
}

/// Pattern match ignoring specifications on either side.
pub fn pattern_matches(pattern: &str, key: &str) -> bool {
    let p: Vec<&str> = pattern.split(':').next().unwrap().split('.').collect();
    let k: Vec<&str> = key.split(':').next().unwrap().split('.').collect();
    segment_match(&p, &k)
}

/// Assigned rate per key, `None` meaning unbounded.
pub type Assigned = BTreeMap<String, BTreeMap<String, Option<f64>>>;

/// (app, pattern, 0 = nothing produces it / 1 = a producer is too slow)
pub type Shortfalls = BTreeSet<(String, String, u8)>;

fn larger(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, _) | (_, None) => None,
        (Some(x), Some(y)) => Some(x.max(y)),
    }
}

/// For each capability, every matching interest counts; the highest desired
/// rate wins, capped by the producer's maximum.
pub fn reference_consolidation(apps: &[Declared]) -> (Assigned, Shortfalls) {
    let mut assigned = Assigned::new();
    let mut short = Shortfalls::new();
    for app in apps {
        let entry = assigned.entry(app.app.clone()).or_default();
        for (key, max) in &app.capabilities {
            let matching: Vec<(&String, &(String, Option<f64>))> = apps
                .iter()
                .flat_map(|a| a.interests.iter().map(move |i| (&a.app, i)))
                .filter(|(_, (p, _))| pattern_matches(p, key))
                .collect();
            if matching.is_empty() {
                continue;
            }
            let mut want: Option<f64> = None;
            for (holder, (p, hz)) in &matching {
                if let Some(hz) = hz {
                    want = Some(want.map_or(*hz, |w: f64| w.max(*hz)));
                    if max.is_some_and(|m| *hz > m) {
                        short.insert(((*holder).clone(), p.clone(), 1));
                    }
                }
            }
            let rate = match (want, max) {
                (Some(w), Some(m)) => Some(w.min(*m)),
                (Some(w), None) => Some(w),
                (None, m) => *m,
            };
            let rate = match entry.get(key) {
                Some(prev) => larger(*prev, rate),
                None => rate,
            };
            entry.insert(key.clone(), rate);
        }
    }
    for app in apps {
        for (p, _) in &app.interests {
            let produced = apps.iter().any(|a| a.capabilities.iter().any(|(k, _)| pattern_matches(p, k)));
            if !produced {
                short.insert((app.app.clone(), p.clone(), 0));
            }
        }
    }
    (assigned, short)
}

pub fn plain_rate(r: Rate) -> Option<f64> {
    r.hz()
}

/// Smallest `max_m (ready[m] + sum of costs placed on m)` over all
/// `M^J` assignments, by exhaustive enumeration.
pub fn enumerate_min_makespan(ready: &[f64], cost: &[Vec<f64>]) -> f64 {
    let m = ready.len();
    let j = cost.len();
    let total = m.pow(j as u32);
    let mut best = f64::INFINITY;
    for code in 0..total {
        let mut load = ready.to_vec();
        let mut c = code;
        for job in cost {
            load[c % m] += job[c % m];
            c /= m;
        }
        best = best.min(load.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    best
}
