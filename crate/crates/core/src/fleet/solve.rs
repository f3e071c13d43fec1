//! Job-to-machine assignment minimizing the makespan.
//!
//! Machine `m` already has `ready[m]` minutes of work queued; job `j` adds
//! `cost[j][m]` to whichever machine it lands on. Jobs join a machine's queue
//! in index order, so the completion time of a job is its machine's ready time
//! plus the costs of the jobs placed there up to and including it.
//!
//! The exact solver minimizes, lexicographically,
//! 1. the largest final load among machines that receive at least one job, and
//! 2. the sum of completion times of the placed jobs.
//!
//! Any minimizer of (1) also minimizes the plain makespan `max_m L_m` over all
//! machines: machines that receive nothing keep their fixed ready time, which
//! bounds every assignment's makespan from below anyway. Objective (1) keeps
//! the search from settling for any assignment hidden under one long-busy
//! machine, and (2) picks the best among the equally tight ones.

use alloc::vec;
use alloc::vec::Vec;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Machine index per job.
    pub assign: Vec<usize>,
    /// Largest final load among machines that received a job.
    pub receiving_makespan: f64,
    pub total_completion: f64,
    /// False when the node budget ran out or the heuristic was used.
    pub proven_optimal: bool,
    /// Lower bound on the receiving makespan; equals it when proven optimal.
    pub lower_bound: f64,
}

impl Solution {
    pub fn gap(&self) -> f64 {
        (self.receiving_makespan - self.lower_bound).max(0.0)
    }
}

/// Receiving makespan and total completion time of an assignment.
pub fn evaluate(ready: &[f64], cost: &[Vec<f64>], assign: &[usize]) -> (f64, f64) {
    let mut load = ready.to_vec();
    let mut total = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for (j, &m) in assign.iter().enumerate() {
        load[m] += cost[j][m];
        total += load[m];
    }
    for &m in assign {
        worst = worst.max(load[m]);
    }
    if assign.is_empty() {
        worst = 0.0;
    }
    (worst, total)
}

/// `max_m L_m` over every machine, receiving or not.
pub fn makespan(ready: &[f64], cost: &[Vec<f64>], assign: &[usize]) -> f64 {
    let mut load = ready.to_vec();
    for (j, &m) in assign.iter().enumerate() {
        load[m] += cost[j][m];
    }
    load.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.0 - EPS || (a.0 <= b.0 + EPS && a.1 < b.1 - EPS)
}

/// Longest-processing-time greedy: jobs by decreasing cheapest cost, each to
/// the machine where it would finish first (ties to the lowest index).
pub fn lpt(ready: &[f64], cost: &[Vec<f64>]) -> Solution {
    let jobs = cost.len();
    let mut order: Vec<usize> = (0..jobs).collect();
    let cheapest = |j: usize| cost[j].iter().copied().fold(f64::INFINITY, f64::min);
    order.sort_by(|&a, &b| cheapest(b).total_cmp(&cheapest(a)).then(a.cmp(&b)));
    let mut load = ready.to_vec();
    let mut assign = vec![0; jobs];
    for j in order {
        let m = (0..load.len())
            .min_by(|&a, &b| (load[a] + cost[j][a]).total_cmp(&(load[b] + cost[j][b])).then(a.cmp(&b)))
            .expect("at least one machine");
        load[m] += cost[j][m];
        assign[j] = m;
    }
    let (r, c) = evaluate(ready, cost, &assign);
    Solution {
        assign,
        receiving_makespan: r,
        total_completion: c,
        proven_optimal: false,
        lower_bound: root_bound(ready, cost),
    }
}

fn root_bound(ready: &[f64], cost: &[Vec<f64>]) -> f64 {
    cost.iter()
        .map(|row| {
            row.iter()
                .zip(ready)
                .map(|(c, r)| c + r)
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

struct Search<'a> {
    ready: &'a [f64],
    cost: &'a [Vec<f64>],
    load: Vec<f64>,
    received: Vec<bool>,
    current: Vec<usize>,
    best: (f64, f64),
    best_assign: Vec<usize>,
    nodes: u64,
    budget: u64,
    exhausted: bool,
}

impl Search<'_> {
    fn bounds(&self, next: usize, part_r: f64, part_c: f64) -> (f64, f64) {
        let mut lb_r = part_r;
        let mut lb_c = part_c;
        for row in &self.cost[next..] {
            let best = row
                .iter()
                .zip(&self.load)
                .map(|(c, l)| c + l)
                .fold(f64::INFINITY, f64::min);
            lb_r = lb_r.max(best);
            lb_c += best;
        }
        (lb_r, lb_c)
    }

    fn go(&mut self, j: usize, part_r: f64, part_c: f64) {
        if self.exhausted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        if j == self.cost.len() {
            if better((part_r, part_c), self.best) {
                self.best = (part_r, part_c);
                self.best_assign = self.current.clone();
            }
            return;
        }
        let (lb_r, lb_c) = self.bounds(j, part_r, part_c);
        if lb_r > self.best.0 + EPS || (lb_r >= self.best.0 - EPS && lb_c >= self.best.1 - EPS) {
            return;
        }
        let machines = self.load.len();
        let mut choices: Vec<usize> = Vec::with_capacity(machines);
        'outer: for m in 0..machines {
            // Machines indistinguishable for the rest of the search are tried once.
            for &seen in &choices {
                if self.load[seen] == self.load[m]
                    && self.received[seen] == self.received[m]
                    && self.cost[j..].iter().all(|row| row[seen] == row[m])
                {
                    continue 'outer;
                }
            }
            choices.push(m);
        }
        choices.sort_by(|&a, &b| {
            (self.load[a] + self.cost[j][a])
                .total_cmp(&(self.load[b] + self.cost[j][b]))
                .then(a.cmp(&b))
        });
        for m in choices {
            let before = (self.load[m], self.received[m]);
            self.load[m] += self.cost[j][m];
            self.received[m] = true;
            self.current.push(m);
            let r = part_r.max(self.load[m]);
            let c = part_c + self.load[m];
            self.go(j + 1, r, c);
            self.current.pop();
            (self.load[m], self.received[m]) = before;
        }
    }
}

/// Branch and bound over all assignments, seeded with the LPT incumbent.
/// Stops after `node_budget` nodes, in which case the best assignment found
/// is returned with `proven_optimal = false`.
pub fn solve_exact(ready: &[f64], cost: &[Vec<f64>], node_budget: u64) -> Solution {
    assert!(!ready.is_empty(), "at least one machine");
    let incumbent = lpt(ready, cost);
    if cost.is_empty() {
        return Solution {
            proven_optimal: true,
            ..incumbent
        };
    }
    let mut s = Search {
        ready,
        cost,
        load: ready.to_vec(),
        received: vec![false; ready.len()],
        current: Vec::with_capacity(cost.len()),
        best: (incumbent.receiving_makespan, incumbent.total_completion),
        best_assign: incumbent.assign.clone(),
        nodes: 0,
        budget: node_budget,
        exhausted: false,
    };
    s.go(0, f64::NEG_INFINITY, 0.0);
    let proven = !s.exhausted;
    let lower = if proven { s.best.0 } else { root_bound(s.ready, cost) };
    Solution {
        assign: s.best_assign,
        receiving_makespan: s.best.0,
        total_completion: s.best.1,
        proven_optimal: proven,
        lower_bound: lower,
    }
}
