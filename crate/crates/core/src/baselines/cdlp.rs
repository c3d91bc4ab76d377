//! Choice-based deterministic LP over all assortments, and its time-schedule policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::simplex::{simplex_solve, LpError};
use crate::model::{Assortment, NetworkInstance};
use crate::policy::Policy;
use crate::simulate::RngStream;

/// Default cap on `n` for full column enumeration.
pub const CDLP_COLUMN_LIMIT: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum CdlpError {
    #[error("{n} products exceed the CDLP column limit of {limit}")]
    TooManyColumns { n: usize, limit: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdlpSolution {
    pub objective: f64,
    /// Assortments with positive time allocation, in ascending bitmask order.
    pub schedule: Vec<(Assortment, f64)>,
    /// Multipliers of the capacity rows (bid prices) and of the time row.
    pub capacity_duals: Vec<f64>,
    pub time_dual: f64,
    /// Mean arrival rate `Lambda(T) / T` used for every column.
    pub rate: f64,
}

impl CdlpSolution {
    pub fn total_time(&self) -> f64 {
        self.schedule.iter().map(|(_, h)| h).sum()
    }
}

/// `max sum_S lambda R(S) h(S)` s.t. `sum_S lambda Q_i(S) h(S) <= c_i`,
/// `sum_S h(S) <= T`, `h >= 0`, over every nonempty assortment.
pub fn solve_cdlp(inst: &NetworkInstance) -> Result<CdlpSolution, CdlpError> {
    solve_cdlp_with_limit(inst, CDLP_COLUMN_LIMIT)
}

pub fn solve_cdlp_with_limit(
    inst: &NetworkInstance,
    limit: usize,
) -> Result<CdlpSolution, CdlpError> {
    let n = inst.n();
    if n > limit {
        return Err(CdlpError::TooManyColumns { n, limit });
    }
    let m = inst.m();
    let horizon = inst.horizon();
    let rate = inst.arrival().integral(0.0, horizon) / horizon;
    let columns: Vec<Assortment> = Assortment::full(n)
        .subsets()
        .filter(|s| !s.is_empty())
        .collect();
    let mut columns = columns;
    columns.sort();
    let mut probs = vec![0.0; n];
    let mut c = Vec::with_capacity(columns.len());
    let mut a = vec![Vec::with_capacity(columns.len()); m + 1];
    for &s in &columns {
        inst.choice().purchase_probs(s, &mut probs);
        c.push(
            rate * probs
                .iter()
                .zip(inst.prices())
                .map(|(q, p)| q * p)
                .sum::<f64>(),
        );
        for (i, row) in a.iter_mut().take(m).enumerate() {
            let q: f64 = s
                .iter()
                .map(|j| inst.consumption(i, j) as f64 * probs[j])
                .sum();
            row.push(rate * q);
        }
        a[m].push(1.0);
    }
    let mut b: Vec<f64> = inst.capacity().iter().map(|&ci| ci as f64).collect();
    b.push(horizon);
    let lp = simplex_solve(&c, &a, &b)?;
    let schedule = columns
        .iter()
        .zip(&lp.x)
        .filter(|(_, h)| **h > 1e-12)
        .map(|(s, h)| (*s, *h))
        .collect();
    Ok(CdlpSolution {
        objective: lp.objective,
        schedule,
        capacity_duals: lp.duals[..m].to_vec(),
        time_dual: lp.duals[m],
        rate,
    })
}

/// Offers each scheduled assortment for its allocated time, in schedule
/// order from `t = 0`, then nothing; products that ran out are dropped.
#[derive(Debug, Clone)]
pub struct CdlpPolicy {
    ends: Vec<(f64, Assortment)>,
}

impl CdlpPolicy {
    pub fn new(sol: &CdlpSolution) -> Self {
        let mut t = 0.0;
        let ends = sol
            .schedule
            .iter()
            .map(|(s, h)| {
                t += h;
                (t, *s)
            })
            .collect();
        CdlpPolicy { ends }
    }

    /// Scheduled assortment at `t`, before intersecting with availability.
    pub fn scheduled(&self, t: f64) -> Assortment {
        let k = self.ends.partition_point(|(end, _)| *end <= t);
        self.ends.get(k).map_or(Assortment::EMPTY, |(_, s)| *s)
    }
}

impl Policy for CdlpPolicy {
    fn sample(&self, t: f64, _x: &[u32], avail: Assortment, _rng: &mut RngStream) -> Assortment {
        self.scheduled(t).intersect(avail)
    }

    fn log_prob(&self, t: f64, _x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if s == self.scheduled(t).intersect(avail) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn entropy(&self, _t: f64, _x: &[u32], _avail: Assortment) -> f64 {
        0.0
    }
}
