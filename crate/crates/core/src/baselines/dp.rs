//! Backward induction on a uniform time grid with at most one arrival per step.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Assortment, NetworkInstance, StateIndexer, ENUMERATION_LIMIT};
use crate::policy::Policy;
use crate::simulate::RngStream;

/// Largest `(K + 1) * |X|` table the solver will allocate.
pub const DP_TABLE_LIMIT: usize = 200_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("time step must be positive and divide the horizon (dt = {0})")]
    BadStep(f64),
    #[error("state space too large for exact DP ({0} table entries)")]
    StateSpace(String),
    #[error("{0} products exceed the enumeration limit of {ENUMERATION_LIMIT}")]
    TooManyProducts(usize),
    #[error("arrival probability per step {0} exceeds 1; use a smaller dt")]
    StepTooLarge(f64),
}

/// Number of grid steps `T / dt`, requiring `dt` to divide `T` up to rounding.
pub fn grid_steps(horizon: f64, dt: f64) -> Option<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return None;
    }
    let k = (horizon / dt).round();
    if k < 1.0 || (k * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return None;
    }
    Some(k as usize)
}

/// Optimal values and decisions on the grid `t_k = k dt`.
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub dt: f64,
    pub steps: usize,
    indexer: StateIndexer,
    /// `values[k * |X| + idx] = V(t_k, x)` for `k = 0..=K`.
    values: Vec<f64>,
    /// `actions[k * |X| + idx]`: maximizing assortment for period `(t_k, t_{k+1}]`.
    actions: Vec<Assortment>,
}

impl DpSolution {
    pub fn state_count(&self) -> usize {
        self.indexer.count()
    }

    pub fn value(&self, k: usize, x: &[u32]) -> f64 {
        self.values[k * self.indexer.count() + self.indexer.index(x)]
    }

    pub fn action(&self, k: usize, x: &[u32]) -> Assortment {
        self.actions[k * self.indexer.count() + self.indexer.index(x)]
    }

    /// Grid period containing `t`: the `k` with `t in (t_k, t_{k+1}]`, and `0` at `t = 0`.
    pub fn period(&self, t: f64) -> usize {
        let k = (t / self.dt).ceil() as usize;
        k.saturating_sub(1).min(self.steps - 1)
    }
}

/// The DP argmax as a deterministic continuous-time policy.
impl Policy for DpSolution {
    fn sample(&self, t: f64, x: &[u32], avail: Assortment, _rng: &mut RngStream) -> Assortment {
        self.action(self.period(t), x).intersect(avail)
    }

    fn log_prob(&self, t: f64, x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if s == self.action(self.period(t), x).intersect(avail) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn entropy(&self, _t: f64, _x: &[u32], _avail: Assortment) -> f64 {
        0.0
    }
}

/// Per-state transition data: for each feasible assortment, the purchase
/// probability, price and successor index of every offered product.
struct StateMoves {
    sets: Vec<(Assortment, Vec<Move>)>,
}

/// `(probability, price, successor index)`.
type Move = (f64, f64, usize);

fn build_moves(inst: &NetworkInstance, indexer: &StateIndexer) -> Vec<StateMoves> {
    let n = inst.n();
    let mut probs = vec![0.0; n];
    (0..indexer.count())
        .map(|idx| {
            let x = indexer.state(idx);
            let avail = inst.available(&x);
            let mut subsets: Vec<Assortment> = avail.subsets().filter(|s| !s.is_empty()).collect();
            subsets.sort();
            let sets = subsets
                .into_iter()
                .map(|s| {
                    inst.choice().purchase_probs(s, &mut probs);
                    let moves = s
                        .iter()
                        .map(|j| {
                            (
                                probs[j],
                                inst.prices()[j],
                                indexer.index(&inst.after_sale(&x, j)),
                            )
                        })
                        .collect();
                    (s, moves)
                })
                .collect();
            StateMoves { sets }
        })
        .collect()
}

/// Solves `V(t_k, x) = V(t_{k+1}, x) + lambda dt max_S sum_{j in S} P_j(S)
/// [p_j + V(t_{k+1}, x - A^j) - V(t_{k+1}, x)]` with `V(T, .) = 0`. The arrival
/// rate is read at `t_{k+1}`. Ties go to the smallest bitmask (the empty set first).
pub fn solve_dp(inst: &NetworkInstance, dt: f64) -> Result<DpSolution, DpError> {
    let steps = grid_steps(inst.horizon(), dt).ok_or(DpError::BadStep(dt))?;
    if inst.n() > ENUMERATION_LIMIT {
        return Err(DpError::TooManyProducts(inst.n()));
    }
    let step_prob = inst.arrival().max() * dt;
    if step_prob > 1.0 {
        return Err(DpError::StepTooLarge(step_prob));
    }
    let indexer =
        StateIndexer::new(inst.capacity()).ok_or_else(|| DpError::StateSpace("overflow".into()))?;
    let states = indexer.count();
    let table = states
        .checked_mul(steps + 1)
        .filter(|&c| c <= DP_TABLE_LIMIT)
        .ok_or_else(|| DpError::StateSpace(format!("{states} states x {} times", steps + 1)))?;
    let moves = build_moves(inst, &indexer);
    let mut values = vec![0.0; table];
    let mut actions = vec![Assortment::EMPTY; steps * states];
    for k in (0..steps).rev() {
        let lam_dt = inst.arrival().evaluate((k + 1) as f64 * dt) * dt;
        let (head, tail) = values.split_at_mut((k + 1) * states);
        let next = &tail[..states];
        let current = &mut head[k * states..];
        let act = &mut actions[k * states..(k + 1) * states];
        current
            .par_iter_mut()
            .zip(act.par_iter_mut())
            .enumerate()
            .with_min_len(256)
            .for_each(|(idx, (v, a))| {
                let here = next[idx];
                let mut best = 0.0;
                let mut arg = Assortment::EMPTY;
                for (s, mv) in &moves[idx].sets {
                    let gain: f64 = mv
                        .iter()
                        .map(|&(p, price, y)| p * (price + next[y] - here))
                        .sum();
                    if gain > best {
                        best = gain;
                        arg = *s;
                    }
                }
                *v = here + lam_dt * best;
                *a = arg;
            });
    }
    Ok(DpSolution {
        dt,
        steps,
        indexer,
        values,
        actions,
    })
}
