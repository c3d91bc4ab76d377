//! Dense two-phase primal simplex for `max c'x  s.t.  Ax <= b, x >= 0`.
//!
//! Entering and leaving variables follow Bland's rule, so degenerate
//! problems terminate. Rows with `b_i < 0` get an artificial variable and
//! are cleared in phase one.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite coefficient in the problem data")]
    NonFinite,
    #[error("problem is infeasible (phase-one residual {0:e})")]
    Infeasible(f64),
    #[error("objective is unbounded along column {0}")]
    Unbounded(usize),
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// One multiplier per row of `A`, nonnegative at optimality.
    pub duals: Vec<f64>,
    pub iterations: usize,
}

const ENTER_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-12;

struct Tableau {
    rows: usize,
    cols: usize,
    /// Row-major `rows x (cols + 1)`; the last column is the right-hand side.
    data: Vec<f64>,
    basis: Vec<usize>,
    iterations: usize,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.cols + 1) + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.cols + 1;
        let p = self.data[r * w + c];
        for j in 0..w {
            self.data[r * w + j] /= p;
        }
        let (before, rest) = self.data.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_mut(w).chain(after.chunks_mut(w)) {
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
        self.iterations += 1;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut red = cost.to_vec();
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (j, r) in red.iter_mut().enumerate() {
                    *r -= cb * self.at(i, j);
                }
            }
        }
        red
    }

    /// Maximizes `cost' z` over the columns for which `allowed` holds.
    fn optimize(
        &mut self,
        cost: &[f64],
        allowed: &dyn Fn(usize) -> bool,
        limit: usize,
    ) -> Result<(), LpError> {
        loop {
            if self.iterations >= limit {
                return Err(LpError::IterationLimit(limit));
            }
            let red = self.reduced_costs(cost);
            let scale = 1.0 + cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
            let Some(enter) = (0..self.cols).find(|&j| allowed(j) && red[j] > ENTER_TOL * scale)
            else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, enter);
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.rhs(i).max(0.0) / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((k, best)) => {
                        let tie = (ratio - best).abs() <= 1e-12 * best.abs().max(1.0);
                        if ratio < best && !tie || tie && self.basis[i] < self.basis[k] {
                            Some((i, ratio))
                        } else {
                            Some((k, best))
                        }
                    }
                };
            }
            match leave {
                Some((r, _)) => self.pivot(r, enter),
                None => return Err(LpError::Unbounded(enter)),
            }
        }
    }
}

/// Solves `max c'x  s.t.  Ax <= b, x >= 0` (`a` is row-major, one `Vec` per row).
pub fn simplex_solve(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpSolution, LpError> {
    let n = c.len();
    let m = a.len();
    if b.len() != m {
        return Err(LpError::Dimension(format!(
            "{m} rows but {} right-hand sides",
            b.len()
        )));
    }
    if let Some(i) = a.iter().position(|row| row.len() != n) {
        return Err(LpError::Dimension(format!(
            "row {i} has {} entries, expected {n}",
            a[i].len()
        )));
    }
    let finite = c
        .iter()
        .chain(b)
        .chain(a.iter().flatten())
        .all(|v| v.is_finite());
    if !finite {
        return Err(LpError::NonFinite);
    }
    // Columns: x (n), slacks (m), artificials (m).
    let cols = n + 2 * m;
    let w = cols + 1;
    let mut data = vec![0.0; m * w];
    let mut basis = Vec::with_capacity(m);
    let mut flipped = vec![false; m];
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        flipped[i] = sign < 0.0;
        let row = &mut data[i * w..(i + 1) * w];
        for j in 0..n {
            row[j] = sign * a[i][j];
        }
        row[n + i] = sign;
        row[cols] = sign * b[i];
        if flipped[i] {
            row[n + m + i] = 1.0;
            basis.push(n + m + i);
        } else {
            basis.push(n + i);
        }
    }
    let mut tab = Tableau {
        rows: m,
        cols,
        data,
        basis,
        iterations: 0,
    };
    let limit = 50_000 + 50 * (n + m) * (m + 1);
    let is_art = |j: usize| j >= n + m;

    if flipped.iter().any(|f| *f) {
        let mut phase1 = vec![0.0; cols];
        for i in 0..m {
            if flipped[i] {
                phase1[n + m + i] = -1.0;
            }
        }
        tab.optimize(&phase1, &|j| j < n + m || flipped[j - n - m], limit)?;
        let residual: f64 = (0..m)
            .filter(|&i| is_art(tab.basis[i]))
            .map(|i| tab.rhs(i))
            .sum();
        let scale = 1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if residual > 1e-9 * scale {
            return Err(LpError::Infeasible(residual));
        }
        // Replace artificials left in the basis at zero level where possible.
        for i in 0..m {
            if is_art(tab.basis[i]) {
                if let Some(j) = (0..n + m).find(|&j| tab.at(i, j).abs() > 1e-9) {
                    tab.pivot(i, j);
                }
            }
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..n].copy_from_slice(c);
    tab.optimize(&cost, &|j| !is_art(j), limit)?;

    let mut x = vec![0.0; n];
    for i in 0..m {
        if tab.basis[i] < n {
            x[tab.basis[i]] = tab.rhs(i).max(0.0);
        }
    }
    // pi = c_B B^{-1}; column i of B^{-1} sits under the slack (or, for
    // flipped rows, the artificial) that formed the initial identity.
    let duals = (0..m)
        .map(|k| {
            let col = if flipped[k] { n + m + k } else { n + k };
            let pi: f64 = (0..m).map(|i| cost[tab.basis[i]] * tab.at(i, col)).sum();
            if flipped[k] {
                -pi
            } else {
                pi
            }
        })
        .collect();
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution {
        x,
        objective,
        duals,
        iterations: tab.iterations,
    })
}
