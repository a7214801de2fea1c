//! Small dense linear-program solver.
//!
//! Two-phase primal simplex on the standard form
//!
//! ```text
//! minimize    c . x
//! subject to  A x = b,   x >= 0
//! ```
//!
//! kept deliberately simple: full tableau, Bland's rule (no cycling), dense
//! arithmetic. The planning problems solved here have a handful of rows and
//! columns, so robustness matters and speed does not.

/// Pivot elements smaller than this are treated as zero.
const PIVOT_TOL: f64 = 1e-11;
/// Feasibility tolerance on the phase-1 objective and on basic values.
const FEAS_TOL: f64 = 1e-9;

/// `minimize objective . x` subject to `rows[k].0 . x = rows[k].1`, `x >= 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<(Vec<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// `rows x (cols + 1)`; last column is the right-hand side.
    data: Vec<Vec<f64>>,
    /// Basic variable of each row.
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.data[r][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.data[row][col];
        debug_assert!(piv.abs() > PIVOT_TOL);
        for v in self.data[row].iter_mut() {
            *v /= piv;
        }
        for r in 0..self.data.len() {
            if r == row {
                continue;
            }
            let factor = self.data[r][col];
            if factor == 0.0 {
                continue;
            }
            for c in 0..=self.cols {
                let delta = factor * self.data[row][c];
                self.data[r][c] -= delta;
            }
        }
        self.basis[row] = col;
    }

    /// Minimize `cost . x` from the current basic feasible point. Returns
    /// `false` if the problem is unbounded in the allowed columns.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> bool {
        loop {
            // Reduced costs via the current basis: z_j = c_j - c_B . B^-1 A_j.
            let mut reduced = vec![0.0; allowed];
            for (j, red) in reduced.iter_mut().enumerate() {
                let mut z = cost[j];
                for (r, &bv) in self.basis.iter().enumerate() {
                    z -= cost[bv] * self.data[r][j];
                }
                *red = z;
            }
            // Bland's rule: first column with a negative reduced cost.
            let entering = match (0..allowed).find(|&j| reduced[j] < -FEAS_TOL) {
                Some(j) => j,
                None => return true,
            };
            // Ratio test, Bland tie-break on the smallest basic variable.
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.data.len() {
                let a = self.data[r][entering];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    match leave {
                        None => leave = Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - PIVOT_TOL
                                || (ratio < lratio + PIVOT_TOL && self.basis[r] < self.basis[lr])
                            {
                                leave = Some((r, ratio));
                            }
                        }
                    }
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, entering),
                None => return false,
            }
        }
    }
}

/// Solve the linear program with the two-phase simplex method.
pub fn solve(lp: &LinearProgram) -> LpOutcome {
    let m = lp.rows.len();
    let n = lp.num_vars;
    let cols = n + m; // structural + artificial

    let mut data = Vec::with_capacity(m);
    for (coeffs, b) in &lp.rows {
        assert_eq!(coeffs.len(), n, "row length mismatch");
        let mut row = vec![0.0; cols + 1];
        let flip = if *b < 0.0 { -1.0 } else { 1.0 };
        for (j, &a) in coeffs.iter().enumerate() {
            row[j] = flip * a;
        }
        row[cols] = flip * b;
        data.push(row);
    }
    for (r, row) in data.iter_mut().enumerate() {
        row[n + r] = 1.0;
    }

    let mut tab = Tableau {
        data,
        basis: (n..n + m).collect(),
        cols,
    };

    // Phase 1: minimize the sum of artificials.
    let mut phase1 = vec![0.0; cols];
    for c in phase1.iter_mut().skip(n) {
        *c = 1.0;
    }
    if !tab.optimize(&phase1, cols) {
        // Cannot happen: the phase-1 objective is bounded below by zero.
        return LpOutcome::Infeasible;
    }
    let art_sum: f64 = tab
        .basis
        .iter()
        .enumerate()
        .filter(|(_, &bv)| bv >= n)
        .map(|(r, _)| tab.rhs(r))
        .sum();
    if art_sum > FEAS_TOL {
        return LpOutcome::Infeasible;
    }
    // Drive leftover (degenerate) artificials out of the basis.
    for r in 0..m {
        if tab.basis[r] >= n {
            if let Some(c) = (0..n).find(|&c| tab.data[r][c].abs() > PIVOT_TOL) {
                tab.pivot(r, c);
            }
            // A fully-zero row is a redundant constraint; its artificial stays
            // basic at value zero and never pivots again.
        }
    }

    // Phase 2 on the structural columns only.
    let mut cost = lp.objective.clone();
    cost.resize(cols, 0.0);
    if !tab.optimize(&cost, n) {
        return LpOutcome::Unbounded;
    }

    let mut x = vec![0.0; n];
    for (r, &bv) in tab.basis.iter().enumerate() {
        if bv < n {
            x[bv] = tab.rhs(r);
        }
    }
    let value = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| c * v)
        .sum::<f64>();
    LpOutcome::Optimal { x, value }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn optimal(outcome: LpOutcome) -> (Vec<f64>, f64) {
        match outcome {
            LpOutcome::Optimal { x, value } => (x, value),
            other => panic!("expected optimum, got {other:?}"),
        }
    }

    #[test]
    fn single_variable_equality() {
        // min x s.t. x = 3
        let lp = LinearProgram {
            num_vars: 1,
            objective: vec![1.0],
            rows: vec![(vec![1.0], 3.0)],
        };
        let (x, value) = optimal(solve(&lp));
        assert!((x[0] - 3.0).abs() < 1e-12);
        assert!((value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_variable_minimization() {
        // min x2 s.t. x1 + x2 = 4, x1 <= 3 (as x1 + s = 3)
        let lp = LinearProgram {
            num_vars: 3,
            objective: vec![0.0, 1.0, 0.0],
            rows: vec![
                (vec![1.0, 1.0, 0.0], 4.0),
                (vec![1.0, 0.0, 1.0], 3.0),
            ],
        };
        let (x, value) = optimal(solve(&lp));
        assert!((value - 1.0).abs() < 1e-12);
        assert!((x[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_system() {
        // x = 1 and x = 2 simultaneously.
        let lp = LinearProgram {
            num_vars: 1,
            objective: vec![1.0],
            rows: vec![(vec![1.0], 1.0), (vec![1.0], 2.0)],
        };
        assert_eq!(solve(&lp), LpOutcome::Infeasible);
    }

    #[test]
    fn unbounded_objective() {
        // min -x1 s.t. x1 - x2 = 0 (both can grow without bound).
        let lp = LinearProgram {
            num_vars: 2,
            objective: vec![-1.0, 0.0],
            rows: vec![(vec![1.0, -1.0], 0.0)],
        };
        assert_eq!(solve(&lp), LpOutcome::Unbounded);
    }

    #[test]
    fn negative_rhs_is_normalized() {
        // min x1 s.t. -x1 = -2.
        let lp = LinearProgram {
            num_vars: 1,
            objective: vec![1.0],
            rows: vec![(vec![-1.0], -2.0)],
        };
        let (x, _) = optimal(solve(&lp));
        assert!((x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn redundant_constraints_are_tolerated() {
        // Duplicate row: x1 + x2 = 2 twice.
        let lp = LinearProgram {
            num_vars: 2,
            objective: vec![1.0, 2.0],
            rows: vec![
                (vec![1.0, 1.0], 2.0),
                (vec![1.0, 1.0], 2.0),
            ],
        };
        let (x, value) = optimal(solve(&lp));
        assert!((value - 2.0).abs() < 1e-12);
        assert!((x[0] - 2.0).abs() < 1e-12);
    }
}
