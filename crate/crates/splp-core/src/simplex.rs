//! Dense primal simplex for the restricted master problems:
//! minimize `c . p` subject to `p >= 0`, `sum p = 1`, `A p = 0`.
//!
//! The masters are small (tens of rows, hundreds of columns), so the solver
//! favours robustness: phase-1/phase-2 with Bland's rule, a fresh LU
//! factorization of the basis every iteration, and redundant rows handled by
//! keeping their zero-cost artificial basic (which pins the corresponding
//! dual multiplier to zero).

use thiserror::Error;

/// Master LP data. `columns[l]` holds the K moment-row entries of column `l`;
/// the convexity row `sum p = 1` is implicit.
#[derive(Debug, Clone, Default)]
pub struct MasterLp {
    pub k: usize,
    pub costs: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
}

impl MasterLp {
    pub fn new(k: usize) -> MasterLp {
        MasterLp {
            k,
            costs: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn add_column(&mut self, cost: f64, rows: Vec<f64>) -> usize {
        assert_eq!(rows.len(), self.k, "column has wrong row count");
        assert!(
            cost.is_finite() && rows.iter().all(|v| v.is_finite()),
            "non-finite master entry"
        );
        self.costs.push(cost);
        self.columns.push(rows);
        self.costs.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.costs.len()
    }

    /// Text dump of the tableau data for debugging.
    pub fn debug_dump(&self) -> String {
        let mut s = format!("master: {} rows x {} cols\ncosts:", self.k + 1, self.n_cols());
        for c in &self.costs {
            s.push_str(&format!(" {c:.6e}"));
        }
        s.push('\n');
        for i in 0..self.k {
            s.push_str(&format!("row {i}:"));
            for col in &self.columns {
                s.push_str(&format!(" {:.6e}", col[i]));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

/// One basis slot: a real column or a kept artificial pinned to a redundant
/// row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisSlot {
    Column(usize),
    Artificial(usize),
}

/// Full basis handle usable for warm restarts on the same row structure.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WarmBasis {
    pub slots: Vec<BasisSlot>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub value: f64,
    pub weights: Vec<f64>,
    /// Real columns currently in the basis (at most K+1).
    pub basis_index_set: Vec<usize>,
    pub lambda0: f64,
    /// Dual multipliers in the sign convention
    /// `lambda0 <= cost_l + sum_i lambda[i] * rows_l[i]` for every column.
    pub lambda: Vec<f64>,
    pub warm: WarmBasis,
    /// Rows detected as linearly dependent during phase 1.
    pub eliminated_rows: Vec<usize>,
    pub iterations: usize,
}

impl LpSolution {
    /// Reduced cost of a column under the solution's duals (paper sign
    /// convention; nonnegative at optimality).
    pub fn reduced_cost(&self, lp: &MasterLp, l: usize) -> f64 {
        let mut r = lp.costs[l] - self.lambda0;
        for (i, a) in lp.columns[l].iter().enumerate() {
            r += self.lambda[i] * a;
        }
        r
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("basis matrix is singular")]
    SingularBasis,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    /// Smallest direction component eligible for the ratio test.
    pub pivot_tol: f64,
    pub max_iterations: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            feas_tol: 1e-8,
            opt_tol: 1e-8,
            pivot_tol: 1e-9,
            max_iterations: 50_000,
        }
    }
}

/// Solves a master LP from scratch.
pub fn solve_master(lp: &MasterLp) -> LpSolution {
    solve_master_warm(lp, None, &SimplexOptions::default())
}

/// Solves a master LP, optionally restarting from a previous basis on the
/// same rows (adding columns keeps an old basis primal feasible).
pub fn solve_master_warm(
    lp: &MasterLp,
    warm: Option<&WarmBasis>,
    options: &SimplexOptions,
) -> LpSolution {
    crate::stats::bump(&crate::stats::MASTER_SOLVES, 1);
    let m = lp.k + 1;
    if lp.n_cols() < m {
        log::warn!(
            "master has {} columns for {} rows; expect degeneracy / row elimination",
            lp.n_cols(),
            m
        );
    }
    if let Some(w) = warm {
        if let Some(state) = State::from_warm(lp, w, options) {
            let mut state = state;
            match state.run_phase2(options) {
                sol if sol.status == LpStatus::IterationLimit && state.singular => {
                    log::warn!("warm basis went singular; restarting from phase 1");
                }
                sol => return sol,
            }
        }
    }
    match State::phase1(lp, options) {
        Phase1Outcome::Feasible(mut state) => state.run_phase2(options),
        Phase1Outcome::Infeasible => LpSolution {
            status: LpStatus::Infeasible,
            value: f64::INFINITY,
            weights: vec![0.0; lp.n_cols()],
            basis_index_set: Vec::new(),
            lambda0: f64::NAN,
            lambda: vec![f64::NAN; lp.k],
            warm: WarmBasis::default(),
            eliminated_rows: Vec::new(),
            iterations: 0,
        },
        Phase1Outcome::Stalled(sol) => sol,
    }
}

enum Phase1Outcome<'a> {
    Feasible(State<'a>),
    Infeasible,
    Stalled(LpSolution),
}

struct State<'a> {
    lp: &'a MasterLp,
    m: usize,
    slots: Vec<BasisSlot>,
    eliminated_rows: Vec<usize>,
    iterations: usize,
    singular: bool,
}

impl<'a> State<'a> {
    fn from_warm(lp: &'a MasterLp, warm: &WarmBasis, _options: &SimplexOptions) -> Option<State<'a>> {
        let m = lp.k + 1;
        if warm.slots.len() != m {
            return None;
        }
        for s in &warm.slots {
            match s {
                BasisSlot::Column(j) if *j >= lp.n_cols() => return None,
                BasisSlot::Artificial(r) if *r >= m => return None,
                _ => {}
            }
        }
        let mut state = State {
            lp,
            m,
            slots: warm.slots.clone(),
            eliminated_rows: Vec::new(),
            iterations: 0,
            singular: false,
        };
        let lu = state.factorize()?;
        let x = lu.solve(&state.rhs());
        if x.iter().any(|v| *v < -1e-7 || !v.is_finite()) {
            return None;
        }
        state.eliminated_rows = state
            .slots
            .iter()
            .filter_map(|s| match s {
                BasisSlot::Artificial(r) if *r > 0 => Some(*r - 1),
                _ => None,
            })
            .collect();
        Some(state)
    }

    fn phase1(lp: &'a MasterLp, options: &SimplexOptions) -> Phase1Outcome<'a> {
        let m = lp.k + 1;
        let mut state = State {
            lp,
            m,
            slots: (0..m).map(BasisSlot::Artificial).collect(),
            eliminated_rows: Vec::new(),
            iterations: 0,
            singular: false,
        };
        // phase-1 costs: artificials 1, real columns 0
        let outcome = state.simplex_loop(Phase::One, options);
        match outcome {
            LoopOutcome::Optimal => {}
            LoopOutcome::IterationLimit => {
                return Phase1Outcome::Stalled(state.make_solution(LpStatus::IterationLimit, options))
            }
            LoopOutcome::Unbounded => unreachable!("phase-1 objective is bounded below by 0"),
            LoopOutcome::Singular => {
                return Phase1Outcome::Stalled(state.make_solution(LpStatus::IterationLimit, options))
            }
        }
        // infeasible if artificial mass remains
        let lu = match state.factorize() {
            Some(lu) => lu,
            None => return Phase1Outcome::Infeasible,
        };
        let x = lu.solve(&state.rhs());
        let artificial_mass: f64 = state
            .slots
            .iter()
            .zip(&x)
            .filter(|(s, _)| matches!(s, BasisSlot::Artificial(_)))
            .map(|(_, v)| v.abs())
            .sum();
        if artificial_mass > options.feas_tol {
            return Phase1Outcome::Infeasible;
        }
        state.drive_out_artificials(options);
        Phase1Outcome::Feasible(state)
    }

    fn rhs(&self) -> Vec<f64> {
        let mut rhs = vec![0.0; self.m];
        rhs[0] = 1.0;
        rhs
    }

    fn basis_column(&self, slot: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.slots[slot] {
            BasisSlot::Column(j) => {
                out[0] = 1.0;
                out[1..].copy_from_slice(&self.lp.columns[j]);
            }
            BasisSlot::Artificial(r) => out[r] = 1.0,
        }
    }

    fn factorize(&self) -> Option<Lu> {
        let m = self.m;
        let mut mat = vec![0.0; m * m];
        let mut col = vec![0.0; m];
        for s in 0..m {
            self.basis_column(s, &mut col);
            for r in 0..m {
                mat[r * m + s] = col[r];
            }
        }
        Lu::factor(mat, m)
    }

    /// Pivot out basic artificials after phase 1; rows that admit no pivot
    /// are recorded as eliminated (their artificial stays, dual pinned to 0).
    fn drive_out_artificials(&mut self, options: &SimplexOptions) {
        loop {
            let lu = match self.factorize() {
                Some(lu) => lu,
                None => return,
            };
            let art_slot = self.slots.iter().position(|s| {
                matches!(s, BasisSlot::Artificial(r) if *r == 0 || !self.eliminated_rows.contains(&(r - 1)))
            });
            let Some(slot) = art_slot else { return };
            let row = match self.slots[slot] {
                BasisSlot::Artificial(r) => r,
                _ => unreachable!(),
            };
            let in_basis: Vec<usize> = self.basic_columns();
            let mut pivoted = false;
            let mut a = vec![0.0; self.m];
            for j in 0..self.lp.n_cols() {
                if in_basis.contains(&j) {
                    continue;
                }
                a[0] = 1.0;
                a[1..].copy_from_slice(&self.lp.columns[j]);
                let d = lu.solve(&a);
                if d[slot].abs() > options.pivot_tol {
                    self.slots[slot] = BasisSlot::Column(j);
                    pivoted = true;
                    break;
                }
            }
            if !pivoted {
                assert!(row > 0, "convexity row cannot be redundant in a feasible master");
                log::warn!(
                    "master moment row {} is linearly dependent; eliminating (dual pinned to 0)",
                    row - 1
                );
                self.eliminated_rows.push(row - 1);
            }
        }
    }

    fn basic_columns(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                BasisSlot::Column(j) => Some(*j),
                _ => None,
            })
            .collect()
    }

    fn cost_of_slot(&self, slot: usize, phase: Phase) -> f64 {
        match (phase, self.slots[slot]) {
            (Phase::One, BasisSlot::Artificial(_)) => 1.0,
            (Phase::One, BasisSlot::Column(_)) => 0.0,
            (Phase::Two, BasisSlot::Artificial(_)) => 0.0,
            (Phase::Two, BasisSlot::Column(j)) => self.lp.costs[j],
        }
    }

    fn simplex_loop(&mut self, phase: Phase, options: &SimplexOptions) -> LoopOutcome {
        let n = self.lp.n_cols();
        let mut a = vec![0.0; self.m];
        let mut last_objective = f64::INFINITY;
        // anchor columns for the lexicographic rule: the basis at loop entry.
        // Rows of B^{-1} B0 start as the identity (lex-positive), which is
        // what the anti-cycling argument needs.
        let mut anchor: Vec<Vec<f64>> = Vec::with_capacity(self.m);
        for s in 0..self.m {
            let mut col = vec![0.0; self.m];
            self.basis_column(s, &mut col);
            anchor.push(col);
        }
        // basis-signature log for cycle detection; floating point can defeat
        // the lexicographic tie-breaks on ill-conditioned bases
        let mut seen = std::collections::HashSet::new();
        let mut bland = false;
        let mut worst_accepted = 0.0_f64;
        loop {
            if self.iterations >= options.max_iterations {
                log::warn!(
                    "simplex iteration limit: {} rows x {} cols, phase2 {}, objective {last_objective:.6e}",
                    self.m,
                    n,
                    matches!(phase, Phase::Two)
                );
                return LoopOutcome::IterationLimit;
            }
            let Some(lu) = self.factorize() else {
                self.singular = true;
                return LoopOutcome::Singular;
            };
            let cb: Vec<f64> = (0..self.m).map(|s| self.cost_of_slot(s, phase)).collect();
            let y = lu.solve_transposed(&cb);
            let x = lu.solve(&self.rhs());
            last_objective = cb.iter().zip(&x).map(|(c, v)| c * v).sum();
            let in_basis = self.basic_columns();

            let revisited = !seen.insert(self.basis_signature());
            if revisited && !bland {
                bland = true;
            } else if revisited && bland {
                // Bland revisited a basis: numerics defeated the pivot rules.
                // Accept the basis if its dual violation is mild; the caller
                // sees the quality through the pricing certificate anyway.
                let min_red = self.min_reduced_cost(&y, phase);
                if min_red >= -1e-5 * (1.0 + last_objective.abs()) {
                    log::warn!(
                        "accepting cycling basis with reduced-cost violation {min_red:.3e}"
                    );
                    worst_accepted = worst_accepted.max(-min_red);
                    return LoopOutcome::Optimal;
                }
                log::warn!("cycling with reduced cost {min_red:.3e}; giving up on this basis");
                return LoopOutcome::IterationLimit;
            }

            // entering: Dantzig (most negative reduced cost) or Bland after
            // a basis revisit
            let mut entering: Option<(f64, usize)> = None;
            for j in 0..n {
                if in_basis.contains(&j) {
                    continue;
                }
                let cost_j = match phase {
                    Phase::One => 0.0,
                    Phase::Two => self.lp.costs[j],
                };
                let mut red = cost_j - y[0];
                for (i, v) in self.lp.columns[j].iter().enumerate() {
                    red -= y[i + 1] * v;
                }
                if red < -options.opt_tol {
                    if bland {
                        entering = Some((red, j));
                        break;
                    }
                    if entering.as_ref().map_or(true, |(r, _)| red < *r) {
                        entering = Some((red, j));
                    }
                }
            }
            let Some((_, q)) = entering else {
                let _ = worst_accepted;
                return LoopOutcome::Optimal;
            };

            a[0] = 1.0;
            a[1..].copy_from_slice(&self.lp.columns[q]);
            let d = lu.solve(&a);
            let Some(leave) = self.lex_ratio_test(&lu, &x, &d, &anchor, options) else {
                return LoopOutcome::Unbounded;
            };
            self.slots[leave] = BasisSlot::Column(q);
            self.iterations += 1;
            crate::stats::bump(&crate::stats::SIMPLEX_ITERATIONS, 1);
        }
    }

    fn basis_signature(&self) -> u64 {
        let mut ids: Vec<u64> = self
            .slots
            .iter()
            .map(|s| match s {
                BasisSlot::Column(j) => *j as u64,
                BasisSlot::Artificial(r) => u64::MAX - *r as u64,
            })
            .collect();
        ids.sort_unstable();
        let mut h: u64 = 0xcbf29ce484222325;
        for id in ids {
            h ^= id;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    fn min_reduced_cost(&self, y: &[f64], phase: Phase) -> f64 {
        let mut min_red = f64::INFINITY;
        for j in 0..self.lp.n_cols() {
            let cost_j = match phase {
                Phase::One => 0.0,
                Phase::Two => self.lp.costs[j],
            };
            let mut red = cost_j - y[0];
            for (i, v) in self.lp.columns[j].iter().enumerate() {
                red -= y[i + 1] * v;
            }
            min_red = min_red.min(red);
        }
        min_red
    }

    /// Lexicographic ratio test: among the minimum-ratio rows, break ties by
    /// the lexicographic order of the rows of `B^{-1} B0` scaled by `1/d_s`,
    /// where `B0` is the basis at loop entry. Those rows start as the
    /// identity, so every pivot strictly lex-decreases the basis state and
    /// degenerate cycling is impossible regardless of the entering rule.
    fn lex_ratio_test(
        &self,
        lu: &Lu,
        x: &[f64],
        d: &[f64],
        anchor: &[Vec<f64>],
        options: &SimplexOptions,
    ) -> Option<usize> {
        let mut ties: Vec<usize> = Vec::new();
        let mut best_ratio = f64::INFINITY;
        for s in 0..self.m {
            if d[s] > options.pivot_tol {
                let ratio = x[s].max(0.0) / d[s];
                if ties.is_empty() {
                    best_ratio = ratio;
                    ties.push(s);
                    continue;
                }
                let band = 1e-12 * (1.0 + best_ratio.abs());
                if ratio < best_ratio - band {
                    best_ratio = ratio;
                    ties.clear();
                    ties.push(s);
                } else if ratio <= best_ratio + band {
                    ties.push(s);
                }
            }
        }
        match ties.len() {
            0 => None,
            1 => Some(ties[0]),
            _ => {
                for col in 0..self.m {
                    let binv_col = lu.solve(&anchor[col]);
                    let mut best = f64::INFINITY;
                    let mut keep: Vec<usize> = Vec::new();
                    for &s in &ties {
                        let v = binv_col[s] / d[s];
                        if keep.is_empty() || v < best - 1e-11 * (1.0 + best.abs()) {
                            best = v;
                            keep.clear();
                            keep.push(s);
                        } else if v <= best + 1e-11 * (1.0 + best.abs()) {
                            keep.push(s);
                        }
                    }
                    ties = keep;
                    if ties.len() == 1 {
                        return Some(ties[0]);
                    }
                }
                // numerically indistinguishable rows: smallest slot index
                ties.into_iter().min()
            }
        }
    }

    fn run_phase2(&mut self, options: &SimplexOptions) -> LpSolution {
        let status = match self.simplex_loop(Phase::Two, options) {
            LoopOutcome::Optimal => LpStatus::Optimal,
            LoopOutcome::Unbounded => LpStatus::Unbounded,
            LoopOutcome::IterationLimit | LoopOutcome::Singular => LpStatus::IterationLimit,
        };
        self.make_solution(status, options)
    }

    fn make_solution(&self, status: LpStatus, _options: &SimplexOptions) -> LpSolution {
        let n = self.lp.n_cols();
        let mut weights = vec![0.0; n];
        let mut lambda0 = f64::NAN;
        let mut lambda = vec![f64::NAN; self.lp.k];
        let mut value = f64::NAN;
        if let Some(lu) = self.factorize() {
            let x = lu.solve(&self.rhs());
            for (s, slot) in self.slots.iter().enumerate() {
                if let BasisSlot::Column(j) = slot {
                    weights[*j] = x[s].max(0.0);
                }
            }
            let cb: Vec<f64> = (0..self.m).map(|s| self.cost_of_slot(s, Phase::Two)).collect();
            let y = lu.solve_transposed(&cb);
            lambda0 = y[0];
            for i in 0..self.lp.k {
                lambda[i] = -y[i + 1];
            }
            value = weights
                .iter()
                .zip(&self.lp.costs)
                .map(|(w, c)| w * c)
                .sum();
        }
        LpSolution {
            status,
            value,
            weights,
            basis_index_set: self.basic_columns(),
            lambda0,
            lambda,
            warm: WarmBasis {
                slots: self.slots.clone(),
            },
            eliminated_rows: self.eliminated_rows.clone(),
            iterations: self.iterations,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    One,
    Two,
}

enum LoopOutcome {
    Optimal,
    Unbounded,
    IterationLimit,
    Singular,
}

/// Dense LU with partial pivoting; factors once per simplex iteration.
/// Solves apply one pass of iterative refinement against the stored matrix
/// to keep duals usable on ill-conditioned bases.
struct Lu {
    m: usize,
    data: Vec<f64>,
    orig: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(mut data: Vec<f64>, m: usize) -> Option<Lu> {
        let orig = data.clone();
        let mut perm: Vec<usize> = (0..m).collect();
        for col in 0..m {
            let mut pivot_row = col;
            let mut pivot_val = data[col * m + col].abs();
            for r in col + 1..m {
                let v = data[r * m + col].abs();
                if v > pivot_val {
                    pivot_row = r;
                    pivot_val = v;
                }
            }
            if pivot_val < 1e-13 {
                return None;
            }
            if pivot_row != col {
                for j in 0..m {
                    data.swap(col * m + j, pivot_row * m + j);
                }
                perm.swap(col, pivot_row);
            }
            let inv = 1.0 / data[col * m + col];
            for r in col + 1..m {
                let factor = data[r * m + col] * inv;
                data[r * m + col] = factor;
                for j in col + 1..m {
                    data[r * m + j] -= factor * data[col * m + j];
                }
            }
        }
        Some(Lu { m, data, orig, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.solve_raw(b);
        // one refinement pass: r = b - Bx, x += B^{-1} r
        let m = self.m;
        let mut r = b.to_vec();
        for i in 0..m {
            for j in 0..m {
                r[i] -= self.orig[i * m + j] * x[j];
            }
        }
        let dx = self.solve_raw(&r);
        for i in 0..m {
            x[i] += dx[i];
        }
        x
    }

    fn solve_raw(&self, b: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 1..m {
            for c in 0..r {
                x[r] -= self.data[r * m + c] * x[c];
            }
        }
        for r in (0..m).rev() {
            for c in r + 1..m {
                x[r] -= self.data[r * m + c] * x[c];
            }
            x[r] /= self.data[r * m + r];
        }
        x
    }

    /// Solves `B^T y = c` via the factored form (PB = LU => B^T = U^T L^T P).
    fn solve_transposed(&self, c: &[f64]) -> Vec<f64> {
        let mut y = self.solve_transposed_raw(c);
        let m = self.m;
        let mut r = c.to_vec();
        for i in 0..m {
            for j in 0..m {
                r[i] -= self.orig[j * m + i] * y[j];
            }
        }
        let dy = self.solve_transposed_raw(&r);
        for i in 0..m {
            y[i] += dy[i];
        }
        y
    }

    fn solve_transposed_raw(&self, c: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut x = c.to_vec();
        // forward: U^T w = c
        for r in 0..m {
            for k in 0..r {
                x[r] -= self.data[k * m + r] * x[k];
            }
            x[r] /= self.data[r * m + r];
        }
        // backward: L^T v = w
        for r in (0..m).rev() {
            for k in r + 1..m {
                x[r] -= self.data[k * m + r] * x[k];
            }
        }
        // undo permutation: y = P^T v
        let mut y = vec![0.0; m];
        for (i, &p) in self.perm.iter().enumerate() {
            y[p] = x[i];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing;

    #[test]
    fn pure_selection_without_rows() {
        let mut lp = MasterLp::new(0);
        for (c, _) in [(3.0, ()), (1.0, ()), (2.0, ())] {
            lp.add_column(c, vec![]);
        }
        let sol = solve_master(&lp);
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value - 1.0).abs() < 1e-12);
        assert!((sol.weights[1] - 1.0).abs() < 1e-12);
        assert!((sol.lambda0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balance_constraint_splits_weight() {
        let mut lp = MasterLp::new(1);
        lp.add_column(0.0, vec![1.0]);
        lp.add_column(1.0, vec![-1.0]);
        let sol = solve_master(&lp);
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value - 0.5).abs() < 1e-12);
        assert!((sol.weights[0] - 0.5).abs() < 1e-12);
        assert!((sol.weights[1] - 0.5).abs() < 1e-12);
        assert!((sol.lambda0 - 0.5).abs() < 1e-12);
        // reduced costs vanish on both basic columns
        assert!(sol.reduced_cost(&lp, 0).abs() < 1e-12);
        assert!(sol.reduced_cost(&lp, 1).abs() < 1e-12);
    }

    #[test]
    fn infeasible_when_rows_cannot_balance() {
        let mut lp = MasterLp::new(1);
        lp.add_column(0.0, vec![1.0]);
        lp.add_column(0.0, vec![2.0]);
        let sol = solve_master(&lp);
        assert_eq!(sol.status, LpStatus::Infeasible);
    }

    #[test]
    fn redundant_row_is_eliminated() {
        // second row is twice the first; solvable but rank deficient
        let mut lp = MasterLp::new(2);
        lp.add_column(1.0, vec![1.0, 2.0]);
        lp.add_column(0.0, vec![-1.0, -2.0]);
        let sol = solve_master(&lp);
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.value - 0.5).abs() < 1e-9);
        assert_eq!(sol.eliminated_rows.len(), 1);
        let r = sol.eliminated_rows[0];
        assert!(sol.lambda[r].abs() < 1e-12, "eliminated row dual pinned to 0");
    }

    #[test]
    fn matches_exhaustive_enumeration_on_random_instances() {
        let mut failures = Vec::new();
        for seed in 0..50u64 {
            let lp = testing::random_feasible_master(seed, 40, 5);
            let sol = solve_master(&lp);
            assert_eq!(sol.status, LpStatus::Optimal, "seed {seed}");
            testing::assert_kkt(&lp, &sol, 1e-7);
            let oracle = testing::enumerate_basic_optimum(&lp).expect("feasible by construction");
            if (sol.value - oracle).abs() > 1e-7 {
                failures.push((seed, sol.value, oracle));
            }
        }
        assert!(failures.is_empty(), "value mismatches: {failures:?}");
    }

    #[test]
    fn deterministic_basis_under_repeat_solves() {
        let lp = testing::random_feasible_master(7, 30, 4);
        let a = solve_master(&lp);
        let b = solve_master(&lp);
        assert_eq!(a.basis_index_set, b.basis_index_set);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn warm_start_accepts_extended_column_set() {
        let mut lp = testing::random_feasible_master(3, 25, 3);
        let first = solve_master(&lp);
        assert_eq!(first.status, LpStatus::Optimal);
        // add a column with large positive cost: optimum unchanged
        lp.add_column(100.0, vec![0.05; lp.k]);
        let warm = solve_master_warm(&lp, Some(&first.warm), &SimplexOptions::default());
        assert_eq!(warm.status, LpStatus::Optimal);
        assert!((warm.value - first.value).abs() < 1e-10);
        assert!(warm.iterations <= first.iterations);
    }

    #[test]
    fn warm_start_with_improving_column() {
        let mut lp = MasterLp::new(1);
        lp.add_column(2.0, vec![1.0]);
        lp.add_column(3.0, vec![-1.0]);
        let first = solve_master(&lp);
        assert!((first.value - 2.5).abs() < 1e-12);
        lp.add_column(0.0, vec![0.0]);
        let warm = solve_master_warm(&lp, Some(&first.warm), &SimplexOptions::default());
        assert_eq!(warm.status, LpStatus::Optimal);
        assert!((warm.value - 0.0).abs() < 1e-12);
        assert!((warm.weights[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn at_most_k_plus_one_positive_weights() {
        for seed in 0..10u64 {
            let lp = testing::random_feasible_master(seed + 100, 35, 5);
            let sol = solve_master(&lp);
            assert_eq!(sol.status, LpStatus::Optimal);
            let positive = sol.weights.iter().filter(|w| **w > 1e-10).count();
            assert!(positive <= lp.k + 1, "{positive} > {}", lp.k + 1);
        }
    }
}
