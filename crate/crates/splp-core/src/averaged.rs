//! Assembly and solution of the finite-basis averaged problem by two-level
//! column generation.
//!
//! Outer level: a master LP over columns `(mu, z)` — a slow-state point `z`
//! paired with a fast-invariant measure `mu` — with one row per slow test
//! function. Inner level: for a candidate `z` and outer duals `lambda`,
//! a column-generation solve over `(u, y)` finds the measure minimizing
//! `int [G + kappa . g] d mu` subject to the fast moment conditions
//! `int grad(phi_j) . f d mu = 0`, where `kappa = sum lambda_i grad(psi_i)(z)`.
//! The inner master's duals are the associated certificate coefficients
//! `omega_z`; the outer duals are the averaged certificate `lambda`.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{BasisScratch, MonomialBasis};
use crate::colgen::{
    self, ColGenConfig, ColGenError, ColGenStatus, EvalScratch, GridPolish, GridPolishConfig,
    IterationRecord, PricedPoint, PricingOracle, SemiInfiniteLP, SilpFunctions,
};
use crate::control::{ControlError, EtaProvider, MinimizerScratch, PointwiseMinimizer};
use crate::measures::AtomicMeasure;
use crate::model::{Box, ControlProblem};
use crate::simplex::{solve_master_warm, LpStatus, MasterLp, SimplexOptions, WarmBasis};

#[derive(Debug, Error)]
pub enum AveragedError {
    #[error("invalid averaged spec: {0}")]
    InvalidSpec(String),
    #[error("inner problem infeasible at z = {z:?}; enlarge the inner grid")]
    InnerInfeasible { z: Vec<f64> },
    #[error("outer master infeasible from the initial grid")]
    OuterInfeasible,
    #[error("outer pricing stalled with certificate residual {residual:.3e}")]
    OuterStall { residual: f64 },
    #[error("outer master failed: {0:?}")]
    MasterFailed(LpStatus),
    #[error(transparent)]
    ColGen(#[from] ColGenError),
}

/// The averaged problem instance: the control problem plus the two monomial
/// test families. Periodic mode (discount = 0) drops the initial-state terms.
#[derive(Debug, Clone)]
pub struct AveragedSpec {
    pub problem: Arc<ControlProblem>,
    pub slow_basis: MonomialBasis,
    pub fast_basis: MonomialBasis,
    pub periodic: bool,
}

impl AveragedSpec {
    pub fn new(
        problem: Arc<ControlProblem>,
        slow_basis: MonomialBasis,
        fast_basis: MonomialBasis,
    ) -> Result<AveragedSpec, AveragedError> {
        if slow_basis.dim != problem.dim_z {
            return Err(AveragedError::InvalidSpec(format!(
                "slow basis dimension {} != dim_z {}",
                slow_basis.dim, problem.dim_z
            )));
        }
        if fast_basis.dim != problem.dim_y {
            return Err(AveragedError::InvalidSpec(format!(
                "fast basis dimension {} != dim_y {}",
                fast_basis.dim, problem.dim_y
            )));
        }
        let periodic = problem.periodic();
        Ok(AveragedSpec {
            problem,
            slow_basis,
            fast_basis,
            periodic,
        })
    }

    pub fn n(&self) -> usize {
        self.slow_basis.len()
    }

    pub fn m(&self) -> usize {
        self.fast_basis.len()
    }

    fn product_domain(&self) -> Box {
        let mut lower = self.problem.u_box.lower.clone();
        lower.extend_from_slice(&self.problem.y_box.lower);
        let mut upper = self.problem.u_box.upper.clone();
        upper.extend_from_slice(&self.problem.y_box.upper);
        Box::new(lower, upper)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedConfig {
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Outer pricing scan density over Z.
    pub outer_grid_per_dim: usize,
    /// Compass evaluations refining the outer pricing minimizer.
    pub outer_refine_budget: usize,
    /// Initial lattice density over U x Y for inner masters.
    pub inner_initial_per_dim: usize,
    /// Generic inner pricing (used when no closed-form control minimizer).
    pub inner_pricing: GridPolishConfig,
    /// Fast-state scan density for the Hamiltonian pricing oracle.
    pub hamiltonian_y_grid: usize,
    pub hamiltonian_budget: usize,
    pub seed: u64,
    pub parallel: bool,
    /// Column-cache cap per cached slow point.
    pub max_cached_columns: usize,
}

impl Default for AveragedConfig {
    fn default() -> Self {
        AveragedConfig {
            outer_tol: 1e-6,
            inner_tol: 1e-7,
            max_outer_iterations: 200,
            max_inner_iterations: 800,
            outer_grid_per_dim: 33,
            outer_refine_budget: 24,
            inner_initial_per_dim: 5,
            inner_pricing: GridPolishConfig::default(),
            hamiltonian_y_grid: 25,
            hamiltonian_budget: 400,
            seed: 42,
            parallel: true,
            max_cached_columns: 600,
        }
    }
}

/// Inner solve output: the fast-invariant measure at `z` under outer duals,
/// its value, the associated dual coefficients and the averaged drift/cost.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InnerSolution {
    pub z: Vec<f64>,
    pub measure: AtomicMeasure,
    /// `min int [G + kappa . g] d mu` over the truncated invariant set.
    pub value: f64,
    /// Associated-dual coefficients (inner master duals).
    pub omega: Vec<f64>,
    /// `int g d mu`.
    pub gtilde: Vec<f64>,
    /// `int G d mu`.
    pub cost: f64,
}

impl InnerSolution {
    /// Fast moment residuals `|int grad(phi_j) . f d mu|`.
    pub fn moment_residuals(&self, spec: &AveragedSpec) -> Vec<f64> {
        let p = &spec.problem;
        let m = spec.m();
        let mut out = vec![0.0; m];
        let mut values = vec![0.0; m];
        let mut grads = vec![0.0; m * p.dim_y];
        let mut f = vec![0.0; p.dim_y];
        for (w, point) in &self.measure.atoms {
            let (u, y) = point.split_at(p.dim_u);
            p.eval_f(u, y, &self.z, &mut f);
            spec.fast_basis.eval_with_gradient(y, &mut values, &mut grads);
            for j in 0..m {
                let mut dot = 0.0;
                for d in 0..p.dim_y {
                    dot += grads[j * p.dim_y + d] * f[d];
                }
                out[j] += w * dot;
            }
        }
        out.iter_mut().for_each(|v| *v = v.abs());
        out
    }
}

/// One outer atom: weight, slow point and the frozen inner solution.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OuterAtom {
    pub weight: f64,
    pub z: Vec<f64>,
    pub inner: InnerSolution,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AveragedSolution {
    /// Optimal value of the finite-basis averaged problem.
    pub value: f64,
    pub lambda0: f64,
    /// Averaged-dual certificate coefficients over the slow basis.
    pub lambda: Vec<f64>,
    pub outer_atoms: Vec<OuterAtom>,
    pub periodic: bool,
    pub converged: bool,
    /// `lambda0 - a` at termination.
    pub certificate_gap: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub history: Vec<IterationRecord>,
}

/// Pricing oracle for inner problems with a closed-form control minimizer:
/// the objective `Psi0 + omega . Psi` is exactly the Hamiltonian
/// `H(u, y) = G + kappa.g + grad(eta).f`, so the control dimensions are
/// minimized analytically and the search runs over the fast state only.
struct HamiltonianPricing {
    minimizer: PointwiseMinimizer,
    fast_basis: MonomialBasis,
    z: Vec<f64>,
    kappa: Vec<f64>,
    y_box: Box,
    y_grid: usize,
    budget: usize,
    scratch: MinimizerScratch,
    basis_scratch: BasisScratch,
}

impl HamiltonianPricing {
    fn phi(&mut self, y: &[f64], omega: &[f64]) -> f64 {
        let dim_y = self.y_box.dim();
        let mut eta_grad = std::mem::take(&mut self.scratch.eta_grad);
        eta_grad.resize(dim_y, 0.0);
        self.fast_basis
            .combination_gradient_into(omega, y, &mut self.basis_scratch, &mut eta_grad);
        let v = self
            .minimizer
            .minimize(y, &self.z, &self.kappa, &eta_grad, &mut self.scratch);
        self.scratch.eta_grad = eta_grad;
        v
    }
}

impl PricingOracle for HamiltonianPricing {
    fn price(&mut self, _silp: &SemiInfiniteLP, duals: &[f64], seeds: &[Vec<f64>]) -> PricedPoint {
        let dim_u = self.minimizer.problem().dim_u;
        let y_box = self.y_box.clone();
        let mut starts: Vec<(f64, Vec<f64>)> = Vec::new();
        for y in y_box.lattice(self.y_grid) {
            let v = self.phi(&y, duals);
            starts.push((v, y));
        }
        starts.sort_by(|a, b| a.0.total_cmp(&b.0));
        starts.truncate(8);
        for s in seeds {
            if s.len() == dim_u + y_box.dim() {
                let y = s[dim_u..].to_vec();
                let v = self.phi(&y, duals);
                starts.push((v, y));
            }
        }
        let budget_each = (self.budget / starts.len().max(1)).max(8);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (v0, y0) in &starts {
            let refined = {
                let mut eval = |y: &[f64]| self.phi(y, duals);
                colgen::compass_search(&y_box, &mut eval, y0, *v0, budget_each)
            };
            match &best {
                Some((bv, _)) if *bv <= refined.value => {}
                _ => best = Some((refined.value, refined.point)),
            }
        }
        let (value, y) = best.expect("nonempty start set");
        // recover the minimizing control at the chosen fast state
        let _ = self.phi(&y, duals);
        let mut point = self.scratch.best_u.clone();
        debug_assert_eq!(point.len(), dim_u);
        point.extend_from_slice(&y);
        PricedPoint { point, value }
    }
}

/// Functionals of the inner semi-infinite LP at a frozen slow point.
struct InnerFunctions {
    problem: Arc<ControlProblem>,
    fast_basis: MonomialBasis,
    z: Vec<f64>,
    kappa: Vec<f64>,
}

impl SilpFunctions for InnerFunctions {
    fn constraint_count(&self) -> usize {
        self.fast_basis.len()
    }

    fn eval(&self, x: &[f64], psi: &mut [f64], scratch: &mut EvalScratch) -> f64 {
        let p = &self.problem;
        let (u, y) = x.split_at(p.dim_u);
        let m = self.fast_basis.len();
        scratch.a.resize(p.dim_y, 0.0);
        scratch.b.resize(p.dim_z, 0.0);
        scratch.c.resize(m, 0.0);
        scratch.d.resize(m * p.dim_y, 0.0);
        p.eval_f(u, y, &self.z, &mut scratch.a);
        p.eval_g(u, y, &self.z, &mut scratch.b);
        self.fast_basis
            .eval_with_gradient(y, &mut scratch.c, &mut scratch.d);
        for j in 0..m {
            let mut dot = 0.0;
            for d in 0..p.dim_y {
                dot += scratch.d[j * p.dim_y + d] * scratch.a[d];
            }
            psi[j] = dot;
        }
        let mut v = p.eval_cost(u, y, &self.z);
        for (k, g) in self.kappa.iter().zip(&scratch.b) {
            v += k * g;
        }
        v
    }
}

type ZKey = Vec<u64>;

fn z_key(z: &[f64]) -> ZKey {
    z.iter().map(|v| v.to_bits()).collect()
}

fn lambda_fingerprint(lambda: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in lambda {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct InnerEntry {
    z: Vec<f64>,
    points: Vec<Vec<f64>>,
    warm: Option<WarmBasis>,
    last: Option<InnerSolution>,
    last_lambda: u64,
}

/// Inner-problem solver with a per-z warm-start cache. The fast moment rows
/// do not depend on the outer duals, so cached columns and bases are reused
/// across outer iterations; only the cost changes with `lambda`.
pub struct InnerSolver {
    spec: AveragedSpec,
    config: AveragedConfig,
    minimizer: PointwiseMinimizer,
    domain: Box,
    entries: Mutex<BTreeMap<ZKey, Arc<Mutex<InnerEntry>>>>,
}

impl InnerSolver {
    pub fn new(spec: AveragedSpec, config: AveragedConfig) -> InnerSolver {
        let minimizer = PointwiseMinimizer::new(spec.problem.clone());
        let domain = spec.product_domain();
        InnerSolver {
            spec,
            config,
            minimizer,
            domain,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn spec(&self) -> &AveragedSpec {
        &self.spec
    }

    fn base_lattice(&self) -> Vec<Vec<f64>> {
        self.domain.lattice(self.config.inner_initial_per_dim)
    }

    /// Creates (serially) the cache entry for `z` if missing, seeding its
    /// columns from the nearest already-solved entry.
    fn ensure_entry(&self, z: &[f64]) -> Arc<Mutex<InnerEntry>> {
        let key = z_key(z);
        let mut map = self.entries.lock().unwrap();
        if let Some(e) = map.get(&key) {
            return e.clone();
        }
        // nearest solved neighbour by euclidean distance, deterministic
        // tie-break on the ordered key
        let mut nearest: Option<(f64, ZKey)> = None;
        for (k, e) in map.iter() {
            let guard = e.lock().unwrap();
            if guard.last.is_none() {
                continue;
            }
            let d2: f64 = guard
                .z
                .iter()
                .zip(z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            drop(guard);
            let better = match &nearest {
                None => true,
                Some((best, bk)) => d2 < *best || (d2 == *best && k < bk),
            };
            if better {
                nearest = Some((d2, k.clone()));
            }
        }
        // seed slim: the nearest solved entry's atoms; the full lattice is
        // only pulled in as a feasibility fallback (it floods the master
        // with degenerate columns otherwise)
        let mut points = Vec::new();
        if let Some((_, nk)) = nearest {
            if let Some(e) = map.get(&nk) {
                let guard = e.lock().unwrap();
                if let Some(last) = &guard.last {
                    for (_, p) in &last.measure.atoms {
                        points.push(p.clone());
                    }
                }
            }
        }
        if points.is_empty() {
            points = self.base_lattice();
        }
        // duplicate columns make the master basis singular
        dedup_points_tol(&mut points, 1e-9);
        let entry = Arc::new(Mutex::new(InnerEntry {
            z: z.to_vec(),
            points,
            warm: None,
            last: None,
            last_lambda: 0,
        }));
        map.insert(key, entry.clone());
        entry
    }

    /// Solves the inner problem at `z` under outer duals `lambda`,
    /// warm-starting from the cached columns for this `z`.
    pub fn solve_at(&self, z: &[f64], lambda: &[f64]) -> Result<InnerSolution, AveragedError> {
        crate::stats::bump(&crate::stats::INNER_SOLVES, 1);
        let entry = self.ensure_entry(z);
        let mut guard = entry.lock().unwrap();
        let fp = lambda_fingerprint(lambda);
        if let Some(last) = &guard.last {
            if guard.last_lambda == fp {
                return Ok(last.clone());
            }
        }
        let kappa = self
            .spec
            .slow_basis
            .combination_gradient(lambda, z);
        let functions = InnerFunctions {
            problem: self.spec.problem.clone(),
            fast_basis: self.spec.fast_basis.clone(),
            z: z.to_vec(),
            kappa: kappa.clone(),
        };
        let silp = SemiInfiniteLP::new(self.domain.clone(), Arc::new(functions));
        let seed = self.config.seed ^ lambda_fingerprint(z);
        let cfg = ColGenConfig {
            initial_points: guard.points.clone(),
            initial_per_dim: self.config.inner_initial_per_dim,
            basis_hint: guard.warm.clone(),
            max_iterations: self.config.max_inner_iterations,
            termination_tol: self.config.inner_tol,
            dedup_tol: 1e-9,
            pricing: self.config.inner_pricing.clone(),
            seed,
        };
        let run = |cfg: &ColGenConfig| {
            if self.minimizer.analytic_active() {
                let mut oracle = HamiltonianPricing {
                    minimizer: self.minimizer.clone(),
                    fast_basis: self.spec.fast_basis.clone(),
                    z: z.to_vec(),
                    kappa: kappa.clone(),
                    y_box: self.spec.problem.y_box.clone(),
                    y_grid: self.config.hamiltonian_y_grid,
                    budget: self.config.hamiltonian_budget,
                    scratch: MinimizerScratch::default(),
                    basis_scratch: BasisScratch::default(),
                };
                colgen::solve_with_oracle(&silp, cfg, &mut oracle)
            } else {
                let mut oracle = GridPolish::new(self.config.inner_pricing.clone(), seed);
                colgen::solve_with_oracle(&silp, cfg, &mut oracle)
            }
        };
        let result = match run(&cfg) {
            Ok(r) => r,
            Err(ColGenError::InfeasibleMaster) => {
                // slim warm pool lost feasibility; augment with the lattice
                let mut cfg = cfg.clone();
                cfg.initial_points.extend(self.base_lattice());
                dedup_points_tol(&mut cfg.initial_points, 1e-9);
                cfg.basis_hint = None;
                match run(&cfg) {
                    Ok(r) => r,
                    Err(ColGenError::InfeasibleMaster) => {
                        return Err(AveragedError::InnerInfeasible { z: z.to_vec() })
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Err(e) => return Err(e.into()),
        };
        if result.status == ColGenStatus::IterationLimit {
            log::warn!(
                "inner solve at z = {z:?} hit the iteration limit (certificate gap {:.3e})",
                result.certificate_gap
            );
        }

        let p = &self.spec.problem;
        let mut gtilde = vec![0.0; p.dim_z];
        let mut cost = 0.0;
        let mut g = vec![0.0; p.dim_z];
        for (w, point) in &result.measure.atoms {
            let (u, y) = point.split_at(p.dim_u);
            p.eval_g(u, y, z, &mut g);
            for (acc, gi) in gtilde.iter_mut().zip(&g) {
                *acc += w * gi;
            }
            cost += w * p.eval_cost(u, y, z);
        }
        let solution = InnerSolution {
            z: z.to_vec(),
            measure: result.measure,
            value: result.value,
            omega: result.duals,
            gtilde,
            cost,
        };

        if result.columns.len() > self.config.max_cached_columns {
            let mut points: Vec<Vec<f64>> =
                solution.measure.atoms.iter().map(|(_, p)| p.clone()).collect();
            let tail = result.columns.len().saturating_sub(self.config.max_cached_columns / 2);
            points.extend(result.columns[tail..].iter().cloned());
            dedup_points_tol(&mut points, 1e-8);
            guard.points = points;
            guard.warm = None;
        } else {
            let before = result.columns.len();
            let mut points = result.columns;
            dedup_points_tol(&mut points, 1e-8);
            if points.len() == before {
                guard.warm = Some(result.warm);
            } else {
                guard.warm = None;
            }
            guard.points = points;
        }
        guard.last = Some(solution.clone());
        guard.last_lambda = fp;
        Ok(solution)
    }
}

/// Two-level solver for the averaged problem.
pub struct AveragedSolver {
    inner: Arc<InnerSolver>,
    config: AveragedConfig,
}

struct OuterColumn {
    z: Vec<f64>,
    inner: InnerSolution,
    cost: f64,
    rows: Vec<f64>,
}

impl AveragedSolver {
    pub fn new(spec: AveragedSpec, config: AveragedConfig) -> AveragedSolver {
        AveragedSolver {
            inner: Arc::new(InnerSolver::new(spec, config.clone())),
            config,
        }
    }

    pub fn spec(&self) -> &AveragedSpec {
        self.inner.spec()
    }

    pub fn inner_solver(&self) -> &Arc<InnerSolver> {
        &self.inner
    }

    pub fn solve_inner(&self, z: &[f64], lambda: &[f64]) -> Result<InnerSolution, AveragedError> {
        self.inner.solve_at(z, lambda)
    }

    fn psi_at_z0(&self) -> Vec<f64> {
        let spec = self.spec();
        spec.slow_basis.values(&spec.problem.z0)
    }

    /// Constraint row of a column `(mu, z)`:
    /// `grad(psi_i)(z) . gtilde + C (psi_i(z0) - psi_i(z))`, without the
    /// initial-state term in periodic mode.
    fn column_rows(&self, z: &[f64], gtilde: &[f64], psi0_vals: &[f64]) -> Vec<f64> {
        let spec = self.spec();
        let n = spec.n();
        let dim_z = spec.problem.dim_z;
        let (values, grads) = spec.slow_basis.values_and_gradients(z);
        let c = spec.problem.discount;
        (0..n)
            .map(|i| {
                let mut r = 0.0;
                for d in 0..dim_z {
                    r += grads[i * dim_z + d] * gtilde[d];
                }
                if !spec.periodic {
                    r += c * (psi0_vals[i] - values[i]);
                }
                r
            })
            .collect()
    }

    /// Discount side of the outer pricing objective:
    /// `sum_i lambda_i C (psi_i(z0) - psi_i(z))` (zero in periodic mode).
    fn discount_shift(&self, z: &[f64], lambda: &[f64], psi0_vals: &[f64]) -> f64 {
        let spec = self.spec();
        if spec.periodic {
            return 0.0;
        }
        let values = spec.slow_basis.values(z);
        let c = spec.problem.discount;
        lambda
            .iter()
            .zip(psi0_vals.iter().zip(&values))
            .map(|(l, (p0, pz))| l * c * (p0 - pz))
            .sum()
    }

    /// Outer pricing objective at a slow point: the inner optimum plus the
    /// discount shift. This is the reduced cost of the best column at `z`
    /// plus `lambda0`.
    fn pricing_value(
        &self,
        z: &[f64],
        lambda: &[f64],
        psi0_vals: &[f64],
    ) -> Result<(f64, InnerSolution), AveragedError> {
        let inner = self.inner.solve_at(z, lambda)?;
        let h = inner.value + self.discount_shift(z, lambda, psi0_vals);
        Ok((h, inner))
    }

    fn initial_z_points(&self) -> Vec<Vec<f64>> {
        let spec = self.spec();
        let zb = &spec.problem.z_box;
        let n = spec.n();
        let mut per_dim = 5usize;
        loop {
            let count = per_dim.pow(zb.dim() as u32);
            if count >= n + 2 || per_dim > 65 {
                break;
            }
            per_dim += 2; // keep odd so the box center stays on the grid
        }
        let mut points = vec![spec.problem.z0.clone()];
        points.extend(zb.corners());
        points.extend(zb.lattice(per_dim));
        dedup_points(&mut points);
        points
    }

    /// Solves the averaged problem by outer column generation.
    pub fn solve(&self) -> Result<AveragedSolution, AveragedError> {
        let spec = self.spec().clone();
        let n = spec.n();
        let psi0_vals = self.psi_at_z0();
        let zero_lambda = vec![0.0; n];

        // initial columns: inner solves under lambda = 0
        let init_z = self.initial_z_points();
        let inner_results = self.solve_many(&init_z, &zero_lambda)?;
        let mut columns: Vec<OuterColumn> = Vec::new();
        let mut master = MasterLp::new(n);
        for (z, inner) in init_z.iter().zip(inner_results) {
            let rows = self.column_rows(z, &inner.gtilde, &psi0_vals);
            master.add_column(inner.cost, rows.clone());
            columns.push(OuterColumn {
                z: z.clone(),
                cost: inner.cost,
                rows,
                inner,
            });
        }

        // fixed outer scan grid, reused every iteration (cache-warm)
        let scan_grid = spec.problem.z_box.lattice(self.config.outer_grid_per_dim);

        let simplex_options = SimplexOptions::default();
        let mut warm: Option<WarmBasis> = None;
        let mut history: Vec<IterationRecord> = Vec::new();
        let mut converged = false;
        let mut certificate_gap = f64::INFINITY;
        let mut final_sol = None;

        for iteration in 0..self.config.max_outer_iterations {
            let sol = solve_master_warm(&master, warm.as_ref(), &simplex_options);
            match sol.status {
                LpStatus::Optimal => {}
                LpStatus::Infeasible => return Err(AveragedError::OuterInfeasible),
                other => return Err(AveragedError::MasterFailed(other)),
            }
            warm = Some(sol.warm.clone());
            let lambda = sol.lambda.clone();

            // pricing: scan the fixed grid plus the current atoms, then
            // refine the argmin by compass search over Z
            let mut candidates: Vec<Vec<f64>> = scan_grid.clone();
            for &j in &sol.basis_index_set {
                candidates.push(columns[j].z.clone());
            }
            dedup_points(&mut candidates);
            let scanned = self.solve_many(&candidates, &lambda)?;
            let mut best_idx = 0;
            let mut best_h = f64::INFINITY;
            for (i, inner) in scanned.iter().enumerate() {
                let h = inner.value + self.discount_shift(&candidates[i], &lambda, &psi0_vals);
                if h < best_h || (h == best_h && z_key(&candidates[i]) < z_key(&candidates[best_idx]))
                {
                    best_h = h;
                    best_idx = i;
                }
            }
            let (refined_h, refined_z, refined_inner) = self.refine_pricing(
                &candidates[best_idx],
                best_h,
                scanned[best_idx].clone(),
                &lambda,
                &psi0_vals,
            )?;

            let a_value = refined_h;
            history.push(IterationRecord {
                iteration,
                sigma: sol.value,
                lambda0: sol.lambda0,
                pricing_value: a_value,
                new_point: Some(refined_z.clone()),
            });
            certificate_gap = sol.lambda0 - a_value;

            if a_value >= sol.lambda0 - self.config.outer_tol {
                converged = true;
                final_sol = Some(sol);
                break;
            }

            let rows = self.column_rows(&refined_z, &refined_inner.gtilde, &psi0_vals);
            let cost = refined_inner.cost;
            let duplicate = columns.iter().any(|c| {
                sup_dist(&c.z, &refined_z) <= 1e-9
                    && (c.cost - cost).abs() <= 1e-7
                    && sup_dist(&c.rows, &rows) <= 1e-7
            });
            if duplicate {
                return Err(AveragedError::OuterStall {
                    residual: certificate_gap,
                });
            }
            master.add_column(cost, rows.clone());
            columns.push(OuterColumn {
                z: refined_z,
                cost,
                rows,
                inner: refined_inner,
            });
            final_sol = Some(sol);
        }

        let sol = match final_sol {
            Some(s) if converged => s,
            _ => {
                let s = solve_master_warm(&master, warm.as_ref(), &simplex_options);
                if s.status != LpStatus::Optimal {
                    return Err(AveragedError::MasterFailed(s.status));
                }
                s
            }
        };

        let mut outer_atoms: Vec<OuterAtom> = sol
            .weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(j, w)| OuterAtom {
                weight: *w,
                z: columns[j].z.clone(),
                inner: columns[j].inner.clone(),
            })
            .collect();
        let total: f64 = outer_atoms.iter().map(|a| a.weight).sum();
        for a in &mut outer_atoms {
            a.weight /= total;
        }

        Ok(AveragedSolution {
            value: sol.value,
            lambda0: sol.lambda0,
            lambda: sol.lambda,
            outer_atoms,
            periodic: spec.periodic,
            converged,
            certificate_gap,
            iterations: history.len(),
            history,
        })
    }

    /// Solves the inner problem at many slow points, in parallel when
    /// enabled. Entries are pre-created serially so warm-start seeding stays
    /// deterministic regardless of thread timing.
    fn solve_many(
        &self,
        zs: &[Vec<f64>],
        lambda: &[f64],
    ) -> Result<Vec<InnerSolution>, AveragedError> {
        for z in zs {
            self.inner.ensure_entry(z);
        }
        if self.config.parallel {
            zs.par_iter()
                .map(|z| self.inner.solve_at(z, lambda))
                .collect()
        } else {
            zs.iter().map(|z| self.inner.solve_at(z, lambda)).collect()
        }
    }

    fn refine_pricing(
        &self,
        z0: &[f64],
        h0: f64,
        inner0: InnerSolution,
        lambda: &[f64],
        psi0_vals: &[f64],
    ) -> Result<(f64, Vec<f64>, InnerSolution), AveragedError> {
        let spec = self.spec();
        let zb = &spec.problem.z_box;
        let dim = zb.dim();
        let mut best = (h0, z0.to_vec(), inner0);
        let mut steps: Vec<f64> = (0..dim)
            .map(|j| (zb.upper[j] - zb.lower[j]) / ((self.config.outer_grid_per_dim - 1).max(1) as f64))
            .collect();
        let mut used = 0;
        let mut probe = best.1.clone();
        while used < self.config.outer_refine_budget {
            let mut improved = false;
            for j in 0..dim {
                for dir in [-1.0, 1.0] {
                    let cand = (best.1[j] + dir * steps[j]).clamp(zb.lower[j], zb.upper[j]);
                    if cand == best.1[j] {
                        continue;
                    }
                    probe.copy_from_slice(&best.1);
                    probe[j] = cand;
                    let (h, inner) = self.pricing_value(&probe, lambda, psi0_vals)?;
                    used += 1;
                    if h < best.0 {
                        best = (h, probe.clone(), inner);
                        improved = true;
                    }
                    if used >= self.config.outer_refine_budget {
                        break;
                    }
                }
                if used >= self.config.outer_refine_budget {
                    break;
                }
            }
            if !improved {
                if steps.iter().all(|s| *s < 1e-10) {
                    break;
                }
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        Ok(best)
    }

    /// Maximum over the audit points of
    /// `value - [inner value + discount shift]` under the solution's duals;
    /// at most ~0 when the dual certificate holds on the audit set.
    pub fn certificate_residual(
        &self,
        solution: &AveragedSolution,
        audit_points: &[Vec<f64>],
    ) -> Result<f64, AveragedError> {
        let psi0_vals = self.psi_at_z0();
        let inners = self.solve_many(audit_points, &solution.lambda)?;
        let mut worst = f64::NEG_INFINITY;
        for (z, inner) in audit_points.iter().zip(inners) {
            let h = inner.value + self.discount_shift(z, &solution.lambda, &psi0_vals);
            worst = worst.max(solution.value - h);
        }
        Ok(worst)
    }

    /// Associated-certificate provider for control synthesis: inner solves
    /// under the solution's duals, cached on a spatial hash with resolution
    /// 1e-3 of the Z-box diagonal.
    pub fn eta_provider(&self, solution: &AveragedSolution) -> Arc<SynthesisOracle> {
        Arc::new(SynthesisOracle {
            inner: self.inner.clone(),
            lambda: solution.lambda.clone(),
            resolution: 1e-3 * self.spec().problem.z_box.diagonal(),
            cells: Mutex::new(HashMap::new()),
        })
    }
}

/// Quantized eta cache used by the synthesized controller.
pub struct SynthesisOracle {
    inner: Arc<InnerSolver>,
    lambda: Vec<f64>,
    resolution: f64,
    cells: Mutex<HashMap<Vec<i64>, Vec<f64>>>,
}

impl SynthesisOracle {
    fn cell(&self, z: &[f64]) -> Vec<i64> {
        z.iter()
            .map(|v| (v / self.resolution).round() as i64)
            .collect()
    }
}

impl EtaProvider for SynthesisOracle {
    fn omega(&self, z: &[f64]) -> Result<Vec<f64>, ControlError> {
        let cell = self.cell(z);
        if let Some(cached) = self.cells.lock().unwrap().get(&cell) {
            return Ok(cached.clone());
        }
        let solution = self
            .inner
            .solve_at(z, &self.lambda)
            .map_err(|e| ControlError::EtaUnavailable {
                z: z.to_vec(),
                reason: e.to_string(),
            })?;
        let mut cells = self.cells.lock().unwrap();
        cells.insert(cell, solution.omega.clone());
        Ok(solution.omega)
    }
}

fn dedup_points(points: &mut Vec<Vec<f64>>) {
    let mut seen = std::collections::BTreeSet::new();
    points.retain(|p| seen.insert(z_key(p)));
}

fn dedup_points_tol(points: &mut Vec<Vec<f64>>, tol: f64) {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points.drain(..) {
        if kept.iter().all(|q| sup_dist(q, &p) > tol) {
            kept.push(p);
        }
    }
    *points = kept;
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Convenience wrappers mirroring the operation names.
pub fn solve_inner(
    spec: &AveragedSpec,
    z: &[f64],
    lambda: &[f64],
    config: &AveragedConfig,
) -> Result<InnerSolution, AveragedError> {
    InnerSolver::new(spec.clone(), config.clone()).solve_at(z, lambda)
}

pub fn solve_averaged(
    spec: &AveragedSpec,
    config: &AveragedConfig,
) -> Result<AveragedSolution, AveragedError> {
    AveragedSolver::new(spec.clone(), config.clone()).solve()
}

pub fn certificate_residual(
    spec: &AveragedSpec,
    solution: &AveragedSolution,
    audit_points: &[Vec<f64>],
    config: &AveragedConfig,
) -> Result<f64, AveragedError> {
    AveragedSolver::new(spec.clone(), config.clone()).certificate_residual(solution, audit_points)
}
