//! Generic column generation for semi-infinite LPs over probability measures
//! on a compact box: restricted masters alternate with a pricing search for
//! the point of most negative reduced cost; termination when the pricing
//! value certifies dual feasibility.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::measures::AtomicMeasure;
use crate::model::Box;
use crate::simplex::{solve_master_warm, LpStatus, MasterLp, SimplexOptions, WarmBasis};

/// Reusable buffers threaded through functional evaluations so hot pricing
/// loops stay allocation-free.
#[derive(Debug, Clone, Default)]
pub struct EvalScratch {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Cost functional and constraint functionals of a semi-infinite LP
/// `min int Psi0 dp` over `p in P(X)` with `int Psi_i dp = 0`.
pub trait SilpFunctions: Send + Sync {
    fn constraint_count(&self) -> usize;
    /// Returns `Psi0(x)` and fills `psi` with `Psi_1..K (x)`.
    fn eval(&self, x: &[f64], psi: &mut [f64], scratch: &mut EvalScratch) -> f64;
}

struct ClosureFunctions {
    psi0: std::boxed::Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    psi: Vec<std::boxed::Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
}

impl SilpFunctions for ClosureFunctions {
    fn constraint_count(&self) -> usize {
        self.psi.len()
    }

    fn eval(&self, x: &[f64], psi: &mut [f64], _scratch: &mut EvalScratch) -> f64 {
        for (o, f) in psi.iter_mut().zip(&self.psi) {
            *o = f(x);
        }
        (self.psi0)(x)
    }
}

#[derive(Clone)]
pub struct SemiInfiniteLP {
    pub domain: Box,
    pub functions: Arc<dyn SilpFunctions>,
}

impl SemiInfiniteLP {
    pub fn new(domain: Box, functions: Arc<dyn SilpFunctions>) -> SemiInfiniteLP {
        SemiInfiniteLP { domain, functions }
    }

    pub fn from_closures(
        domain: Box,
        psi0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        psi: Vec<std::boxed::Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    ) -> SemiInfiniteLP {
        SemiInfiniteLP {
            domain,
            functions: Arc::new(ClosureFunctions {
                psi0: std::boxed::Box::new(psi0),
                psi,
            }),
        }
    }

    pub fn k(&self) -> usize {
        self.functions.constraint_count()
    }

    /// Objective of the pricing problem under dual multipliers.
    pub fn priced_value(
        &self,
        x: &[f64],
        duals: &[f64],
        psi: &mut Vec<f64>,
        scratch: &mut EvalScratch,
    ) -> f64 {
        psi.resize(self.k(), 0.0);
        let v0 = self.functions.eval(x, psi, scratch);
        v0 + duals
            .iter()
            .zip(psi.iter())
            .map(|(l, p)| l * p)
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PricedPoint {
    pub point: Vec<f64>,
    pub value: f64,
}

/// Pricing contract: an approximate global minimizer of
/// `Psi0(x) + sum duals_i Psi_i(x)` over the domain. `seeds` are the current
/// basic atoms; including them keeps the returned value at or below the
/// master's dual bound.
pub trait PricingOracle {
    fn price(&mut self, silp: &SemiInfiniteLP, duals: &[f64], seeds: &[Vec<f64>]) -> PricedPoint;
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridPolishConfig {
    pub grid_per_dim: usize,
    pub polish_starts: usize,
    pub polish_budget: usize,
    pub random_probes: usize,
}

impl Default for GridPolishConfig {
    fn default() -> Self {
        GridPolishConfig {
            grid_per_dim: 9,
            polish_starts: 5,
            polish_budget: 200,
            random_probes: 8,
        }
    }
}

/// Default pricing oracle: coarse uniform grid scan followed by compass
/// (pattern) refinement from the best grid points, the supplied seeds, and a
/// few seeded random probes.
pub struct GridPolish {
    pub config: GridPolishConfig,
    rng: ChaCha8Rng,
}

impl GridPolish {
    pub fn new(config: GridPolishConfig, seed: u64) -> GridPolish {
        GridPolish {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PricingOracle for GridPolish {
    fn price(&mut self, silp: &SemiInfiniteLP, duals: &[f64], seeds: &[Vec<f64>]) -> PricedPoint {
        let mut psi = Vec::new();
        let mut scratch = EvalScratch::default();
        let mut eval = |x: &[f64]| silp.priced_value(x, duals, &mut psi, &mut scratch);
        let dim = silp.domain.dim();

        let mut best: Option<PricedPoint> = None;
        let mut starts: Vec<(f64, Vec<f64>)> = Vec::new();
        let consider = |value: f64, point: &[f64], starts: &mut Vec<(f64, Vec<f64>)>| {
            if value.is_finite() {
                starts.push((value, point.to_vec()));
            }
        };

        for p in silp.domain.lattice(self.config.grid_per_dim.max(1)) {
            let v = eval(&p);
            consider(v, &p, &mut starts);
        }
        for _ in 0..self.config.random_probes {
            let p: Vec<f64> = (0..dim)
                .map(|j| {
                    self.rng
                        .gen_range(silp.domain.lower[j]..=silp.domain.upper[j])
                })
                .collect();
            let v = eval(&p);
            consider(v, &p, &mut starts);
        }
        starts.sort_by(|a, b| a.0.total_cmp(&b.0));
        starts.truncate(self.config.polish_starts.max(1));
        for s in seeds {
            if s.len() == dim {
                let v = eval(s);
                consider(v, s, &mut starts);
            }
        }

        let n_candidates = starts.len().max(1);
        let budget_each = (self.config.polish_budget / n_candidates).max(8);
        for (v0, p0) in &starts {
            let refined = compass_search(&silp.domain, &mut eval, p0, *v0, budget_each);
            match &best {
                Some(b) if b.value <= refined.value => {}
                _ => best = Some(refined),
            }
        }
        best.unwrap_or(PricedPoint {
            point: silp.domain.lattice(1).pop().unwrap(),
            value: f64::INFINITY,
        })
    }
}

/// Deterministic compass search: probe +/- step along each coordinate, move
/// to the best improvement, halve the step otherwise.
pub(crate) fn compass_search(
    domain: &Box,
    eval: &mut impl FnMut(&[f64]) -> f64,
    start: &[f64],
    start_value: f64,
    budget: usize,
) -> PricedPoint {
    let dim = domain.dim();
    let mut x = start.to_vec();
    let mut fx = start_value;
    let mut steps: Vec<f64> = (0..dim)
        .map(|j| (domain.upper[j] - domain.lower[j]) * 0.125)
        .collect();
    let mut used = 0;
    while used < budget {
        let mut best_move: Option<(f64, usize, f64)> = None; // (value, coord, new coord value)
        for j in 0..dim {
            for dir in [-1.0, 1.0] {
                let cand = (x[j] + dir * steps[j]).clamp(domain.lower[j], domain.upper[j]);
                if cand == x[j] {
                    continue;
                }
                let old = x[j];
                x[j] = cand;
                let v = eval(&x);
                x[j] = old;
                used += 1;
                if v < fx && best_move.as_ref().map_or(true, |(bv, _, _)| v < *bv) {
                    best_move = Some((v, j, cand));
                }
                if used >= budget {
                    break;
                }
            }
            if used >= budget {
                break;
            }
        }
        match best_move {
            Some((v, j, cand)) => {
                x[j] = cand;
                fx = v;
            }
            None => {
                let max_step = steps.iter().cloned().fold(0.0_f64, f64::max);
                let span = domain
                    .upper
                    .iter()
                    .zip(&domain.lower)
                    .map(|(u, l)| u - l)
                    .fold(0.0_f64, f64::max);
                if max_step < 1e-9 * span.max(1.0) {
                    break;
                }
                for s in steps.iter_mut() {
                    *s *= 0.5;
                }
            }
        }
    }
    PricedPoint { point: x, value: fx }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColGenConfig {
    /// Explicit initial columns; when empty a uniform lattice with
    /// `initial_per_dim` points per coordinate is used.
    pub initial_points: Vec<Vec<f64>>,
    pub initial_per_dim: usize,
    /// Restart basis over the initial points (from a previous run whose
    /// column list is a prefix of `initial_points`).
    pub basis_hint: Option<WarmBasis>,
    pub max_iterations: usize,
    pub termination_tol: f64,
    pub dedup_tol: f64,
    pub pricing: GridPolishConfig,
    pub seed: u64,
}

impl Default for ColGenConfig {
    fn default() -> Self {
        ColGenConfig {
            initial_points: Vec::new(),
            initial_per_dim: 5,
            basis_hint: None,
            max_iterations: 500,
            termination_tol: 1e-6,
            dedup_tol: 1e-9,
            pricing: GridPolishConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColGenStatus {
    Converged,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Master optimum sigma^J.
    pub sigma: f64,
    pub lambda0: f64,
    /// Pricing minimum a^J.
    pub pricing_value: f64,
    pub new_point: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ColGenResult {
    pub value: f64,
    pub measure: AtomicMeasure,
    pub lambda0: f64,
    pub duals: Vec<f64>,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub status: ColGenStatus,
    /// All generated column points (initial grid plus priced points).
    pub columns: Vec<Vec<f64>>,
    pub warm: WarmBasis,
    /// `lambda0 - a` at termination; at most `termination_tol` when the
    /// run converged through the certificate test.
    pub certificate_gap: f64,
    /// Weights aligned with `columns`.
    pub weights: Vec<f64>,
}

impl ColGenResult {
    /// Iteration log in CSV form: iteration, sigma, lambda0, pricing_value,
    /// new point coordinates.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,sigma,lambda0,pricing_value,new_point\n");
        for rec in &self.history {
            let point = rec
                .new_point
                .as_ref()
                .map(|p| {
                    p.iter()
                        .map(|v| format!("{v:.9e}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{}\n",
                rec.iteration, rec.sigma, rec.lambda0, rec.pricing_value, point
            ));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ColGenError {
    #[error("initial master is infeasible; enlarge the initial grid")]
    InfeasibleMaster,
    #[error("pricing failure: {0}")]
    PricingFailure(String),
    #[error("master solve failed with status {0:?}")]
    MasterFailed(LpStatus),
}

/// Runs column generation with the default grid+polish pricing oracle.
pub fn solve(silp: &SemiInfiniteLP, cfg: &ColGenConfig) -> Result<ColGenResult, ColGenError> {
    let mut oracle = GridPolish::new(cfg.pricing.clone(), cfg.seed);
    solve_with_oracle(silp, cfg, &mut oracle)
}

/// Runs column generation with a caller-supplied pricing oracle.
pub fn solve_with_oracle(
    silp: &SemiInfiniteLP,
    cfg: &ColGenConfig,
    oracle: &mut dyn PricingOracle,
) -> Result<ColGenResult, ColGenError> {
    let k = silp.k();
    let mut points: Vec<Vec<f64>> = if cfg.initial_points.is_empty() {
        silp.domain.lattice(cfg.initial_per_dim)
    } else {
        cfg.initial_points.clone()
    };
    let n_initial = points.len();
    let mut master = MasterLp::new(k);
    let mut psi = vec![0.0; k];
    let mut scratch = EvalScratch::default();
    for p in &points {
        let cost = silp.functions.eval(p, &mut psi, &mut scratch);
        if !cost.is_finite() || psi.iter().any(|v| !v.is_finite()) {
            return Err(ColGenError::PricingFailure(format!(
                "non-finite functional at initial point {p:?}"
            )));
        }
        master.add_column(cost, psi.clone());
    }

    let simplex_options = SimplexOptions::default();
    let mut warm: Option<WarmBasis> = cfg.basis_hint.clone();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut status = ColGenStatus::IterationLimit;
    let mut certificate_gap = f64::INFINITY;
    let mut last_sol = None;

    for iteration in 0..cfg.max_iterations {
        let mut sol = solve_master_warm(&master, warm.as_ref(), &simplex_options);
        if sol.status == LpStatus::IterationLimit {
            // self-heal a stalled master: retry cold, then prune the column
            // pool to the basics plus the initial grid
            log::warn!("master stalled at iteration {iteration}; retrying cold");
            sol = solve_master_warm(&master, None, &simplex_options);
            if sol.status == LpStatus::IterationLimit {
                let keep: Vec<usize> = (0..points.len())
                    .filter(|&j| j < n_initial || sol.weights.get(j).is_some_and(|w| *w > 0.0))
                    .collect();
                log::warn!(
                    "pruning stalled master from {} to {} columns",
                    points.len(),
                    keep.len()
                );
                let mut pruned = MasterLp::new(k);
                let mut new_points = Vec::with_capacity(keep.len());
                for &j in &keep {
                    pruned.add_column(master.costs[j], master.columns[j].clone());
                    new_points.push(points[j].clone());
                }
                master = pruned;
                points = new_points;
                sol = solve_master_warm(&master, None, &simplex_options);
            }
        }
        match sol.status {
            LpStatus::Optimal => {}
            LpStatus::Infeasible => return Err(ColGenError::InfeasibleMaster),
            other => return Err(ColGenError::MasterFailed(other)),
        }
        if let Some(prev) = history.last() {
            debug_assert!(
                sol.value <= prev.sigma + 1e-9 * (1.0 + prev.sigma.abs()),
                "master value increased: {} -> {}",
                prev.sigma,
                sol.value
            );
        }
        warm = Some(sol.warm.clone());

        let seeds: Vec<Vec<f64>> = sol
            .basis_index_set
            .iter()
            .map(|&j| points[j].clone())
            .collect();
        crate::stats::bump(&crate::stats::PRICING_CALLS, 1);
        let priced = oracle.price(silp, &sol.lambda, &seeds);
        if !priced.value.is_finite() {
            return Err(ColGenError::PricingFailure("non-finite pricing value".into()));
        }
        if !domain_contains(&silp.domain, &priced.point) {
            return Err(ColGenError::PricingFailure(format!(
                "priced point {:?} lies outside the domain",
                priced.point
            )));
        }

        let converged = priced.value >= sol.lambda0 - cfg.termination_tol;
        // reject points that duplicate an existing column either in point
        // space (spec rule) or in column space (identical rows and cost up
        // to rounding add nothing and make the basis singular)
        let point_dup = points
            .iter()
            .any(|p| sup_dist(p, &priced.point) <= cfg.dedup_tol);
        let column_dup = if point_dup || converged {
            false
        } else {
            let cost = silp.functions.eval(&priced.point, &mut psi, &mut scratch);
            let scale = 1.0 + cost.abs();
            (0..master.n_cols()).any(|j| {
                (master.costs[j] - cost).abs() <= 1e-9 * scale
                    && master.columns[j]
                        .iter()
                        .zip(psi.iter())
                        .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs()))
            })
        };
        let duplicate = point_dup || column_dup;
        history.push(IterationRecord {
            iteration,
            sigma: sol.value,
            lambda0: sol.lambda0,
            pricing_value: priced.value,
            new_point: (!converged && !duplicate).then(|| priced.point.clone()),
        });
        certificate_gap = sol.lambda0 - priced.value;

        if converged || duplicate {
            if duplicate && !converged {
                log::warn!(
                    "column generation stalled on duplicate column (certificate gap {certificate_gap:.3e})"
                );
            }
            status = ColGenStatus::Converged;
            last_sol = Some(sol);
            break;
        }

        let cost = silp.functions.eval(&priced.point, &mut psi, &mut scratch);
        master.add_column(cost, psi.clone());
        points.push(priced.point);
        last_sol = Some(sol);
    }

    // resolve once more if the loop ended on the iteration limit
    let sol = match (status, last_sol) {
        (ColGenStatus::Converged, Some(sol)) => sol,
        _ => {
            let sol = solve_master_warm(&master, warm.as_ref(), &simplex_options);
            if sol.status != LpStatus::Optimal {
                return Err(ColGenError::MasterFailed(sol.status));
            }
            sol
        }
    };

    let mut atoms: Vec<(f64, Vec<f64>)> = sol
        .weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(j, w)| (*w, points[j].clone()))
        .collect();
    let total: f64 = atoms.iter().map(|(w, _)| *w).sum();
    for (w, _) in &mut atoms {
        *w /= total;
    }
    let space_dim = silp.domain.dim();
    Ok(ColGenResult {
        value: sol.value,
        measure: AtomicMeasure::new(atoms, space_dim),
        lambda0: sol.lambda0,
        duals: sol.lambda.clone(),
        iterations: history.len(),
        history,
        status,
        columns: points,
        weights: sol.weights.clone(),
        warm: sol.warm,
        certificate_gap,
    })
}

fn domain_contains(domain: &Box, x: &[f64]) -> bool {
    x.len() == domain.dim()
        && x.iter()
            .zip(domain.lower.iter().zip(&domain.upper))
            .all(|(v, (l, u))| *v >= l - 1e-12 && *v <= u + 1e-12)
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dim_silp(
        psi0: impl Fn(f64) -> f64 + Send + Sync + 'static,
        psi: Vec<std::boxed::Box<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
    ) -> SemiInfiniteLP {
        SemiInfiniteLP::from_closures(
            Box::new(vec![0.0], vec![1.0]),
            move |x: &[f64]| psi0(x[0]),
            psi,
        )
    }

    #[test]
    fn unconstrained_minimum_at_left_endpoint() {
        let silp = one_dim_silp(|x| x, vec![]);
        let res = solve(&silp, &ColGenConfig::default()).unwrap();
        assert_eq!(res.status, ColGenStatus::Converged);
        assert!(res.value.abs() <= 1e-9, "value {}", res.value);
        assert_eq!(res.measure.atoms.len(), 1);
        assert!(res.measure.atoms[0].1[0].abs() <= 1e-9);
    }

    #[test]
    fn mean_constrained_quadratic_reaches_dirac_value() {
        // among measures on [0,1] with mean 1/2, the dirac at 1/2 minimizes
        // int x^2 (convexity); optimal value 1/4
        let silp = one_dim_silp(
            |x| x * x,
            vec![std::boxed::Box::new(|x: &[f64]| x[0] - 0.5)],
        );
        let res = solve(&silp, &ColGenConfig::default()).unwrap();
        assert_eq!(res.status, ColGenStatus::Converged);
        assert!((res.value - 0.25).abs() <= 1e-6, "value {}", res.value);
    }

    #[test]
    fn history_is_monotone_with_duality_sandwich() {
        let silp = one_dim_silp(
            |x| (x - 0.3) * (x - 0.9) * x,
            vec![std::boxed::Box::new(|x: &[f64]| x[0] - 0.4)],
        );
        let res = solve(&silp, &ColGenConfig::default()).unwrap();
        for pair in res.history.windows(2) {
            assert!(pair[1].sigma <= pair[0].sigma + 1e-9);
        }
        for rec in &res.history {
            assert!(rec.pricing_value <= rec.lambda0 + 1e-7);
            assert!((rec.sigma - rec.lambda0).abs() <= 1e-7 * (1.0 + rec.sigma.abs()));
        }
        assert!(res.certificate_gap <= 1e-6);
    }

    #[test]
    fn bit_reproducible_under_fixed_seed() {
        let make = || {
            one_dim_silp(
                |x| (6.0 * x).sin() + x * x,
                vec![std::boxed::Box::new(|x: &[f64]| x[0] - 0.6)],
            )
        };
        let a = solve(&make(), &ColGenConfig::default()).unwrap();
        let b = solve(&make(), &ColGenConfig::default()).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.history, b.history);
        assert_eq!(a.measure.atoms, b.measure.atoms);
    }

    #[test]
    fn infeasible_master_is_reported() {
        let silp = one_dim_silp(|x| x, vec![std::boxed::Box::new(|_: &[f64]| 1.0)]);
        match solve(&silp, &ColGenConfig::default()) {
            Err(ColGenError::InfeasibleMaster) => {}
            other => panic!("expected InfeasibleMaster, got {other:?}"),
        }
    }

    struct RogueOracle;
    impl PricingOracle for RogueOracle {
        fn price(&mut self, _: &SemiInfiniteLP, _: &[f64], _: &[Vec<f64>]) -> PricedPoint {
            PricedPoint {
                point: vec![5.0],
                value: -1.0,
            }
        }
    }

    #[test]
    fn pricing_outside_domain_is_an_error() {
        let silp = one_dim_silp(|x| x, vec![]);
        let res = solve_with_oracle(&silp, &ColGenConfig::default(), &mut RogueOracle);
        assert!(matches!(res, Err(ColGenError::PricingFailure(_))));
    }

    #[test]
    fn iteration_limit_still_returns_result() {
        let silp = one_dim_silp(
            |x| (25.0 * x).cos() + 2.0 * x,
            vec![std::boxed::Box::new(|x: &[f64]| x[0] - 0.37)],
        );
        let cfg = ColGenConfig {
            max_iterations: 1,
            ..ColGenConfig::default()
        };
        let res = solve(&silp, &cfg).unwrap();
        assert_eq!(res.status, ColGenStatus::IterationLimit);
        assert!(res.value.is_finite());
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let silp = one_dim_silp(|x| x * x, vec![]);
        let res = solve(&silp, &ColGenConfig::default()).unwrap();
        let csv = res.history_csv();
        assert!(csv.starts_with("iteration,sigma,lambda0,pricing_value,new_point"));
        assert_eq!(csv.lines().count(), res.history.len() + 1);
    }
}
