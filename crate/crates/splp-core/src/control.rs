//! Feedback synthesis from the dual certificates: the pointwise Hamiltonian
//! minimizer `u(y, z)`, the anchor schedule, and the piecewise controller
//! that latches the slow state at anchor times.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::basis::{BasisScratch, MonomialBasis};
use crate::model::{Box, ControlProblem};

#[derive(Debug, Error, Clone)]
pub enum ControlError {
    #[error("associated dual certificate unavailable at z = {z:?}: {reason}")]
    EtaUnavailable { z: Vec<f64>, reason: String },
}

/// Supplies the associated-dual coefficients `omega` for an anchor `z`
/// (backed by the averaged solver's inner-solution cache in production).
pub trait EtaProvider: Send + Sync {
    fn omega(&self, z: &[f64]) -> Result<Vec<f64>, ControlError>;
}

/// Constant-coefficient provider, mainly for tests and baselines.
pub struct ConstEta(pub Vec<f64>);

impl EtaProvider for ConstEta {
    fn omega(&self, _z: &[f64]) -> Result<Vec<f64>, ControlError> {
        Ok(self.0.clone())
    }
}

/// Reusable buffers for Hamiltonian evaluations.
#[derive(Debug, Clone, Default)]
pub struct MinimizerScratch {
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    /// Minimizing control left by the last [`PointwiseMinimizer::minimize`].
    pub best_u: Vec<f64>,
    basis: BasisScratch,
    pub eta_grad: Vec<f64>,
}

/// Structural facts about a problem detected numerically at construction:
/// whether the Hamiltonian is separable quadratic in `u` (closed-form
/// clamped minimizer available) and whether the fast dynamics depend on `z`.
#[derive(Debug, Clone)]
pub struct ProblemStructure {
    /// Coefficients of `u_i^2` in `G` when `G` is separable quadratic in `u`
    /// and `f`, `g` are affine in `u`.
    pub quadratic_u: Option<Vec<f64>>,
    pub f_depends_on_z: bool,
}

/// Pointwise minimizer of the bracketed Hamiltonian
/// `H(u) = G(u,y,z) + kappa . g(u,y,z) + eta_grad . f(u,y,z)` over the
/// control box.
#[derive(Debug, Clone)]
pub struct PointwiseMinimizer {
    problem: Arc<ControlProblem>,
    pub structure: ProblemStructure,
    force_numeric: bool,
    numeric_grid: usize,
    numeric_budget: usize,
}

impl PointwiseMinimizer {
    pub fn new(problem: Arc<ControlProblem>) -> PointwiseMinimizer {
        let structure = detect_structure(&problem);
        PointwiseMinimizer {
            problem,
            structure,
            force_numeric: false,
            numeric_grid: 9,
            numeric_budget: 200,
        }
    }

    pub fn numeric_only(mut self) -> PointwiseMinimizer {
        self.force_numeric = true;
        self
    }

    pub fn analytic_active(&self) -> bool {
        self.structure.quadratic_u.is_some() && !self.force_numeric
    }

    pub fn problem(&self) -> &ControlProblem {
        &self.problem
    }

    /// Hamiltonian value at a given control.
    pub fn h_value(
        &self,
        u: &[f64],
        y: &[f64],
        z: &[f64],
        kappa: &[f64],
        eta_grad: &[f64],
        scratch: &mut MinimizerScratch,
    ) -> f64 {
        let p = &self.problem;
        scratch.f.resize(p.dim_y, 0.0);
        scratch.g.resize(p.dim_z, 0.0);
        p.eval_f(u, y, z, &mut scratch.f);
        p.eval_g(u, y, z, &mut scratch.g);
        let mut h = p.eval_cost(u, y, z);
        for (k, gv) in kappa.iter().zip(&scratch.g) {
            h += k * gv;
        }
        for (e, fv) in eta_grad.iter().zip(&scratch.f) {
            h += e * fv;
        }
        h
    }

    /// Minimizes the Hamiltonian over the control box; returns the minimum
    /// value with the minimizer left in `scratch.best_u`.
    pub fn minimize(
        &self,
        y: &[f64],
        z: &[f64],
        kappa: &[f64],
        eta_grad: &[f64],
        scratch: &mut MinimizerScratch,
    ) -> f64 {
        if self.analytic_active() {
            self.minimize_analytic(y, z, kappa, eta_grad, scratch)
        } else {
            self.minimize_numeric(y, z, kappa, eta_grad, scratch)
        }
    }

    fn minimize_analytic(
        &self,
        y: &[f64],
        z: &[f64],
        kappa: &[f64],
        eta_grad: &[f64],
        scratch: &mut MinimizerScratch,
    ) -> f64 {
        let p = &self.problem;
        let dim_u = p.dim_u;
        let quad = self.structure.quadratic_u.as_ref().unwrap();
        let mut probe = std::mem::take(&mut scratch.u);
        let mut best = std::mem::take(&mut scratch.best_u);
        probe.clear();
        probe.resize(dim_u, 0.0);
        best.clear();
        best.resize(dim_u, 0.0);
        // H is separable quadratic in u, so the linear coefficient in u_i is
        // an exact central difference with any step; use the half width.
        for i in 0..dim_u {
            let h = 0.5 * (p.u_box.upper[i] - p.u_box.lower[i]).max(1e-6);
            probe[i] = h;
            let plus = self.h_value(&probe, y, z, kappa, eta_grad, scratch);
            probe[i] = -h;
            let minus = self.h_value(&probe, y, z, kappa, eta_grad, scratch);
            probe[i] = 0.0;
            let linear = (plus - minus) / (2.0 * h);
            best[i] = (-linear / (2.0 * quad[i])).clamp(p.u_box.lower[i], p.u_box.upper[i]);
        }
        let value = self.h_value(&best, y, z, kappa, eta_grad, scratch);
        scratch.u = probe;
        scratch.best_u = best;
        value
    }

    fn minimize_numeric(
        &self,
        y: &[f64],
        z: &[f64],
        kappa: &[f64],
        eta_grad: &[f64],
        scratch: &mut MinimizerScratch,
    ) -> f64 {
        let p = self.problem.clone();
        let dim_u = p.dim_u;
        let mut best_v = f64::INFINITY;
        let mut best_u = vec![0.0; dim_u];
        let consider = |u: &[f64], v: f64, best_v: &mut f64, best_u: &mut Vec<f64>| {
            if v < *best_v || (v == *best_v && lex_less(u, best_u)) {
                *best_v = v;
                best_u.copy_from_slice(u);
            }
        };
        for u in p.u_box.lattice(self.numeric_grid) {
            let v = self.h_value(&u, y, z, kappa, eta_grad, scratch);
            consider(&u, v, &mut best_v, &mut best_u);
        }
        // compass refinement
        let mut steps: Vec<f64> = (0..dim_u)
            .map(|i| (p.u_box.upper[i] - p.u_box.lower[i]) / (self.numeric_grid.max(2) as f64))
            .collect();
        let mut used = 0;
        let mut probe = best_u.clone();
        while used < self.numeric_budget {
            let mut improved = false;
            for i in 0..dim_u {
                for dir in [-1.0, 1.0] {
                    let cand = (best_u[i] + dir * steps[i]).clamp(p.u_box.lower[i], p.u_box.upper[i]);
                    if cand == best_u[i] {
                        continue;
                    }
                    probe.copy_from_slice(&best_u);
                    probe[i] = cand;
                    let v = self.h_value(&probe, y, z, kappa, eta_grad, scratch);
                    used += 1;
                    if v < best_v {
                        best_v = v;
                        best_u[i] = cand;
                        improved = true;
                    }
                    if used >= self.numeric_budget {
                        break;
                    }
                }
                if used >= self.numeric_budget {
                    break;
                }
            }
            if !improved {
                if steps.iter().all(|s| *s < 1e-9) {
                    break;
                }
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        scratch.best_u.clear();
        scratch.best_u.extend_from_slice(&best_u);
        best_v
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Detects whether `G` is separable quadratic in `u` with `f`, `g` affine in
/// `u`, and whether `f` depends on `z`, by exact second differences at
/// deterministic sample points.
pub fn detect_structure(problem: &ControlProblem) -> ProblemStructure {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let dim_u = problem.dim_u;
    let samples = 12;
    let mut quad: Option<Vec<f64>> = Some(vec![f64::NAN; dim_u]);
    let mut f_depends_on_z = false;

    let sample_box = |b: &Box, rng: &mut ChaCha8Rng| -> Vec<f64> {
        b.lower
            .iter()
            .zip(&b.upper)
            .map(|(l, u)| if l == u { *l } else { rng.gen_range(*l..*u) })
            .collect()
    };

    let mut fa = vec![0.0; problem.dim_y];
    let mut fb = vec![0.0; problem.dim_y];
    let mut fc = vec![0.0; problem.dim_y];
    let mut ga = vec![0.0; problem.dim_z];
    let mut gb = vec![0.0; problem.dim_z];
    let mut gc = vec![0.0; problem.dim_z];

    for sample in 0..samples {
        let u = sample_box(&problem.u_box, &mut rng);
        let y = sample_box(&problem.y_box, &mut rng);
        let z = sample_box(&problem.z_box, &mut rng);

        // z-dependence of f
        let z2 = sample_box(&problem.z_box, &mut rng);
        problem.eval_f(&u, &y, &z, &mut fa);
        problem.eval_f(&u, &y, &z2, &mut fb);
        if fa.iter().zip(&fb).any(|(a, b)| (a - b).abs() > 1e-12) {
            f_depends_on_z = true;
        }

        if quad.is_none() {
            continue;
        }
        let mut ok = true;
        let mut up = u.clone();
        for i in 0..dim_u {
            let hi = 0.25 * (problem.u_box.upper[i] - problem.u_box.lower[i]).max(1e-6);
            // pure second difference of G: constant 2*q_i*h^2 for quadratics
            let mut second = |h: f64| {
                up.copy_from_slice(&u);
                up[i] = u[i] + h;
                let p = problem.eval_cost(&up, &y, &z);
                up[i] = u[i] - h;
                let m = problem.eval_cost(&up, &y, &z);
                let c = problem.eval_cost(&u, &y, &z);
                (p - 2.0 * c + m) / (2.0 * h * h)
            };
            let q_full = second(hi);
            let q_half = second(0.5 * hi);
            let scale = q_full.abs().max(1.0);
            if !(q_full > 1e-10) || (q_full - q_half).abs() > 1e-7 * scale {
                ok = false;
                break;
            }
            if let Some(qs) = quad.as_mut() {
                if sample == 0 {
                    qs[i] = q_full;
                } else if (qs[i] - q_full).abs() > 1e-7 * qs[i].abs().max(1.0) {
                    ok = false;
                    break;
                }
            }
            // cross terms of G must vanish
            for j in 0..i {
                let hj = 0.25 * (problem.u_box.upper[j] - problem.u_box.lower[j]).max(1e-6);
                up.copy_from_slice(&u);
                up[i] += hi;
                up[j] += hj;
                let pp = problem.eval_cost(&up, &y, &z);
                up[j] = u[j];
                let pi = problem.eval_cost(&up, &y, &z);
                up[i] = u[i];
                up[j] = u[j] + hj;
                let pj = problem.eval_cost(&up, &y, &z);
                let c = problem.eval_cost(&u, &y, &z);
                let cross = (pp - pi - pj + c) / (hi * hj);
                if cross.abs() > 1e-8 {
                    ok = false;
                    break;
                }
            }
            if !ok {
                break;
            }
            // f and g must be affine in u: vanishing second differences
            up.copy_from_slice(&u);
            up[i] = u[i] + hi;
            problem.eval_f(&up, &y, &z, &mut fa);
            problem.eval_g(&up, &y, &z, &mut ga);
            up[i] = u[i] - hi;
            problem.eval_f(&up, &y, &z, &mut fb);
            problem.eval_g(&up, &y, &z, &mut gb);
            problem.eval_f(&u, &y, &z, &mut fc);
            problem.eval_g(&u, &y, &z, &mut gc);
            let aff_f = fa
                .iter()
                .zip(&fb)
                .zip(&fc)
                .all(|((p, m), c)| (p - 2.0 * c + m).abs() <= 1e-9);
            let aff_g = ga
                .iter()
                .zip(&gb)
                .zip(&gc)
                .all(|((p, m), c)| (p - 2.0 * c + m).abs() <= 1e-9);
            if !aff_f || !aff_g {
                ok = false;
                break;
            }
            // cross-affinity in u (bilinear u_i u_j terms are still affine
            // per coordinate but break the separable closed form only in G,
            // handled above; f and g may carry them freely)
        }
        if !ok {
            quad = None;
        }
    }
    ProblemStructure {
        quadratic_u: quad,
        f_depends_on_z,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeedbackMode {
    Analytic,
    Numeric,
}

/// Feedback law assembled from the averaged dual `lambda` (slow certificate)
/// and an associated-dual provider `eta`.
#[derive(Clone)]
pub struct FeedbackLaw {
    pub slow_basis: MonomialBasis,
    pub lambda: Vec<f64>,
    pub fast_basis: MonomialBasis,
    pub eta: Arc<dyn EtaProvider>,
    minimizer: PointwiseMinimizer,
}

impl FeedbackLaw {
    pub fn new(
        problem: Arc<ControlProblem>,
        slow_basis: MonomialBasis,
        lambda: Vec<f64>,
        fast_basis: MonomialBasis,
        eta: Arc<dyn EtaProvider>,
    ) -> FeedbackLaw {
        assert_eq!(lambda.len(), slow_basis.len());
        FeedbackLaw {
            slow_basis,
            lambda,
            fast_basis,
            eta,
            minimizer: PointwiseMinimizer::new(problem),
        }
    }

    pub fn mode(&self) -> FeedbackMode {
        if self.minimizer.analytic_active() {
            FeedbackMode::Analytic
        } else {
            FeedbackMode::Numeric
        }
    }

    /// Forces grid+polish minimization even when the closed form exists.
    pub fn numeric_mode(mut self) -> FeedbackLaw {
        self.minimizer = self.minimizer.numeric_only();
        self
    }

    pub fn problem(&self) -> &ControlProblem {
        self.minimizer.problem()
    }

    pub fn minimizer(&self) -> &PointwiseMinimizer {
        &self.minimizer
    }

    /// Gradient of the averaged certificate `zeta` at `z`.
    pub fn kappa(&self, z: &[f64]) -> Vec<f64> {
        self.slow_basis.combination_gradient(&self.lambda, z)
    }

    /// Feedback value at the current fast state and a latched anchor.
    /// Resolves the associated certificate through the provider.
    pub fn feedback(&self, y: &[f64], z_anchor: &[f64]) -> Result<Vec<f64>, ControlError> {
        let omega = self.eta.omega(z_anchor)?;
        let kappa = self.kappa(z_anchor);
        let mut scratch = MinimizerScratch::default();
        Ok(self.feedback_with(y, z_anchor, &kappa, &omega, &mut scratch))
    }

    /// Feedback with certificate data already resolved (hot path).
    pub fn feedback_with(
        &self,
        y: &[f64],
        z_anchor: &[f64],
        kappa: &[f64],
        omega: &[f64],
        scratch: &mut MinimizerScratch,
    ) -> Vec<f64> {
        let problem = self.minimizer.problem();
        let mut yc = y.to_vec();
        problem.y_box.clamp(&mut yc);
        let mut eta_grad = std::mem::take(&mut scratch.eta_grad);
        eta_grad.resize(problem.dim_y, 0.0);
        self.fast_basis
            .combination_gradient_into(omega, &yc, &mut scratch.basis, &mut eta_grad);
        self.minimizer.minimize(&yc, z_anchor, kappa, &eta_grad, scratch);
        scratch.eta_grad = eta_grad;
        scratch.best_u.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ScheduleSource {
    Formula,
    Manual(f64),
}

/// Anchor spacing `Delta(eps)`: the controller re-latches the slow state at
/// `t_l = l * Delta`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorSchedule {
    pub delta: f64,
    pub source: ScheduleSource,
}

/// `Delta(eps) = eps / (2 L_f) * ln(1/eps)` unless overridden.
pub fn anchor_schedule(problem: &ControlProblem, override_delta: Option<f64>) -> AnchorSchedule {
    let schedule = match override_delta {
        Some(d) => {
            assert!(d > 0.0, "anchor spacing must be positive");
            AnchorSchedule {
                delta: d,
                source: ScheduleSource::Manual(d),
            }
        }
        None => {
            let eps = problem.epsilon;
            AnchorSchedule {
                delta: eps / (2.0 * problem.lipschitz_f) * (1.0 / eps).ln(),
                source: ScheduleSource::Formula,
            }
        }
    };
    if schedule.delta / problem.epsilon < 5.0 {
        log::warn!(
            "anchor window Delta/eps = {:.2} < 5: stretched-time window may be too short \
             for the fast occupational measure to settle",
            schedule.delta / problem.epsilon
        );
    }
    schedule
}

/// Controller contract used by the integrator. Called at every integration
/// stage with the current state.
pub trait Controller {
    fn control(&mut self, t: f64, y: &[f64], z: &[f64]) -> Result<Vec<f64>, ControlError>;

    /// Reports (and clears) whether an anchor was latched since last polled.
    fn poll_anchor(&mut self) -> bool {
        false
    }
}

/// Identically zero control.
pub struct ZeroControl(pub usize);

impl Controller for ZeroControl {
    fn control(&mut self, _t: f64, _y: &[f64], _z: &[f64]) -> Result<Vec<f64>, ControlError> {
        Ok(vec![0.0; self.0])
    }
}

/// Open-loop control from a time function.
pub struct OpenLoop<F: FnMut(f64) -> Vec<f64>>(pub F);

impl<F: FnMut(f64) -> Vec<f64>> Controller for OpenLoop<F> {
    fn control(&mut self, t: f64, _y: &[f64], _z: &[f64]) -> Result<Vec<f64>, ControlError> {
        Ok((self.0)(t))
    }
}

/// How the controller obtains the fast state fed to the law: the measured
/// state (valid feedback realization when `f` is independent of `z`) or a
/// reference trajectory integrated from the anchor under the frozen anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FastSource {
    Auto,
    CurrentState,
    ReferenceTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthesisOptions {
    /// Freeze to u = 0 once the feedback stays below the threshold for a
    /// full anchor interval (reproduces the zero-control switchover of the
    /// discounted example; off by default elsewhere).
    pub zero_switch: bool,
    pub zero_switch_threshold: f64,
    pub fast_source: FastSource,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            zero_switch: false,
            zero_switch_threshold: 1e-2,
            fast_source: FastSource::Auto,
        }
    }
}

struct Latch {
    index: i64,
    z_anchor: Vec<f64>,
    kappa: Vec<f64>,
    omega: Vec<f64>,
    t_anchor: f64,
    all_small: bool,
    any_call: bool,
}

struct ReferenceTraj {
    tau_grid: f64,
    states: Vec<Vec<f64>>, // y_ref at k * tau_grid since the anchor
}

/// Piecewise controller: latches `z` at each anchor, resolves the associated
/// certificate there, and evaluates the feedback law in between.
pub struct SynthesizedController {
    law: FeedbackLaw,
    schedule: AnchorSchedule,
    options: SynthesisOptions,
    use_reference: bool,
    latch: Option<Latch>,
    reference: Option<ReferenceTraj>,
    scratch: MinimizerScratch,
    anchor_flag: bool,
    frozen: bool,
    switch_time: Option<f64>,
    pub anchor_log: Vec<(f64, Vec<f64>)>,
}

/// Builds the stateful anchored controller for a feedback law.
pub fn synthesized_control(
    law: FeedbackLaw,
    schedule: AnchorSchedule,
    options: SynthesisOptions,
) -> SynthesizedController {
    let use_reference = match options.fast_source {
        FastSource::CurrentState => false,
        FastSource::ReferenceTrajectory => true,
        FastSource::Auto => law.minimizer.structure.f_depends_on_z,
    };
    SynthesizedController {
        law,
        schedule,
        options,
        use_reference,
        latch: None,
        reference: None,
        scratch: MinimizerScratch::default(),
        anchor_flag: false,
        frozen: false,
        switch_time: None,
        anchor_log: Vec::new(),
    }
}

impl SynthesizedController {
    pub fn switch_time(&self) -> Option<f64> {
        self.switch_time
    }

    pub fn law(&self) -> &FeedbackLaw {
        &self.law
    }

    fn maybe_latch(&mut self, t: f64, z: &[f64]) -> Result<(), ControlError> {
        let index = (t / self.schedule.delta + 1e-9).floor() as i64;
        let need = match &self.latch {
            None => true,
            Some(l) => index > l.index,
        };
        if !need {
            return Ok(());
        }
        // zero-switch: if the whole previous interval stayed small, freeze
        if let Some(prev) = &self.latch {
            if self.options.zero_switch && prev.any_call && prev.all_small && !self.frozen {
                self.frozen = true;
                self.switch_time = Some(t);
                log::info!("feedback stayed below threshold for a full anchor interval; freezing u = 0 at t = {t:.4}");
            }
        }
        let problem = self.law.problem();
        let mut z_anchor = z.to_vec();
        problem.z_box.clamp(&mut z_anchor);
        let omega = if self.frozen {
            vec![0.0; self.law.fast_basis.len()]
        } else {
            self.law.eta.omega(&z_anchor)?
        };
        let kappa = self.law.kappa(&z_anchor);
        self.anchor_log.push((t, z_anchor.clone()));
        self.anchor_flag = true;
        self.latch = Some(Latch {
            index,
            z_anchor,
            kappa,
            omega,
            t_anchor: t,
            all_small: true,
            any_call: false,
        });
        self.reference = None;
        Ok(())
    }

    fn reference_state(&mut self, tau: f64, y_now: &[f64]) -> Vec<f64> {
        let latch = self.latch.as_ref().expect("latched");
        let problem = self.law.problem().clone();
        let tau_grid = 0.02;
        if self.reference.is_none() {
            self.reference = Some(ReferenceTraj {
                tau_grid,
                states: vec![y_now.to_vec()],
            });
        }
        let z_anchor = latch.z_anchor.clone();
        let kappa = latch.kappa.clone();
        let omega = latch.omega.clone();
        let reference = self.reference.as_mut().unwrap();
        let needed = (tau / reference.tau_grid).ceil() as usize + 1;
        while reference.states.len() < needed {
            let last = reference.states.last().unwrap().clone();
            let next = rk4_fast_step(
                &self.law,
                &problem,
                &last,
                &z_anchor,
                &kappa,
                &omega,
                reference.tau_grid,
                &mut self.scratch,
            );
            reference.states.push(next);
        }
        // linear interpolation between grid states
        let pos = tau / reference.tau_grid;
        let k = (pos.floor() as usize).min(reference.states.len() - 1);
        let frac = (pos - k as f64).clamp(0.0, 1.0);
        let a = &reference.states[k];
        let b = &reference.states[(k + 1).min(reference.states.len() - 1)];
        a.iter().zip(b).map(|(x, y)| x + frac * (y - x)).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn rk4_fast_step(
    law: &FeedbackLaw,
    problem: &ControlProblem,
    y: &[f64],
    z_anchor: &[f64],
    kappa: &[f64],
    omega: &[f64],
    h: f64,
    scratch: &mut MinimizerScratch,
) -> Vec<f64> {
    let dim = y.len();
    let deriv = |y_in: &[f64], scratch: &mut MinimizerScratch| -> Vec<f64> {
        let u = law.feedback_with(y_in, z_anchor, kappa, omega, scratch);
        let mut f = vec![0.0; dim];
        problem.eval_f(&u, y_in, z_anchor, &mut f);
        f
    };
    let k1 = deriv(y, scratch);
    let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
    let k2 = deriv(&y2, scratch);
    let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
    let k3 = deriv(&y3, scratch);
    let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
    let k4 = deriv(&y4, scratch);
    (0..dim)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

impl Controller for SynthesizedController {
    fn control(&mut self, t: f64, y: &[f64], z: &[f64]) -> Result<Vec<f64>, ControlError> {
        self.maybe_latch(t, z)?;
        if self.frozen {
            return Ok(vec![0.0; self.law.problem().dim_u]);
        }
        let (kappa, omega, z_anchor, t_anchor) = {
            let l = self.latch.as_ref().unwrap();
            (
                l.kappa.clone(),
                l.omega.clone(),
                l.z_anchor.clone(),
                l.t_anchor,
            )
        };
        let y_for_law = if self.use_reference {
            let tau = (t - t_anchor) / self.law.problem().epsilon;
            self.reference_state(tau.max(0.0), y)
        } else {
            y.to_vec()
        };
        let u = self
            .law
            .feedback_with(&y_for_law, &z_anchor, &kappa, &omega, &mut self.scratch);
        let sup = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if let Some(l) = self.latch.as_mut() {
            l.any_call = true;
            if sup >= self.options.zero_switch_threshold {
                l.all_small = false;
            }
        }
        Ok(u)
    }

    fn poll_anchor(&mut self) -> bool {
        std::mem::take(&mut self.anchor_flag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::graded_basis;
    use crate::expr::Expr;
    use crate::model::{example1, example2, VectorMap};

    fn law_with(lambda: Vec<f64>, omega: Vec<f64>) -> FeedbackLaw {
        let problem = Arc::new(example1());
        let slow = graded_basis(1, lambda.len() as u32);
        let fast = graded_basis(2, 1);
        assert_eq!(omega.len(), fast.len());
        FeedbackLaw::new(problem, slow, lambda, fast, Arc::new(ConstEta(omega)))
    }

    #[test]
    fn example_problems_are_analytic_with_expected_curvature() {
        let s1 = detect_structure(&example1());
        let q1 = s1.quadratic_u.unwrap();
        assert!((q1[0] - 1.0).abs() < 1e-7 && (q1[1] - 1.0).abs() < 1e-7, "{q1:?}");
        assert!(!s1.f_depends_on_z);
        let s2 = detect_structure(&example2());
        let q = s2.quadratic_u.unwrap();
        assert!((q[0] - 0.1).abs() < 1e-7 && (q[1] - 0.1).abs() < 1e-7, "{q:?}");
    }

    #[test]
    fn cross_terms_and_nonaffine_dynamics_disable_analytic_mode() {
        let mut p = example1();
        p.cost = VectorMap::from_exprs(vec![Expr::parse("u1*u2 + y1^2 + z1^2").unwrap()]);
        assert!(detect_structure(&p).quadratic_u.is_none());

        let mut p = example1();
        p.f = VectorMap::from_exprs(vec![
            Expr::parse("-y1 + u1^3").unwrap(),
            Expr::parse("-y2 + u2").unwrap(),
        ]);
        assert!(detect_structure(&p).quadratic_u.is_none());

        let mut p = example1();
        p.f = VectorMap::from_exprs(vec![
            Expr::parse("-y1 + u1 + z1").unwrap(),
            Expr::parse("-y2 + u2").unwrap(),
        ]);
        let s = detect_structure(&p);
        assert!(s.quadratic_u.is_some());
        assert!(s.f_depends_on_z);
    }

    #[test]
    fn clamped_feedback_matches_closed_form_cases() {
        // zeta = a * z so d zeta / dz = a; at y = (0, 1):
        // a_1 = zeta' * y2 = a, a_2 = -zeta' * y1 = 0, u_1 = clamp(-a/2)
        for (a, expect) in [(1.0, -0.5), (4.0, -1.0), (-4.0, 1.0)] {
            let law = law_with(vec![a], vec![0.0, 0.0]);
            assert_eq!(law.mode(), FeedbackMode::Analytic);
            let u = law.feedback(&[0.0, 1.0], &[1.0]).unwrap();
            assert!((u[0] - expect).abs() < 1e-12, "a = {a}: {u:?}");
            assert!(u[1].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_certificates_give_zero_control() {
        let law = law_with(vec![0.0], vec![0.0, 0.0]);
        let u = law.feedback(&[0.3, -0.8], &[1.5]).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn numeric_and_analytic_agree_on_objective_values() {
        use rand::Rng;
        use rand::SeedableRng;
        let analytic = law_with(vec![0.7, -0.3], vec![0.4, -0.25]);
        let numeric = law_with(vec![0.7, -0.3], vec![0.4, -0.25]).numeric_mode();
        assert_eq!(numeric.mode(), FeedbackMode::Numeric);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut scratch = MinimizerScratch::default();
        for _ in 0..1000 {
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let z = [rng.gen_range(-2.5..2.5)];
            let ua = analytic.feedback(&y, &z).unwrap();
            let un = numeric.feedback(&y, &z).unwrap();
            let kappa = analytic.kappa(&z);
            let omega = vec![0.4, -0.25];
            let eta_grad = analytic.fast_basis.combination_gradient(&omega, &y);
            let m = analytic.minimizer();
            let ha = m.h_value(&ua, &y, &z, &kappa, &eta_grad, &mut scratch);
            let hn = m.h_value(&un, &y, &z, &kappa, &eta_grad, &mut scratch);
            assert!((ha - hn).abs() <= 1e-6, "objective mismatch: {ha} vs {hn}");
        }
    }

    #[test]
    fn feedback_minimizes_hamiltonian_over_random_controls() {
        use rand::Rng;
        use rand::SeedableRng;
        let law = law_with(vec![0.5, 0.1, -0.2], vec![0.3, 0.6]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut scratch = MinimizerScratch::default();
        let y = [0.4, -0.6];
        let z = [1.2];
        let u_star = law.feedback(&y, &z).unwrap();
        let kappa = law.kappa(&z);
        let eta_grad = law.fast_basis.combination_gradient(&[0.3, 0.6], &y);
        let h_star = law
            .minimizer()
            .h_value(&u_star, &y, &z, &kappa, &eta_grad, &mut scratch);
        for _ in 0..100 {
            let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let h = law
                .minimizer()
                .h_value(&u, &y, &z, &kappa, &eta_grad, &mut scratch);
            assert!(h_star <= h + 1e-9);
        }
    }

    #[test]
    fn feedback_output_stays_in_control_box() {
        let law = law_with(vec![50.0], vec![30.0, -30.0]);
        let u = law.feedback(&[0.9, 0.9], &[2.4]).unwrap();
        assert!(law.problem().u_box.contains(&u));
    }

    #[test]
    fn anchor_schedule_values() {
        let mut p = example1();
        p.epsilon = 0.01;
        let s = anchor_schedule(&p, None);
        assert!((s.delta - 0.005 * 100.0_f64.ln()).abs() < 1e-12);
        assert!((s.delta - 0.023025850929940457).abs() < 1e-12);
        p.epsilon = 0.1;
        let s = anchor_schedule(&p, None);
        assert!((s.delta - 0.11512925464970228).abs() < 1e-12);
        let s = anchor_schedule(&p, Some(0.05));
        assert_eq!(s.delta, 0.05);
        assert_eq!(s.source, ScheduleSource::Manual(0.05));
    }

    #[test]
    fn controller_with_zero_certificates_outputs_zero() {
        let law = law_with(vec![0.0], vec![0.0, 0.0]);
        let schedule = anchor_schedule(law.problem(), Some(0.1));
        let mut ctl = synthesized_control(law, schedule, SynthesisOptions::default());
        for k in 0..50 {
            let t = k as f64 * 0.013;
            let u = ctl
                .control(t, &[0.2 * (t * 31.0).sin(), -0.1], &[1.0 - 0.01 * t])
                .unwrap();
            assert!(u.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn anchor_is_latched_for_whole_interval() {
        // zeta = z^2 so kappa = 2z varies with the latched anchor
        let law = law_with(vec![0.0, 1.0], vec![0.0, 0.0]);
        let schedule = anchor_schedule(law.problem(), Some(0.5));
        let mut ctl = synthesized_control(law, schedule, SynthesisOptions::default());
        let y = [0.0, 1.0];
        let u0 = ctl.control(0.0, &y, &[2.0]).unwrap();
        assert!(ctl.poll_anchor());
        // mid-interval call with a very different z must reuse the latched z
        let u_mid = ctl.control(0.25, &y, &[0.5]).unwrap();
        assert!(!ctl.poll_anchor());
        assert_eq!(u0, u_mid);
        // crossing the anchor re-latches and the feedback changes with z
        let u_next = ctl.control(0.51, &y, &[0.5]).unwrap();
        assert!(ctl.poll_anchor());
        assert_ne!(u0, u_next);
        assert_eq!(ctl.anchor_log.len(), 2);
    }

    #[test]
    fn zero_switch_freezes_after_quiet_interval() {
        // tiny certificates: |u| < 1e-2 everywhere but nonzero
        let law = law_with(vec![1e-4], vec![1e-4, 1e-4]);
        let schedule = anchor_schedule(law.problem(), Some(0.2));
        let mut ctl = synthesized_control(
            law,
            schedule,
            SynthesisOptions {
                zero_switch: true,
                ..SynthesisOptions::default()
            },
        );
        let mut saw_nonzero = false;
        for k in 0..200 {
            let t = k as f64 * 0.01;
            let u = ctl.control(t, &[0.5, 0.5], &[2.0]).unwrap();
            if u.iter().any(|v| *v != 0.0) {
                saw_nonzero = true;
            }
        }
        assert!(saw_nonzero);
        assert!(ctl.switch_time().is_some());
        let u = ctl.control(2.5, &[0.5, 0.5], &[2.0]).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }
}
