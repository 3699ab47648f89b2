//! Fixed-step integration of the singularly perturbed system under a
//! controller, objective evaluation, period estimation, and the duality-gap
//! report.

use thiserror::Error;

use crate::averaged::AveragedSolution;
use crate::control::{ControlError, Controller};
use crate::model::ControlProblem;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step {step} too large: the fast subsystem needs step <= eps/20 = {limit}")]
    StepTooLarge { step: f64, limit: f64 },
    #[error("state became non-finite at t = {0}")]
    NonFiniteState(f64),
    #[error("discount rate must be positive")]
    NonPositiveDiscount,
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Time-stamped samples of `(u, y, z)` with clamp accounting.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dim_u: usize,
    pub dim_y: usize,
    pub dim_z: usize,
    pub u_samples: Vec<f64>,
    pub y_samples: Vec<f64>,
    pub z_samples: Vec<f64>,
    pub anchor_flags: Vec<bool>,
    pub clamp_events: usize,
    pub step: f64,
}

impl Trajectory {
    pub fn with_dims(dim_u: usize, dim_y: usize, dim_z: usize, step: f64) -> Trajectory {
        Trajectory {
            times: Vec::new(),
            dim_u,
            dim_y,
            dim_z,
            u_samples: Vec::new(),
            y_samples: Vec::new(),
            z_samples: Vec::new(),
            anchor_flags: Vec::new(),
            clamp_events: 0,
            step,
        }
    }

    pub fn push(&mut self, t: f64, u: &[f64], y: &[f64], z: &[f64], anchor: bool) {
        debug_assert!(self.times.last().map_or(true, |last| t > *last));
        self.times.push(t);
        self.u_samples.extend_from_slice(u);
        self.y_samples.extend_from_slice(y);
        self.z_samples.extend_from_slice(z);
        self.anchor_flags.push(anchor);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn u(&self, k: usize) -> &[f64] {
        &self.u_samples[k * self.dim_u..(k + 1) * self.dim_u]
    }

    pub fn y(&self, k: usize) -> &[f64] {
        &self.y_samples[k * self.dim_y..(k + 1) * self.dim_y]
    }

    pub fn z(&self, k: usize) -> &[f64] {
        &self.z_samples[k * self.dim_z..(k + 1) * self.dim_z]
    }

    /// Concatenated `(u, y, z)` sample.
    pub fn sample(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim_u + self.dim_y + self.dim_z);
        out.extend_from_slice(self.u(k));
        out.extend_from_slice(self.y(k));
        out.extend_from_slice(self.z(k));
        out
    }

    /// Largest |G| along the trajectory.
    pub fn sup_cost(&self, problem: &ControlProblem) -> f64 {
        (0..self.len())
            .map(|k| problem.eval_cost(self.u(k), self.y(k), self.z(k)).abs())
            .fold(0.0, f64::max)
    }

    /// Tail bound `sup|G| / C * exp(-C T_end)` of the truncated discounted
    /// integral.
    pub fn discounted_tail_bound(&self, problem: &ControlProblem) -> f64 {
        if problem.discount <= 0.0 || self.is_empty() {
            return 0.0;
        }
        let t_end = *self.times.last().unwrap();
        self.sup_cost(problem) / problem.discount * (-problem.discount * t_end).exp()
    }
}

/// Classical fixed-step RK4 on the stiff-scaled form `y' = f/eps`, `z' = g`.
/// States are clamped into `Y x Z` after every step with events counted.
pub fn integrate(
    problem: &ControlProblem,
    controller: &mut dyn Controller,
    horizon: f64,
    step: f64,
) -> Result<Trajectory, SimError> {
    assert!(horizon > 0.0, "horizon must be positive");
    let limit = problem.epsilon / 20.0;
    if step > limit * (1.0 + 1e-12) {
        return Err(SimError::StepTooLarge { step, limit });
    }
    let eps = problem.epsilon;
    let dim_y = problem.dim_y;
    let dim_z = problem.dim_z;
    let n_steps = (horizon / step).round().max(1.0) as usize;

    let mut traj = Trajectory::with_dims(problem.dim_u, dim_y, dim_z, step);
    let mut y = problem.y0.clone();
    let mut z = problem.z0.clone();
    let mut f = vec![0.0; dim_y];
    let mut g = vec![0.0; dim_z];
    let mut ky = vec![vec![0.0; dim_y]; 4];
    let mut kz = vec![vec![0.0; dim_z]; 4];
    let mut y_stage = vec![0.0; dim_y];
    let mut z_stage = vec![0.0; dim_z];

    for k in 0..=n_steps {
        let t = k as f64 * step;
        let u0 = controller.control(t, &y, &z)?;
        let anchored = controller.poll_anchor();
        traj.push(t, &u0, &y, &z, anchored);
        if k == n_steps {
            break;
        }

        // stage 1 reuses u0
        problem.eval_f(&u0, &y, &z, &mut f);
        problem.eval_g(&u0, &y, &z, &mut g);
        for i in 0..dim_y {
            ky[0][i] = f[i] / eps;
        }
        kz[0].copy_from_slice(&g);

        for (stage, frac) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
            for i in 0..dim_y {
                y_stage[i] = y[i] + frac * step * ky[stage - 1][i];
            }
            for i in 0..dim_z {
                z_stage[i] = z[i] + frac * step * kz[stage - 1][i];
            }
            let ts = t + frac * step;
            let us = controller.control(ts, &y_stage, &z_stage)?;
            problem.eval_f(&us, &y_stage, &z_stage, &mut f);
            problem.eval_g(&us, &y_stage, &z_stage, &mut g);
            for i in 0..dim_y {
                ky[stage][i] = f[i] / eps;
            }
            kz[stage].copy_from_slice(&g);
        }

        for i in 0..dim_y {
            y[i] += step / 6.0 * (ky[0][i] + 2.0 * ky[1][i] + 2.0 * ky[2][i] + ky[3][i]);
        }
        for i in 0..dim_z {
            z[i] += step / 6.0 * (kz[0][i] + 2.0 * kz[1][i] + 2.0 * kz[2][i] + kz[3][i]);
        }
        if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteState(t + step));
        }
        let clamped_y = problem.y_box.clamp(&mut y);
        let clamped_z = problem.z_box.clamp(&mut z);
        if clamped_y || clamped_z {
            traj.clamp_events += 1;
        }
    }
    Ok(traj)
}

/// Trapezoid quadrature of `e^{-Ct} G(u, y, z)` along the trajectory. The
/// truncation tail bound is logged, not added.
pub fn discounted_value(traj: &Trajectory, problem: &ControlProblem) -> Result<f64, SimError> {
    if problem.discount <= 0.0 {
        return Err(SimError::NonPositiveDiscount);
    }
    let c = problem.discount;
    let n = traj.len();
    let mut total = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..n {
        let t = traj.times[k];
        let val = (-c * t).exp() * problem.eval_cost(traj.u(k), traj.y(k), traj.z(k));
        if let Some((tp, vp)) = prev {
            total += 0.5 * (val + vp) * (t - tp);
        }
        prev = Some((t, val));
    }
    log::debug!(
        "discounted value {total:.6} with tail bound {:.3e}",
        traj.discounted_tail_bound(problem)
    );
    Ok(total)
}

/// Long-run average of `G` over the post-transient window, plus a period
/// estimate from same-direction zero crossings of `z1` around its mean.
/// Fewer than 3 crossings flags no oscillation with a NaN period.
pub fn periodic_value(
    traj: &Trajectory,
    problem: &ControlProblem,
    transient: f64,
) -> Result<(f64, f64), SimError> {
    let idx: Vec<usize> = (0..traj.len())
        .filter(|&k| traj.times[k] >= transient)
        .collect();
    assert!(
        !idx.is_empty(),
        "transient {transient} discards the whole trajectory"
    );
    // time-weighted average of the running cost
    let mut num = 0.0;
    let mut den = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for &k in &idx {
        let t = traj.times[k];
        let v = problem.eval_cost(traj.u(k), traj.y(k), traj.z(k));
        if let Some((tp, vp)) = prev {
            num += 0.5 * (v + vp) * (t - tp);
            den += t - tp;
        }
        prev = Some((t, v));
    }
    let value = if den > 0.0 {
        num / den
    } else {
        let k = idx[0];
        problem.eval_cost(traj.u(k), traj.y(k), traj.z(k))
    };

    let mean_z1: f64 = idx.iter().map(|&k| traj.z(k)[0]).sum::<f64>() / idx.len() as f64;
    let mut crossings = Vec::new();
    for pair in idx.windows(2) {
        let a = traj.z(pair[0])[0] - mean_z1;
        let b = traj.z(pair[1])[0] - mean_z1;
        if a <= 0.0 && b > 0.0 {
            // linear interpolation of the upward crossing time
            let ta = traj.times[pair[0]];
            let tb = traj.times[pair[1]];
            let frac = if b - a != 0.0 { -a / (b - a) } else { 0.0 };
            crossings.push(ta + frac * (tb - ta));
        }
    }
    if crossings.len() < 3 {
        log::warn!(
            "no oscillation detected after t = {transient} ({} upward crossings)",
            crossings.len()
        );
        return Ok((value, f64::NAN));
    }
    let gaps: Vec<f64> = crossings.windows(2).map(|w| w[1] - w[0]).collect();
    let period = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok((value, period))
}

/// Near-optimality certificate data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GapReport {
    pub simulated_value: f64,
    /// `G_tilde / C` in discounted mode, `G_tilde` in periodic mode.
    pub lp_value: f64,
    pub gap: f64,
    pub tail_bound: f64,
}

/// Assembles the duality-gap report: the absolute difference between the
/// simulated objective and the averaged LP bound.
pub fn gap_report(
    sim_value: f64,
    avg_solution: &AveragedSolution,
    problem: &ControlProblem,
    tail_bound: f64,
) -> GapReport {
    let lp_value = if problem.periodic() {
        avg_solution.value
    } else {
        avg_solution.value / problem.discount
    };
    GapReport {
        simulated_value: sim_value,
        lp_value,
        gap: (sim_value - lp_value).abs(),
        tail_bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{OpenLoop, ZeroControl};
    use crate::model::{example1, Box, ControlProblem, VectorMap};

    #[test]
    fn step_limit_enforced() {
        let p = example1();
        let mut zero = ZeroControl(2);
        let err = integrate(&p, &mut zero, 1.0, p.epsilon).unwrap_err();
        assert!(matches!(err, SimError::StepTooLarge { .. }));
    }

    #[test]
    fn example1_uncontrolled_decay() {
        let p = example1(); // eps = 0.1
        let mut zero = ZeroControl(2);
        let traj = integrate(&p, &mut zero, 5.0 * p.epsilon, p.epsilon / 50.0).unwrap();
        let k = traj.len() - 1;
        let sup_y = traj.y(k).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(sup_y <= 0.5 * (-5.0_f64).exp() * 1.01, "sup_y = {sup_y}");
        assert!((traj.z(k)[0] - 2.0).abs() <= 1e-6);
        assert_eq!(traj.clamp_events, 0);
    }

    #[test]
    fn example1_open_loop_slow_descent() {
        let mut p = example1();
        p.epsilon = 0.01;
        let eps = p.epsilon;
        let mut open = OpenLoop(move |t: f64| vec![(t / eps).cos(), (t / eps).sin()]);
        let traj = integrate(&p, &mut open, 2.0, eps / 50.0).unwrap();
        let z_end = traj.z(traj.len() - 1)[0];
        assert!((z_end - 1.0).abs() <= 0.05, "z(2) = {z_end}");
    }

    fn harmonic_problem() -> ControlProblem {
        // slow state is an undamped unit oscillator; fast state decays
        let mut p = example1();
        p.name = "harmonic".into();
        p.dim_u = 1;
        p.dim_y = 1;
        p.dim_z = 2;
        p.f = VectorMap::from_exprs(vec![crate::expr::Expr::parse("-y1").unwrap()]);
        p.g = VectorMap::from_exprs(vec![
            crate::expr::Expr::parse("z2").unwrap(),
            crate::expr::Expr::parse("-z1").unwrap(),
        ]);
        p.cost = VectorMap::from_exprs(vec![crate::expr::Expr::parse("0").unwrap()]);
        p.u_box = Box::symmetric(1, 1.0);
        p.y_box = Box::symmetric(1, 1.0);
        p.z_box = Box::symmetric(2, 10.0);
        p.y0 = vec![0.0];
        p.z0 = vec![1.0, 0.0];
        p.epsilon = 1.0;
        p
    }

    #[test]
    fn rk4_energy_drift_over_thousand_periods() {
        let p = harmonic_problem();
        let mut zero = ZeroControl(1);
        let horizon = 1000.0 * std::f64::consts::TAU;
        let traj = integrate(&p, &mut zero, horizon, 0.02).unwrap();
        let k = traj.len() - 1;
        let energy = traj.z(k)[0].powi(2) + traj.z(k)[1].powi(2);
        assert!((energy - 1.0).abs() <= 1e-4, "energy drift {}", energy - 1.0);
    }

    #[test]
    fn discounted_value_of_unit_cost() {
        let mut p = example1();
        p.cost = VectorMap::from_exprs(vec![crate::expr::Expr::parse("1").unwrap()]);
        let mut zero = ZeroControl(2);
        let horizon = 10.0;
        let traj = integrate(&p, &mut zero, horizon, 1e-4).unwrap();
        let v = discounted_value(&traj, &p).unwrap();
        let exact = (1.0 - (-p.discount * horizon).exp()) / p.discount;
        assert!((v - exact).abs() <= 1e-8, "v = {v}, exact = {exact}");
    }

    #[test]
    fn discounted_value_requires_positive_rate() {
        let p = example1();
        let traj = Trajectory::with_dims(2, 2, 1, 0.1);
        let mut p0 = p;
        p0.discount = 0.0;
        assert!(matches!(
            discounted_value(&traj, &p0),
            Err(SimError::NonPositiveDiscount)
        ));
    }

    #[test]
    fn reduced_constant_trajectory_reaches_forty() {
        // eps -> 0 reasoning: u = y = 0, z = 2, G = 4; the truncated value
        // is 40 (1 - e^{-C T}); assert the quadrature against it
        let p = example1();
        let horizon = 92.1;
        let step = 5e-4;
        let n = (horizon / step) as usize;
        let mut traj = Trajectory::with_dims(2, 2, 1, step);
        for k in 0..=n {
            traj.push(k as f64 * step, &[0.0, 0.0], &[0.0, 0.0], &[2.0], false);
        }
        let v = discounted_value(&traj, &p).unwrap();
        let truncated = 40.0 * (1.0 - (-p.discount * horizon).exp());
        assert!((v - truncated).abs() <= 1e-3, "v = {v} vs {truncated}");
        // horizon -> infinity limit is 10 z0^2 = 40
        assert!((truncated - 40.0).abs() < 40.0 * 1e-4 + 0.01);
    }

    #[test]
    fn periodic_constant_trajectory_flags_no_oscillation() {
        let p = example1();
        let step = 0.01;
        let mut traj = Trajectory::with_dims(2, 2, 1, step);
        for k in 0..100 {
            traj.push(k as f64 * step, &[0.1, 0.2], &[0.3, 0.4], &[1.5], false);
        }
        let (value, period) = periodic_value(&traj, &p, 0.0).unwrap();
        let expect = p.eval_cost(&[0.1, 0.2], &[0.3, 0.4], &[1.5]);
        assert!((value - expect).abs() < 1e-12);
        assert!(period.is_nan());
    }

    #[test]
    fn periodic_sine_recovers_period() {
        let p = example1();
        let step = 0.005;
        let mut traj = Trajectory::with_dims(2, 2, 1, step);
        let n = (40.0 / step) as usize;
        for k in 0..=n {
            let t = k as f64 * step;
            traj.push(t, &[0.0, 0.0], &[0.0, 0.0], &[(2.0 * t).sin()], false);
        }
        let (_, period) = periodic_value(&traj, &p, 0.0).unwrap();
        assert!(
            (period - std::f64::consts::PI).abs() <= step + 1e-9,
            "period {period}"
        );
    }

    #[test]
    fn step_halving_changes_discounted_value_little() {
        let mut p = example1();
        p.epsilon = 0.1;
        let eps = p.epsilon;
        let horizon = 30.0;
        let run = |step: f64| {
            let mut open = OpenLoop(move |t: f64| vec![(t / eps).cos(), (t / eps).sin()]);
            let traj = integrate(&p, &mut open, horizon, step).unwrap();
            discounted_value(&traj, &p).unwrap()
        };
        let v1 = run(eps / 50.0);
        let v2 = run(eps / 100.0);
        assert!((v1 - v2).abs() <= 1e-3, "step halving moved value by {}", v1 - v2);
    }

    #[test]
    fn deterministic_trajectories() {
        let p = example1();
        let eps = p.epsilon;
        let run = || {
            let mut open = OpenLoop(move |t: f64| vec![(t / eps).cos(), (t / eps).sin()]);
            integrate(&p, &mut open, 3.0, eps / 50.0).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.z_samples, b.z_samples);
        assert_eq!(a.y_samples, b.y_samples);
    }
}
