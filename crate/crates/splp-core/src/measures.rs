//! Atomic probability measures, occupational measures of trajectories, and
//! the weak* metric used to compare them.

use thiserror::Error;

use crate::model::Box;
use crate::sim::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("discount rate must be positive (got {0})")]
    NonPositiveDiscount(f64),
    #[error("no trajectory samples at or after t_start = {0}")]
    EmptyWindow(f64),
    #[error("space dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Finite list of weighted points representing a probability measure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<(f64, Vec<f64>)>,
    pub space_dim: usize,
}

impl AtomicMeasure {
    pub fn new(atoms: Vec<(f64, Vec<f64>)>, space_dim: usize) -> AtomicMeasure {
        let m = AtomicMeasure { atoms, space_dim };
        debug_assert!(m.check_invariants().is_ok(), "{:?}", m.check_invariants());
        m
    }

    pub fn dirac(point: Vec<f64>) -> AtomicMeasure {
        let space_dim = point.len();
        AtomicMeasure {
            atoms: vec![(1.0, point)],
            space_dim,
        }
    }

    /// Verifies nonnegative weights summing to 1 (within 1e-9) and uniform
    /// point dimensions.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut total = 0.0;
        for (w, p) in &self.atoms {
            if !(*w >= 0.0) {
                return Err(format!("negative weight {w}"));
            }
            if p.len() != self.space_dim {
                return Err(format!(
                    "atom dimension {} != space_dim {}",
                    p.len(),
                    self.space_dim
                ));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("weights sum to {total}, expected 1"));
        }
        Ok(())
    }

    pub fn integrate(&self, q: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|(w, p)| w * q(p)).sum()
    }

    /// Number of atoms with weight above `tol`.
    pub fn support_size(&self, tol: f64) -> usize {
        self.atoms.iter().filter(|(w, _)| *w > tol).count()
    }

    /// Merges atoms whose points coincide within `tol` in the sup norm.
    pub fn merged(&self, tol: f64) -> AtomicMeasure {
        let mut atoms: Vec<(f64, Vec<f64>)> = Vec::new();
        for (w, p) in &self.atoms {
            if let Some((wm, _)) = atoms.iter_mut().find(|(_, q)| {
                q.iter().zip(p).all(|(a, b)| (a - b).abs() <= tol)
            }) {
                *wm += w;
            } else {
                atoms.push((*w, p.clone()));
            }
        }
        AtomicMeasure {
            atoms,
            space_dim: self.space_dim,
        }
    }

    /// Text table serialization: one atom per line, weight then coordinates.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (w, p) in &self.atoms {
            out.push_str(&format!("{w:.17e}"));
            for c in p {
                out.push_str(&format!(" {c:.17e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_table(text: &str) -> Result<AtomicMeasure, String> {
        let mut atoms = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let nums: Result<Vec<f64>, _> =
                line.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let nums = nums.map_err(|e| format!("line {}: {e}", lineno + 1))?;
            if nums.len() < 2 {
                return Err(format!("line {}: need weight and coordinates", lineno + 1));
            }
            let d = nums.len() - 1;
            if *dim.get_or_insert(d) != d {
                return Err(format!("line {}: inconsistent dimension", lineno + 1));
            }
            atoms.push((nums[0], nums[1..].to_vec()));
        }
        Ok(AtomicMeasure {
            atoms,
            space_dim: dim.unwrap_or(0),
        })
    }
}

/// Discounted occupational measure of the full `(u, y, z)` sample path:
/// atom weights proportional to `C e^{-C t_k} dt_k`, renormalized to 1.
pub fn discounted_occupational(
    traj: &Trajectory,
    discount: f64,
) -> Result<AtomicMeasure, MeasureError> {
    if !(discount > 0.0) {
        return Err(MeasureError::NonPositiveDiscount(discount));
    }
    let n = traj.len();
    assert!(n > 0, "empty trajectory");
    let t_end = traj.times[n - 1];
    let tail = (-discount * t_end).exp();
    if tail > 1e-6 {
        log::warn!(
            "discounted occupational measure truncated at T = {t_end}: tail weight {tail:.3e} > 1e-6"
        );
    }
    let mut atoms = Vec::with_capacity(n);
    let mut total = 0.0;
    for k in 0..n {
        let dt = local_step(&traj.times, k);
        let w = discount * (-discount * traj.times[k]).exp() * dt;
        total += w;
        atoms.push((w, traj.sample(k)));
    }
    for (w, _) in &mut atoms {
        *w /= total;
    }
    Ok(AtomicMeasure {
        atoms,
        space_dim: traj.dim_u + traj.dim_y + traj.dim_z,
    })
}

/// Long-run occupational measure: uniform in time over `[t_start, T_end]`.
pub fn long_run_occupational(
    traj: &Trajectory,
    t_start: f64,
) -> Result<AtomicMeasure, MeasureError> {
    let idx: Vec<usize> = (0..traj.len())
        .filter(|&k| traj.times[k] >= t_start)
        .collect();
    if idx.is_empty() {
        return Err(MeasureError::EmptyWindow(t_start));
    }
    let mut atoms = Vec::with_capacity(idx.len());
    let mut total = 0.0;
    for (pos, &k) in idx.iter().enumerate() {
        // time step within the window only
        let prev = if pos == 0 { traj.times[k] } else { traj.times[idx[pos - 1]] };
        let next = if pos + 1 == idx.len() {
            traj.times[k]
        } else {
            traj.times[idx[pos + 1]]
        };
        let dt = 0.5 * (next - prev)
            + if pos == 0 || pos + 1 == idx.len() {
                0.25 * (next - prev)
            } else {
                0.0
            };
        let dt = dt.max(f64::MIN_POSITIVE);
        total += dt;
        atoms.push((dt, traj.sample(k)));
    }
    for (w, _) in &mut atoms {
        *w /= total;
    }
    Ok(AtomicMeasure {
        atoms,
        space_dim: traj.dim_u + traj.dim_y + traj.dim_z,
    })
}

fn local_step(times: &[f64], k: usize) -> f64 {
    let n = times.len();
    if n == 1 {
        return 1.0;
    }
    let left = if k == 0 { times[0] } else { times[k - 1] };
    let right = if k + 1 == n { times[n - 1] } else { times[k + 1] };
    let dt = 0.5 * (right - left);
    if k == 0 || k + 1 == n {
        // boundary samples carry a half interval
        dt.max(f64::MIN_POSITIVE)
    } else {
        dt
    }
}

/// One term of the metric dictionary: a multilinear coordinate monomial
/// scaled to sup-norm <= 1 on the reference box and clamped to [-1, 1].
#[derive(Debug, Clone)]
struct DictTerm {
    coords: Vec<usize>,
    scale: f64,
}

/// Truncated dense Lipschitz family defining the weak* metric.
#[derive(Debug, Clone)]
pub struct MetricDictionary {
    pub space_dim: usize,
    terms: Vec<DictTerm>,
}

impl MetricDictionary {
    /// Default dictionary on a box: multilinear monomials over coordinate
    /// subsets, ordered by (subset size, lexicographic), truncated to
    /// `max_terms` (32 keeps the truncation error below 2^-32).
    pub fn default_for_box(b: &Box, max_terms: usize) -> MetricDictionary {
        let d = b.dim();
        let mut subsets: Vec<Vec<usize>> = (1..1usize << d)
            .map(|mask| (0..d).filter(|j| mask >> j & 1 == 1).collect())
            .collect();
        subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let terms = subsets
            .into_iter()
            .take(max_terms)
            .map(|coords| {
                let scale: f64 = coords
                    .iter()
                    .map(|&j| b.lower[j].abs().max(b.upper[j].abs()).max(1e-12))
                    .product();
                DictTerm { coords, scale }
            })
            .collect();
        MetricDictionary {
            space_dim: d,
            terms,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, l: usize, x: &[f64]) -> f64 {
        let t = &self.terms[l];
        let raw: f64 = t.coords.iter().map(|&j| x[j]).product::<f64>() / t.scale;
        raw.clamp(-1.0, 1.0)
    }
}

/// Weak* distance `sum_l 2^-l |int q_l d(mu1 - mu2)|` under the dictionary.
pub fn rho(
    mu1: &AtomicMeasure,
    mu2: &AtomicMeasure,
    dict: &MetricDictionary,
) -> Result<f64, MeasureError> {
    if mu1.space_dim != mu2.space_dim {
        return Err(MeasureError::DimensionMismatch(mu1.space_dim, mu2.space_dim));
    }
    if dict.space_dim != mu1.space_dim {
        return Err(MeasureError::DimensionMismatch(dict.space_dim, mu1.space_dim));
    }
    let mut total = 0.0;
    let mut weight = 0.5;
    for l in 0..dict.len() {
        let a = mu1.integrate(|x| dict.eval(l, x));
        let b = mu2.integrate(|x| dict.eval(l, x));
        total += weight * (a - b).abs();
        weight *= 0.5;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Trajectory;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn constant_traj(point: (&[f64], &[f64], &[f64]), t_end: f64, step: f64) -> Trajectory {
        let n = (t_end / step).round() as usize + 1;
        let mut traj = Trajectory::with_dims(point.0.len(), point.1.len(), point.2.len(), step);
        for k in 0..n {
            traj.push(k as f64 * step, point.0, point.1, point.2, false);
        }
        traj
    }

    #[test]
    fn discounted_constant_trajectory_is_dirac() {
        let traj = constant_traj((&[0.2], &[0.1], &[2.0]), 200.0, 0.5);
        let mu = discounted_occupational(&traj, 0.1).unwrap();
        mu.check_invariants().unwrap();
        assert!((mu.integrate(|_| 1.0) - 1.0).abs() < 1e-12);
        let merged = mu.merged(0.0);
        assert_eq!(merged.atoms.len(), 1);
        assert_eq!(merged.atoms[0].1, vec![0.2, 0.1, 2.0]);
        assert!((merged.atoms[0].0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discounted_rejects_bad_rate() {
        let traj = constant_traj((&[0.0], &[0.0], &[0.0]), 1.0, 0.5);
        assert_eq!(
            discounted_occupational(&traj, 0.0),
            Err(MeasureError::NonPositiveDiscount(0.0))
        );
    }

    #[test]
    fn discounted_alternating_matches_refined_quadrature() {
        // w(t) alternates between a and b on unit slices; compare the weight
        // of the a-phase against direct quadrature at half the step size.
        let c = 0.1;
        let step = 0.005_f64;
        let t_end = 160.0_f64;
        let n = (t_end / step).round() as usize + 1;
        let mut traj = Trajectory::with_dims(1, 1, 1, step);
        let phase = |t: f64| (t.floor() as i64) % 2 == 0;
        for k in 0..n {
            let t = k as f64 * step;
            let v = if phase(t) { 1.0 } else { -1.0 };
            traj.push(t, &[v], &[0.0], &[0.0], false);
        }
        let mu = discounted_occupational(&traj, c).unwrap();
        let weight_a = mu.integrate(|x| if x[0] > 0.0 { 1.0 } else { 0.0 });

        // independent oracle: trapezoid quadrature of C e^{-Ct} 1_a at step/2
        let h = step / 2.0;
        let m = (t_end / h).round() as usize;
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..=m {
            let t = k as f64 * h;
            let w = c * (-c * t).exp() * if k == 0 || k == m { 0.5 } else { 1.0 };
            den += w;
            if phase(t) {
                num += w;
            }
        }
        let oracle = num / den;
        assert!(
            (weight_a - oracle).abs() <= 1e-4,
            "weight {weight_a} vs oracle {oracle}"
        );
    }

    #[test]
    fn long_run_constant_is_dirac() {
        let traj = constant_traj((&[0.5], &[0.0], &[1.0]), 10.0, 0.1);
        let mu = long_run_occupational(&traj, 2.0).unwrap().merged(0.0);
        assert_eq!(mu.atoms.len(), 1);
        assert!((mu.atoms[0].0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn long_run_window_errors_when_empty() {
        let traj = constant_traj((&[0.0], &[0.0], &[0.0]), 1.0, 0.5);
        assert!(matches!(
            long_run_occupational(&traj, 5.0),
            Err(MeasureError::EmptyWindow(_))
        ));
    }

    #[test]
    fn long_run_half_and_half() {
        let step = 0.01;
        let mut traj = Trajectory::with_dims(1, 1, 1, step);
        let n = 2000;
        for k in 0..n {
            let t = k as f64 * step;
            let v = if (t.floor() as i64) % 2 == 0 { 2.0 } else { -2.0 };
            traj.push(t, &[v], &[0.0], &[0.0], false);
        }
        let mu = long_run_occupational(&traj, 0.0).unwrap();
        let frac = mu.integrate(|x| if x[0] > 0.0 { 1.0 } else { 0.0 });
        let window = traj.times[traj.len() - 1];
        assert!((frac - 0.5).abs() <= step / window * 4.0 + 1e-9, "{frac}");
    }

    #[test]
    fn long_run_circular_control_mean_square() {
        // u(t) = (cos t, sin t) over 10 periods: int u1^2 dmu -> 1/2
        let step = 1e-3;
        let t_end = 10.0 * std::f64::consts::TAU;
        let n = (t_end / step) as usize;
        let mut traj = Trajectory::with_dims(2, 1, 1, step);
        for k in 0..=n {
            let t = k as f64 * step;
            traj.push(t, &[t.cos(), t.sin()], &[0.0], &[0.0], false);
        }
        let mu = long_run_occupational(&traj, 0.0).unwrap();
        let mean_sq = mu.integrate(|x| x[0] * x[0]);
        assert!((mean_sq - 0.5).abs() <= 1e-3, "{mean_sq}");
    }

    #[test]
    fn rho_zero_on_identical_and_two_point_formula() {
        let b = Box::symmetric(2, 2.0);
        let dict = MetricDictionary::default_for_box(&b, 32);
        let a = AtomicMeasure::dirac(vec![1.0, -0.5]);
        let c = AtomicMeasure::dirac(vec![-2.0, 0.25]);
        assert_eq!(rho(&a, &a, &dict).unwrap(), 0.0);
        let mut expect = 0.0;
        let mut w = 0.5;
        for l in 0..dict.len() {
            expect += w * (dict.eval(l, &a.atoms[0].1) - dict.eval(l, &c.atoms[0].1)).abs();
            w *= 0.5;
        }
        let d = rho(&a, &c, &dict).unwrap();
        assert!((d - expect).abs() < 1e-15);
        assert!(d > 0.0);
    }

    #[test]
    fn rho_dimension_mismatch() {
        let dict = MetricDictionary::default_for_box(&Box::symmetric(2, 1.0), 8);
        let a = AtomicMeasure::dirac(vec![0.0, 0.0]);
        let b = AtomicMeasure::dirac(vec![0.0]);
        assert!(matches!(
            rho(&a, &b, &dict),
            Err(MeasureError::DimensionMismatch(2, 1))
        ));
    }

    fn random_measure(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> AtomicMeasure {
        let n = rng.gen_range(1..6);
        let mut atoms: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|_| {
                let w: f64 = rng.gen_range(0.01..1.0);
                let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                (w, p)
            })
            .collect();
        let total: f64 = atoms.iter().map(|(w, _)| w).sum();
        for (w, _) in &mut atoms {
            *w /= total;
        }
        AtomicMeasure::new(atoms, dim)
    }

    #[test]
    fn rho_pseudometric_on_random_triples() {
        let dict = MetricDictionary::default_for_box(&Box::symmetric(3, 2.0), 32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_measure(&mut rng, 3);
            let b = random_measure(&mut rng, 3);
            let c = random_measure(&mut rng, 3);
            let ab = rho(&a, &b, &dict).unwrap();
            let ba = rho(&b, &a, &dict).unwrap();
            let bc = rho(&b, &c, &dict).unwrap();
            let ac = rho(&a, &c, &dict).unwrap();
            assert!((ab - ba).abs() <= 1e-15);
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn measures_from_ops_satisfy_invariants(seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let step = 0.05;
            let mut traj = Trajectory::with_dims(1, 1, 1, step);
            let n = rng.gen_range(5..200);
            for k in 0..n {
                let t = k as f64 * step;
                traj.push(t, &[rng.gen_range(-1.0..1.0)], &[0.0], &[t.sin()], false);
            }
            let mu = discounted_occupational(&traj, 0.5).unwrap();
            prop_assert!(mu.check_invariants().is_ok());
            let nu = long_run_occupational(&traj, 0.0).unwrap();
            prop_assert!(nu.check_invariants().is_ok());
        }
    }
}
