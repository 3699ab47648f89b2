//! Problem definition: boxes, evaluable dynamics/cost maps and the two
//! built-in singularly perturbed test problems.

use std::fmt;
use std::sync::Arc;

use crate::expr::Expr;

/// Axis-aligned box `[lower_1, upper_1] x ... x [lower_d, upper_d]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Box {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Box {
        assert_eq!(lower.len(), upper.len(), "box bound dimensions differ");
        assert!(!lower.is_empty(), "box must have dimension >= 1");
        for (l, u) in lower.iter().zip(&upper) {
            assert!(l <= u, "box lower bound exceeds upper bound");
        }
        Box { lower, upper }
    }

    /// Symmetric box `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Box {
        Box::new(vec![-r; dim], vec![r; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Clamps `x` componentwise into the box; returns true if anything moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = v.clamp(*l, *u);
            if c != *v {
                *v = c;
                moved = true;
            }
        }
        moved
    }

    /// Euclidean length of the main diagonal.
    pub fn diagonal(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    /// Corner points (2^dim of them).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|j| {
                        if mask >> j & 1 == 0 {
                            self.lower[j]
                        } else {
                            self.upper[j]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Uniform lattice with `per_dim` points per coordinate (corners included).
    pub fn lattice(&self, per_dim: usize) -> Vec<Vec<f64>> {
        assert!(per_dim >= 1);
        let d = self.dim();
        let mut out = Vec::with_capacity(per_dim.pow(d as u32));
        let mut idx = vec![0usize; d];
        loop {
            let point: Vec<f64> = (0..d)
                .map(|j| {
                    if per_dim == 1 {
                        0.5 * (self.lower[j] + self.upper[j])
                    } else {
                        self.lower[j]
                            + (self.upper[j] - self.lower[j]) * idx[j] as f64
                                / (per_dim - 1) as f64
                    }
                })
                .collect();
            out.push(point);
            let mut k = 0;
            loop {
                if k == d {
                    return out;
                }
                idx[k] += 1;
                if idx[k] < per_dim {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

type BuiltinFn = fn(&[f64], &[f64], &[f64], &mut [f64]);

/// Vector-valued map of `(u, y, z)`, either a built-in closed form or a list
/// of parsed expression trees (one per output component).
#[derive(Clone)]
pub enum MapKind {
    Builtin(&'static str, BuiltinFn),
    Exprs(Arc<Vec<Expr>>),
}

#[derive(Clone)]
pub struct VectorMap {
    pub out_dim: usize,
    kind: MapKind,
}

impl VectorMap {
    pub fn builtin(name: &'static str, out_dim: usize, f: BuiltinFn) -> VectorMap {
        VectorMap {
            out_dim,
            kind: MapKind::Builtin(name, f),
        }
    }

    pub fn from_exprs(exprs: Vec<Expr>) -> VectorMap {
        VectorMap {
            out_dim: exprs.len(),
            kind: MapKind::Exprs(Arc::new(exprs)),
        }
    }

    #[inline]
    pub fn eval(&self, u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.out_dim);
        match &self.kind {
            MapKind::Builtin(_, f) => f(u, y, z, out),
            MapKind::Exprs(es) => {
                for (o, e) in out.iter_mut().zip(es.iter()) {
                    *o = e.eval(u, y, z);
                }
            }
        }
    }

    /// Convenience for scalar maps (`out_dim == 1`).
    #[inline]
    pub fn eval_scalar(&self, u: &[f64], y: &[f64], z: &[f64]) -> f64 {
        let mut out = [0.0];
        self.eval(u, y, z, &mut out);
        out[0]
    }
}

impl fmt::Debug for VectorMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            MapKind::Builtin(name, _) => write!(f, "VectorMap::builtin({name})"),
            MapKind::Exprs(es) => {
                let texts: Vec<String> = es.iter().map(|e| e.to_string()).collect();
                write!(f, "VectorMap::exprs({})", texts.join("; "))
            }
        }
    }
}

/// The singularly perturbed control problem
/// `eps y' = f(u,y,z)`, `z' = g(u,y,z)` with running cost `G` discounted at
/// rate `discount` (`discount == 0` selects periodic mode).
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    pub dim_u: usize,
    pub dim_y: usize,
    pub dim_z: usize,
    pub f: VectorMap,
    pub g: VectorMap,
    pub cost: VectorMap,
    pub u_box: Box,
    pub y_box: Box,
    pub z_box: Box,
    /// Discount rate C >= 0; zero means periodic mode.
    pub discount: f64,
    pub y0: Vec<f64>,
    pub z0: Vec<f64>,
    pub epsilon: f64,
    /// User-supplied Lipschitz estimate of `f`, used by the anchor schedule.
    pub lipschitz_f: f64,
}

impl ControlProblem {
    #[inline]
    pub fn eval_f(&self, u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        self.f.eval(u, y, z, out);
    }

    #[inline]
    pub fn eval_g(&self, u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        self.g.eval(u, y, z, out);
    }

    #[inline]
    pub fn eval_cost(&self, u: &[f64], y: &[f64], z: &[f64]) -> f64 {
        self.cost.eval_scalar(u, y, z)
    }

    pub fn periodic(&self) -> bool {
        self.discount == 0.0
    }
}

fn ex1_f(u: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
    out[0] = -y[0] + u[0];
    out[1] = -y[1] + u[1];
}

fn ex1_g(u: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
    out[0] = -y[0] * u[1] + y[1] * u[0];
}

fn ex1_cost(u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
    out[0] = u[0] * u[0] + u[1] * u[1] + y[0] * y[0] + y[1] * y[1] + z[0] * z[0];
}

/// Discounted problem: two fast integrators driven towards the controls, a
/// scalar slow state driven by the fast/control cross product, quadratic cost.
pub fn example1() -> ControlProblem {
    ControlProblem {
        name: "example1".into(),
        dim_u: 2,
        dim_y: 2,
        dim_z: 1,
        f: VectorMap::builtin("example1.f", 2, ex1_f),
        g: VectorMap::builtin("example1.g", 1, ex1_g),
        cost: VectorMap::builtin("example1.G", 1, ex1_cost),
        u_box: Box::symmetric(2, 1.0),
        y_box: Box::symmetric(2, 1.0),
        z_box: Box::symmetric(1, 2.5),
        discount: 0.1,
        y0: vec![0.5, 0.5],
        z0: vec![2.0],
        epsilon: 0.1,
        lipschitz_f: 1.0,
    }
}

fn ex2_g(u: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
    out[0] = z[1];
    out[1] = -4.0 * z[0] - 0.3 * z[1] - y[0] * u[1] + y[1] * u[0];
}

fn ex2_cost(u: &[f64], _y: &[f64], z: &[f64], out: &mut [f64]) {
    out[0] = 0.1 * u[0] * u[0] + 0.1 * u[1] * u[1] - z[0] * z[0];
}

/// Periodic problem: same fast block as [`example1`], slow damped oscillator
/// forced by the fast/control cross product, negative reward on |z1|.
/// The averaged LP in periodic mode ignores the initial state; `(y0, z0)`
/// below only seed the simulation before its transient is discarded.
pub fn example2() -> ControlProblem {
    ControlProblem {
        name: "example2".into(),
        dim_u: 2,
        dim_y: 2,
        dim_z: 2,
        f: VectorMap::builtin("example1.f", 2, ex1_f),
        g: VectorMap::builtin("example2.g", 2, ex2_g),
        cost: VectorMap::builtin("example2.G", 1, ex2_cost),
        u_box: Box::symmetric(2, 1.0),
        y_box: Box::symmetric(2, 1.0),
        z_box: Box::new(vec![-2.5, -4.5], vec![2.5, 4.5]),
        discount: 0.0,
        y0: vec![0.5, 0.5],
        z0: vec![0.5, 0.0],
        epsilon: 0.01,
        lipschitz_f: 1.0,
    }
}

/// Checks the problem invariants, returning one message per violation.
pub fn validate(problem: &ControlProblem) -> Vec<String> {
    let mut v = Vec::new();
    if problem.dim_u == 0 || problem.dim_y == 0 || problem.dim_z == 0 {
        v.push("dimensions must be positive".into());
    }
    if problem.u_box.dim() != problem.dim_u {
        v.push("u_box dimension mismatch".into());
    }
    if problem.y_box.dim() != problem.dim_y {
        v.push("y_box dimension mismatch".into());
    }
    if problem.z_box.dim() != problem.dim_z {
        v.push("z_box dimension mismatch".into());
    }
    if problem.f.out_dim != problem.dim_y {
        v.push("f output dimension mismatch".into());
    }
    if problem.g.out_dim != problem.dim_z {
        v.push("g output dimension mismatch".into());
    }
    if problem.cost.out_dim != 1 {
        v.push("G must be scalar".into());
    }
    if problem.y0.len() != problem.dim_y || !problem.y_box.contains(&problem.y0) {
        v.push("y0 outside Y".into());
    }
    if problem.z0.len() != problem.dim_z || !problem.z_box.contains(&problem.z0) {
        v.push("z0 outside Z".into());
    }
    if !(problem.epsilon > 0.0) {
        v.push("epsilon must be positive".into());
    }
    if !(problem.discount >= 0.0) {
        v.push("discount must be nonnegative".into());
    }
    if !(problem.lipschitz_f > 0.0) {
        v.push("lipschitz_f must be positive".into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn example1_closed_forms() {
        let p = example1();
        assert_eq!(p.eval_cost(&[0.0, 0.0], &[0.0, 0.0], &[2.0]), 4.0);
        let mut g = [0.0];
        p.eval_g(&[1.0, 0.0], &[0.0, 1.0], &[0.0], &mut g);
        assert_eq!(g[0], 1.0);
        // quasi-steady state: f(u, u, z) = 0
        let mut f = [0.0; 2];
        p.eval_f(&[1.0, 1.0], &[1.0, 1.0], &[0.3], &mut f);
        assert_eq!(f, [0.0, 0.0]);
    }

    #[test]
    fn example2_closed_forms() {
        let p = example2();
        // trivial steady state has zero cost
        assert_eq!(p.eval_cost(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let mut g = [0.0; 2];
        p.eval_g(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &mut g);
        assert_eq!(g, [0.0, -4.0]);
        assert!((p.eval_cost(&[1.0, 1.0], &[0.3, -0.4], &[0.0, 1.7]) - 0.2).abs() < 1e-15);
        assert!(p.periodic());
    }

    #[test]
    fn validate_flags_violations() {
        assert!(validate(&example1()).is_empty());
        assert!(validate(&example2()).is_empty());

        let mut p = example1();
        p.z0 = vec![3.0];
        let v = validate(&p);
        assert!(v.iter().any(|m| m.contains("z0 outside Z")), "{v:?}");

        let mut p = example1();
        p.epsilon = 0.0;
        let v = validate(&p);
        assert!(v.iter().any(|m| m.contains("epsilon must be positive")));
    }

    #[test]
    fn quasi_steady_state_identity_on_sampled_controls() {
        let p = example1();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut f = [0.0; 2];
        for _ in 0..1000 {
            let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let z = [rng.gen_range(-2.5..2.5)];
            p.eval_f(&u, &u, &z, &mut f);
            assert_eq!(f, [0.0, 0.0]);
        }
    }

    #[test]
    fn maps_finite_on_domain_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for p in [example1(), example2()] {
            let mut f = vec![0.0; p.dim_y];
            let mut g = vec![0.0; p.dim_z];
            for _ in 0..10_000 {
                let sample = |b: &Box, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                    b.lower
                        .iter()
                        .zip(&b.upper)
                        .map(|(l, u)| rng.gen_range(*l..=*u))
                        .collect()
                };
                let u = sample(&p.u_box, &mut rng);
                let y = sample(&p.y_box, &mut rng);
                let z = sample(&p.z_box, &mut rng);
                p.eval_f(&u, &y, &z, &mut f);
                p.eval_g(&u, &y, &z, &mut g);
                let c = p.eval_cost(&u, &y, &z);
                assert!(f.iter().all(|v| v.is_finite()));
                assert!(g.iter().all(|v| v.is_finite()));
                assert!(c.is_finite());
            }
        }
    }

    #[test]
    fn expression_backed_problem_evaluates() {
        use crate::expr::Expr;
        let f = VectorMap::from_exprs(vec![
            Expr::parse("-y1 + u1").unwrap(),
            Expr::parse("-y2 + u2").unwrap(),
        ]);
        let mut out = [0.0; 2];
        f.eval(&[1.0, 0.5], &[0.25, 0.5], &[], &mut out);
        assert_eq!(out, [0.75, 0.0]);
    }

    #[test]
    fn lattice_and_corners() {
        let b = Box::new(vec![0.0, -1.0], vec![1.0, 1.0]);
        assert_eq!(b.corners().len(), 4);
        let points = b.lattice(3);
        assert_eq!(points.len(), 9);
        assert!(points.contains(&vec![0.5, 0.0]));
        assert!(b.contains(&[0.5, 0.0]));
        let mut x = vec![2.0, 0.0];
        assert!(b.clamp(&mut x));
        assert_eq!(x, vec![1.0, 0.0]);
    }
}
