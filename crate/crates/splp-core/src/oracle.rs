//! Brute-force dense-grid LP: exact finite-LP optimum over a full lattice of
//! the domain, used as an independent check on column generation for small
//! instances.

use thiserror::Error;

use crate::colgen::SemiInfiniteLP;
use crate::simplex::{solve_master, LpSolution, MasterLp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("dense grid would have {0} columns (limit {1})")]
    TooLarge(usize, usize),
    #[error("dense grid LP is infeasible at this density")]
    Infeasible,
}

pub const MAX_DENSE_COLUMNS: usize = 1_000_000;

/// Nested lattice densities `2^k * 10 + 1`: each coarse grid is a subset of
/// the finer ones, so the dense optimum is nonincreasing along the sequence.
pub fn nested_densities(levels: usize) -> Vec<usize> {
    (0..levels).map(|k| (1usize << k) * 10 + 1).collect()
}

/// Solves the lattice-restricted finite LP exactly.
pub fn dense_solve(silp: &SemiInfiniteLP, points_per_dim: usize) -> Result<LpSolution, DenseError> {
    let dim = silp.domain.dim();
    let n_cols = points_per_dim
        .checked_pow(dim as u32)
        .unwrap_or(usize::MAX);
    if n_cols > MAX_DENSE_COLUMNS {
        return Err(DenseError::TooLarge(n_cols, MAX_DENSE_COLUMNS));
    }
    let k = silp.k();
    let mut master = MasterLp::new(k);
    let mut psi = vec![0.0; k];
    let mut scratch = crate::colgen::EvalScratch::default();
    for p in silp.domain.lattice(points_per_dim) {
        let cost = silp.functions.eval(&p, &mut psi, &mut scratch);
        master.add_column(cost, psi.clone());
    }
    let sol = solve_master(&master);
    match sol.status {
        crate::simplex::LpStatus::Optimal => Ok(sol),
        crate::simplex::LpStatus::Infeasible => Err(DenseError::Infeasible),
        other => {
            log::warn!("dense solve ended with {other:?}");
            Err(DenseError::Infeasible)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colgen;
    use crate::model::Box;

    #[test]
    fn trivial_linear_objective() {
        let silp = SemiInfiniteLP::from_closures(
            Box::new(vec![0.0], vec![1.0]),
            |x: &[f64]| x[0],
            vec![],
        );
        for density in nested_densities(3) {
            let sol = dense_solve(&silp, density).unwrap();
            assert!(sol.value.abs() < 1e-12);
        }
    }

    #[test]
    fn mean_constrained_quadratic_at_high_density() {
        let silp = SemiInfiniteLP::from_closures(
            Box::new(vec![0.0], vec![1.0]),
            |x: &[f64]| x[0] * x[0],
            vec![std::boxed::Box::new(|x: &[f64]| x[0] - 0.5)],
        );
        let sol = dense_solve(&silp, 101).unwrap();
        assert!((sol.value - 0.25).abs() <= 1e-4, "value {}", sol.value);
    }

    #[test]
    fn nonincreasing_through_nested_refinements() {
        let silp = SemiInfiniteLP::from_closures(
            Box::new(vec![-1.0, -1.0], vec![1.0, 1.0]),
            |x: &[f64]| (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + 0.3 * x[0],
            vec![std::boxed::Box::new(|x: &[f64]| x[0] + x[1] - 0.2)],
        );
        let mut last = f64::INFINITY;
        for density in nested_densities(3) {
            let sol = dense_solve(&silp, density).unwrap();
            assert!(sol.value <= last + 1e-10, "{} after {last}", sol.value);
            last = sol.value;
        }
    }

    #[test]
    fn too_large_is_rejected() {
        let silp = SemiInfiniteLP::from_closures(
            Box::symmetric(4, 1.0),
            |x: &[f64]| x[0],
            vec![],
        );
        assert!(matches!(
            dense_solve(&silp, 101),
            Err(DenseError::TooLarge(_, _))
        ));
    }

    #[test]
    fn colgen_not_above_dense_when_certified() {
        let silp = SemiInfiniteLP::from_closures(
            Box::new(vec![0.0], vec![1.0]),
            |x: &[f64]| (x[0] - 0.37) * (x[0] - 0.9),
            vec![std::boxed::Box::new(|x: &[f64]| x[0] - 0.5)],
        );
        let cg = colgen::solve(&silp, &colgen::ColGenConfig::default()).unwrap();
        assert!(cg.certificate_gap <= 1e-6);
        let dense = dense_solve(&silp, 41).unwrap();
        assert!(cg.value <= dense.value + 1e-6);
    }
}
