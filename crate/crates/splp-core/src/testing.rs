//! Test-support oracles kept independent of the solver implementations they
//! check: exhaustive basic-solution enumeration for the simplex, random
//! feasible instance generators, and KKT assertions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::simplex::{LpSolution, LpStatus, MasterLp};

/// Brute-force optimum over all basic solutions of the master LP
/// (every subset of K+1 columns, solved by plain Gauss-Jordan). Returns
/// `None` when no feasible basic solution exists.
pub fn enumerate_basic_optimum(lp: &MasterLp) -> Option<f64> {
    let m = lp.k + 1;
    let n = lp.n_cols();
    if n < m {
        return None;
    }
    let mut best: Option<f64> = None;
    let mut subset: Vec<usize> = (0..m).collect();
    loop {
        if let Some(p) = solve_square_for_distribution(lp, &subset) {
            if p.iter().all(|v| *v >= -1e-9) {
                let value: f64 = subset
                    .iter()
                    .zip(&p)
                    .map(|(&j, w)| lp.costs[j] * w)
                    .sum();
                best = Some(match best {
                    Some(b) => b.min(value),
                    None => value,
                });
            }
        }
        // next combination in lexicographic order
        let mut i = m;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] != i + n - m {
                subset[i] += 1;
                for j in i + 1..m {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Solves `[1; A_S] p = (1, 0, ..)` for the column subset `S` by
/// Gauss-Jordan with partial pivoting (independent of the simplex LU path).
fn solve_square_for_distribution(lp: &MasterLp, subset: &[usize]) -> Option<Vec<f64>> {
    let m = subset.len();
    let mut a = vec![0.0; m * (m + 1)];
    for (s, &j) in subset.iter().enumerate() {
        a[s] = 1.0;
        for i in 0..lp.k {
            a[(i + 1) * (m + 1) + s] = lp.columns[j][i];
        }
    }
    a[m] = 1.0; // rhs first entry
    for col in 0..m {
        let (pivot_row, pivot_val) = (col..m)
            .map(|r| (r, a[r * (m + 1) + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pivot_val < 1e-11 {
            return None;
        }
        if pivot_row != col {
            for j in 0..=m {
                a.swap(col * (m + 1) + j, pivot_row * (m + 1) + j);
            }
        }
        let inv = 1.0 / a[col * (m + 1) + col];
        for j in 0..=m {
            a[col * (m + 1) + j] *= inv;
        }
        for r in 0..m {
            if r != col {
                let f = a[r * (m + 1) + col];
                if f != 0.0 {
                    for j in 0..=m {
                        a[r * (m + 1) + j] -= f * a[col * (m + 1) + j];
                    }
                }
            }
        }
    }
    Some((0..m).map(|r| a[r * (m + 1) + m]).collect())
}

/// Random master LP that is feasible by construction: rows are shifted so a
/// hidden random distribution satisfies them exactly.
pub fn random_feasible_master(seed: u64, n_cols: usize, max_k: usize) -> MasterLp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(0..=max_k);
    let mut lp = MasterLp::new(k);
    let mut hidden: Vec<f64> = (0..n_cols).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = hidden.iter().sum();
    hidden.iter_mut().for_each(|w| *w /= total);

    let mut rows = vec![vec![0.0; n_cols]; k];
    for row in rows.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let shift: f64 = row.iter().zip(&hidden).map(|(a, w)| a * w).sum();
        for v in row.iter_mut() {
            *v -= shift;
        }
    }
    for j in 0..n_cols {
        let cost = rng.gen_range(-1.0..1.0);
        lp.add_column(cost, rows.iter().map(|r| r[j]).collect());
    }
    lp
}

/// Asserts primal feasibility, dual feasibility and zero duality gap of an
/// optimal master solution.
pub fn assert_kkt(lp: &MasterLp, sol: &LpSolution, tol: f64) {
    assert_eq!(sol.status, LpStatus::Optimal);
    let total: f64 = sol.weights.iter().sum();
    assert!((total - 1.0).abs() <= tol, "weights sum to {total}");
    assert!(sol.weights.iter().all(|w| *w >= -tol), "negative weight");
    for i in 0..lp.k {
        if sol.eliminated_rows.contains(&i) {
            continue;
        }
        let r: f64 = sol
            .weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * lp.columns[j][i])
            .sum();
        assert!(r.abs() <= tol, "row {i} residual {r}");
    }
    let min_reduced = (0..lp.n_cols())
        .map(|j| sol.reduced_cost(lp, j))
        .fold(f64::INFINITY, f64::min);
    assert!(min_reduced >= -tol, "dual infeasible: reduced cost {min_reduced}");
    assert!(
        (sol.value - sol.lambda0).abs() <= tol * (1.0 + sol.value.abs()),
        "duality gap: primal {} dual {}",
        sol.value,
        sol.lambda0
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::solve_master;

    #[test]
    fn enumeration_agrees_on_tiny_known_instance() {
        let mut lp = MasterLp::new(1);
        lp.add_column(0.0, vec![1.0]);
        lp.add_column(1.0, vec![-1.0]);
        assert!((enumerate_basic_optimum(&lp).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn generated_instances_are_feasible() {
        for seed in 0..20 {
            let lp = random_feasible_master(seed, 20, 4);
            let sol = solve_master(&lp);
            assert_eq!(sol.status, LpStatus::Optimal, "seed {seed}");
        }
    }
}
