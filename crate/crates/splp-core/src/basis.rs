//! Monomial test-function families and their gradients.
//!
//! The LP constraint rows are built from gradients of these functions, so
//! evaluation returns values and gradients together. An optional affine
//! rescaling maps the working box onto `[-1, 1]^dim` before the monomials are
//! applied; this spans the same function space (the constraints only see the
//! span plus constants) while keeping high-degree rows well conditioned.

use serde::{Deserialize, Serialize};

use crate::model::Box;

/// Exponent vector of one monomial; total degree >= 1 (constants are vacuous
/// test functions and excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiIndex {
    pub exponents: Vec<u32>,
}

impl MultiIndex {
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }
}

/// Affine change of coordinates `x_hat_j = (x_j - center_j) / half_width_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineRescale {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

/// Ordered family of monomials on `R^dim`, graded-lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomialBasis {
    pub dim: usize,
    pub indices: Vec<MultiIndex>,
    pub rescale: Option<AffineRescale>,
}

/// All multi-indices with `1 <= total degree <= max_degree` in graded-lex
/// order (degree major, then lexicographic on the exponent vector).
pub fn graded_basis(dim: usize, max_degree: u32) -> MonomialBasis {
    assert!(dim >= 1 && max_degree >= 1);
    let mut indices = Vec::new();
    for degree in 1..=max_degree {
        let mut exps = vec![0u32; dim];
        collect_of_degree(dim, degree, 0, &mut exps, &mut indices);
    }
    MonomialBasis {
        dim,
        indices,
        rescale: None,
    }
}

fn collect_of_degree(
    dim: usize,
    remaining: u32,
    coord: usize,
    exps: &mut Vec<u32>,
    out: &mut Vec<MultiIndex>,
) {
    if coord == dim - 1 {
        exps[coord] = remaining;
        out.push(MultiIndex {
            exponents: exps.clone(),
        });
        return;
    }
    for e in 0..=remaining {
        exps[coord] = e;
        collect_of_degree(dim, remaining - e, coord + 1, exps, out);
    }
    exps[coord] = 0;
}

impl MonomialBasis {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.iter().map(|i| i.degree()).max().unwrap_or(0)
    }

    /// Returns a copy that evaluates on coordinates rescaled from `b` onto
    /// `[-1, 1]^dim`. Degenerate (zero-width) coordinates are left unscaled.
    pub fn rescaled_to(&self, b: &Box) -> MonomialBasis {
        assert_eq!(b.dim(), self.dim);
        let center: Vec<f64> = b.lower.iter().zip(&b.upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let half_width: Vec<f64> = b
            .lower
            .iter()
            .zip(&b.upper)
            .map(|(l, u)| {
                let h = 0.5 * (u - l);
                if h > 0.0 {
                    h
                } else {
                    1.0
                }
            })
            .collect();
        MonomialBasis {
            dim: self.dim,
            indices: self.indices.clone(),
            rescale: Some(AffineRescale { center, half_width }),
        }
    }

    /// Evaluates every basis function and its gradient at `point`.
    ///
    /// `values[k]` is monomial `k`; `gradients[k*dim..(k+1)*dim]` its gradient
    /// with respect to the ORIGINAL coordinates (chain rule applied when a
    /// rescaling is attached).
    pub fn eval_with_gradient(&self, point: &[f64], values: &mut [f64], gradients: &mut [f64]) {
        assert_eq!(point.len(), self.dim);
        assert_eq!(values.len(), self.len());
        assert_eq!(gradients.len(), self.len() * self.dim);

        let max_deg = self.max_degree() as usize;
        // power tables per coordinate in (possibly rescaled) coordinates
        let mut pows = vec![0.0; self.dim * (max_deg + 1)];
        let mut inv_scale = vec![1.0; self.dim];
        for j in 0..self.dim {
            let xj = match &self.rescale {
                Some(r) => {
                    inv_scale[j] = 1.0 / r.half_width[j];
                    (point[j] - r.center[j]) * inv_scale[j]
                }
                None => point[j],
            };
            let row = &mut pows[j * (max_deg + 1)..(j + 1) * (max_deg + 1)];
            row[0] = 1.0;
            for d in 1..=max_deg {
                row[d] = row[d - 1] * xj;
            }
        }
        let pow = |j: usize, d: u32| pows[j * (max_deg + 1) + d as usize];

        for (k, mi) in self.indices.iter().enumerate() {
            let mut value = 1.0;
            for (j, &e) in mi.exponents.iter().enumerate() {
                value *= pow(j, e);
            }
            values[k] = value;
            for (j, &e) in mi.exponents.iter().enumerate() {
                let g = if e == 0 {
                    0.0
                } else {
                    let mut prod = e as f64 * pow(j, e - 1);
                    for (j2, &e2) in mi.exponents.iter().enumerate() {
                        if j2 != j {
                            prod *= pow(j2, e2);
                        }
                    }
                    prod * inv_scale[j]
                };
                gradients[k * self.dim + j] = g;
            }
        }
    }

    /// Convenience allocation wrapper around [`Self::eval_with_gradient`].
    pub fn values_and_gradients(&self, point: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut values = vec![0.0; self.len()];
        let mut gradients = vec![0.0; self.len() * self.dim];
        self.eval_with_gradient(point, &mut values, &mut gradients);
        (values, gradients)
    }

    /// Values only (used for the discount terms `psi(z0) - psi(z)`).
    pub fn values(&self, point: &[f64]) -> Vec<f64> {
        let (values, _) = self.values_and_gradients(point);
        values
    }

    /// Gradient of the linear combination `sum_k coeffs[k] * basis_k` at
    /// `point` — the certificate gradients used by the feedback law.
    pub fn combination_gradient(&self, coeffs: &[f64], point: &[f64]) -> Vec<f64> {
        let mut scratch = BasisScratch::default();
        let mut out = vec![0.0; self.dim];
        self.combination_gradient_into(coeffs, point, &mut scratch, &mut out);
        out
    }

    /// Allocation-free variant of [`Self::combination_gradient`] for hot
    /// loops; `out` must have length `dim`.
    pub fn combination_gradient_into(
        &self,
        coeffs: &[f64],
        point: &[f64],
        scratch: &mut BasisScratch,
        out: &mut [f64],
    ) {
        assert_eq!(coeffs.len(), self.len());
        scratch.values.resize(self.len(), 0.0);
        scratch.gradients.resize(self.len() * self.dim, 0.0);
        self.eval_with_gradient(point, &mut scratch.values, &mut scratch.gradients);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, c) in coeffs.iter().enumerate() {
            for j in 0..self.dim {
                out[j] += c * scratch.gradients[k * self.dim + j];
            }
        }
    }
}

/// Reusable evaluation buffers for basis calls in hot loops.
#[derive(Debug, Clone, Default)]
pub struct BasisScratch {
    pub values: Vec<f64>,
    pub gradients: Vec<f64>,
}
