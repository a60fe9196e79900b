//! Locality-constrained linear coding.
//!
//! A descriptor is reconstructed from its `neighbors` nearest codebook
//! centers under a sum-to-one constraint with an optional ridge term. With
//! shifted basis vectors `z_t = b_t - x` the constrained least squares
//! collapses to solving `(Z Z' + lambda I) c = 1` and normalizing `c` to
//! sum one; the code is scattered back into a length-`k` sparse vector.

use crate::scalar::{cast, Scalar};

use super::kmeans::Codebook;
use super::BowError;

#[derive(Debug, Clone, Copy)]
pub struct LlcConfig<F: Scalar> {
    /// Number of nearest centers used in the local base.
    pub neighbors: usize,
    /// Ridge term added to the local Gram diagonal.
    pub lambda: F,
}

impl<F: Scalar> Default for LlcConfig<F> {
    fn default() -> Self {
        Self { neighbors: 5, lambda: cast(1e-4) }
    }
}

/// Sparse code over a codebook: `(center index, weight)` pairs sorted by
/// index, at most `neighbors` of them, weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Code<F: Scalar> {
    entries: Vec<(u32, F)>,
}

impl<F: Scalar> Code<F> {
    pub fn entries(&self) -> &[(u32, F)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn sum(&self) -> F {
        self.entries.iter().map(|&(_, v)| v).sum()
    }

    /// Expands into a dense length-`k` vector.
    pub fn to_dense(&self, k: usize) -> Vec<F> {
        let mut out = vec![F::zero(); k];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

pub fn llc_encode<F: Scalar>(
    x: &[F],
    codebook: &Codebook<F>,
    cfg: &LlcConfig<F>,
) -> Result<Code<F>, BowError> {
    let k = codebook.k();
    if cfg.neighbors == 0 || cfg.neighbors > k {
        return Err(BowError::InvalidNeighbors { neighbors: cfg.neighbors, k });
    }
    if x.len() != codebook.dim() {
        return Err(BowError::DimensionMismatch { expected: codebook.dim(), got: x.len() });
    }
    if cfg.lambda < F::zero() || !cfg.lambda.is_finite() {
        return Err(BowError::NonFinite);
    }

    // Nearest centers, ties broken by index.
    let mut order: Vec<(F, usize)> = codebook
        .centers()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d2: F = c.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let selected: Vec<usize> = order.iter().take(cfg.neighbors).map(|&(_, i)| i).collect();

    let n = selected.len();
    // Exact reconstruction: with lambda 0 the Gram row of a coincident center
    // is zero, so the solver cannot see it; the indicator code is the optimum.
    // Ties sort by index, so order[0] is the lowest-index coincident center.
    if cfg.lambda == F::zero() && order[0].0 == F::zero() {
        return Ok(Code { entries: vec![(order[0].1 as u32, F::one())] });
    }

    // Shifted local Gram plus ridge.
    let z: Vec<Vec<F>> = selected
        .iter()
        .map(|&i| codebook.center(i).iter().zip(x).map(|(&c, &v)| c - v).collect())
        .collect();
    let mut gram = vec![F::zero(); n * n];
    for a in 0..n {
        for b in a..n {
            let v: F = z[a].iter().zip(&z[b]).map(|(&p, &q)| p * q).sum();
            gram[a * n + b] = v;
            gram[b * n + a] = v;
        }
    }
    for d in 0..n {
        gram[d * n + d] += cfg.lambda;
    }

    let mut rhs = vec![F::one(); n];
    solve_in_place(&mut gram, &mut rhs, n).map_err(|_| BowError::SingularGram)?;
    let total: F = rhs.iter().copied().sum();
    if total == F::zero() || !total.is_finite() {
        return Err(BowError::SingularGram);
    }
    let mut entries: Vec<(u32, F)> =
        selected.iter().zip(&rhs).map(|(&i, &c)| (i as u32, c / total)).collect();
    entries.sort_by_key(|&(i, _)| i);
    Ok(Code { entries })
}

pub(super) struct Singular;

/// Gaussian elimination with partial pivoting, in place.
pub(super) fn solve_in_place<F: Scalar>(
    a: &mut [F],
    b: &mut [F],
    n: usize,
) -> Result<(), Singular> {
    debug_assert_eq!(a.len(), n * n);
    let scale = a
        .iter()
        .fold(F::zero(), |acc, &v| acc.max(v.abs()))
        .max(F::min_positive_value());
    let tiny = scale * F::epsilon() * cast::<F>(n as f64 * 8.0);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r * n + col].abs().partial_cmp(&a[s * n + col].abs()).expect("finite")
            })
            .expect("non-empty");
        if a[pivot_row * n + col].abs() <= tiny {
            return Err(Singular);
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == F::zero() {
                continue;
            }
            for c in col..n {
                let v = a[col * n + c];
                a[row * n + c] -= factor * v;
            }
            b[row] -= factor * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[row * n + c] * b[c];
        }
        b[row] = acc / a[row * n + row];
    }
    Ok(())
}
