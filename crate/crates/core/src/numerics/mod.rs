//! Dense tensor arithmetic, stable reductions, a matrix-free conjugate-gradient
//! solver, deterministic RNG, and a finite-difference gradient oracle.
//!
//! Everything here computes in `f64`; the gradient-check tolerances used across
//! the crate assume that.

mod cg;
mod fd;
mod rng;
mod tensor;

pub use cg::{conjugate_gradient, CgSolution};
pub use fd::{finite_difference_grad, max_rel_deviation};
pub use rng::{seeded_rng, RngDomain};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default relative-residual tolerance for conjugate-gradient solves.
pub const CG_DEFAULT_TOL: f64 = 1e-10;

/// Default iteration cap for conjugate-gradient solves of the given dimension.
pub fn cg_default_max_iter(dim: usize) -> usize {
    10 * dim
}

/// A symmetric positive-definite linear map applied matrix-free.
pub trait LinearOperator {
    /// Dimension of the square operator.
    fn dim(&self) -> usize;

    /// Writes `A * v` into `out`. Both slices have length `dim()`.
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

/// Dense symmetric matrix in row-major order, used where a small operator is
/// materialized explicitly (tests, oracles).
pub struct DenseOperator {
    dim: usize,
    entries: Vec<f64>,
}

impl DenseOperator {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DataLength {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        Ok(Self { dim, entries })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let row = &self.entries[i * self.dim..(i + 1) * self.dim];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
}

/// log Σ exp(v_i), computed with a max shift so large inputs do not overflow.
///
/// Exact for a single element.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("log_sum_exp input".into()));
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Mean absolute value of the entries, the potential norm used by the scaling
/// schemes.
pub fn mean_abs(t: &Tensor) -> Result<f64> {
    mean_abs_slice(t.data())
}

/// `mean_abs` on a raw slice.
pub fn mean_abs_slice(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64)
}

/// In-place log-softmax of a row; returns nothing, the row becomes normalized
/// log-probabilities.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row).expect("log_softmax on empty row");
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
