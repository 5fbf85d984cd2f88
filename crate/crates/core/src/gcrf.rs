//! Binary Gaussian CRF for dense labeling.
//!
//! The model scores a continuous vector s of per-pixel, per-class values with
//! `F(s) = −½ sᵀ(W + λI)s + Uᵀs`, where the pairwise matrix couples the two
//! classes through pixel embeddings: `W = [[0, 𝒜𝒜ᵀ], [𝒜𝒜ᵀ, 0]]`. Inference
//! maximizes F by solving `(W + λI)s* = U` with conjugate gradients, applied
//! matrix-free in O(L·d) per step. Prediction takes per-pixel argmaxes of s*;
//! training feeds per-pixel softmaxes of s* into cross-entropy.
//!
//! Unary and pairwise scale factors are threaded through the solver and the
//! backward pass so the potential-balancing schemes can rescale either side
//! and still get exact gradients, including gradients with respect to the
//! scales themselves.

use crate::error::{Error, Result};
use crate::numerics::{
    cg_default_max_iter, conjugate_gradient, dot, log_softmax_in_place, mean_abs_slice,
    LinearOperator, Tensor,
};

/// One image's Gaussian CRF: per-class unaries, pixel embeddings, and the
/// diagonal regularizer that keeps the quadratic form invertible.
#[derive(Debug, Clone)]
pub struct GcrfSystem {
    /// Length 2L, laid out class-major: `[u¹_1..u¹_L | u²_1..u²_L]`.
    unary: Vec<f64>,
    /// L×d pixel embeddings 𝒜; row j is pixel j's embedding.
    embeddings: Tensor,
    lambda: f64,
}

impl GcrfSystem {
    pub fn new(unary: Vec<f64>, embeddings: Tensor, lambda: f64) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "embeddings must be a matrix, got shape {:?}",
                embeddings.shape()
            )));
        }
        let pixels = embeddings.rows();
        if pixels == 0 {
            return Err(Error::ShapeMismatch("need at least one pixel".into()));
        }
        if unary.len() != 2 * pixels {
            return Err(Error::DataLength {
                expected: 2 * pixels,
                got: unary.len(),
            });
        }
        if unary.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gcrf unary potentials".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            unary,
            embeddings,
            lambda,
        })
    }

    /// Number of pixels L.
    pub fn pixel_count(&self) -> usize {
        self.embeddings.rows()
    }

    /// Dimension of the score vector, 2L.
    pub fn dim(&self) -> usize {
        2 * self.pixel_count()
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Applies the pairwise matrix without materializing it:
    /// `W v = [𝒜(𝒜ᵀ v₂), 𝒜(𝒜ᵀ v₁)]` for `v = [v₁ | v₂]`.
    pub fn apply_pairwise(&self, v: &[f64], out: &mut [f64]) {
        let pixels = self.pixel_count();
        let depth = self.embeddings.cols();
        assert_eq!(v.len(), 2 * pixels);
        assert_eq!(out.len(), 2 * pixels);

        let mut projected = vec![0.0; depth];
        for (half_in, half_out) in [(pixels, 0), (0, pixels)] {
            for t in projected.iter_mut() {
                *t = 0.0;
            }
            for j in 0..pixels {
                let row = self.embeddings.row(j);
                let vj = v[half_in + j];
                if vj != 0.0 {
                    for (t, a) in projected.iter_mut().zip(row) {
                        *t += a * vj;
                    }
                }
            }
            for j in 0..pixels {
                let row = self.embeddings.row(j);
                out[half_out + j] = row.iter().zip(&projected).map(|(a, t)| a * t).sum();
            }
        }
    }

    /// Mean absolute value of the unary vector.
    pub fn unary_norm(&self) -> f64 {
        mean_abs_slice(&self.unary).unwrap()
    }

    /// Mean absolute value of the dense pairwise matrix, including its zero
    /// blocks: `Σ_{jk} |(𝒜𝒜ᵀ)_{jk}| / (2L²)`. Costs O(L²·d) but never forms
    /// the matrix.
    pub fn pairwise_norm(&self) -> f64 {
        let pixels = self.pixel_count();
        let mut total = 0.0;
        for j in 0..pixels {
            let row_j = self.embeddings.row(j);
            for k in 0..pixels {
                let row_k = self.embeddings.row(k);
                let entry: f64 = row_j.iter().zip(row_k).map(|(a, b)| a * b).sum();
                total += entry.abs();
            }
        }
        total / (2.0 * (pixels * pixels) as f64)
    }

    /// Gradient of `pairwise_norm` with respect to the embeddings:
    /// `sign(𝒜𝒜ᵀ)·𝒜 / L²`, with sign(0) = 0.
    pub fn pairwise_norm_grad(&self) -> Tensor {
        let pixels = self.pixel_count();
        let depth = self.embeddings.cols();
        let mut grad = Tensor::zeros(&[pixels, depth]);
        for j in 0..pixels {
            let row_j = self.embeddings.row(j);
            for k in 0..pixels {
                let row_k = self.embeddings.row(k);
                let entry: f64 = row_j.iter().zip(row_k).map(|(a, b)| a * b).sum();
                let sign = if entry > 0.0 {
                    1.0
                } else if entry < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                if sign != 0.0 {
                    for q in 0..depth {
                        *grad.at_mut(j, q) += sign * row_k[q];
                    }
                }
            }
        }
        let scale = 1.0 / (pixels * pixels) as f64;
        for v in grad.data_mut() {
            *v *= scale;
        }
        grad
    }
}

/// The matrix of the quadratic form, `pairwise_scale·W + λI`, as a
/// matrix-free operator.
pub struct SystemOperator<'a> {
    system: &'a GcrfSystem,
    pairwise_scale: f64,
}

impl<'a> SystemOperator<'a> {
    pub fn new(system: &'a GcrfSystem, pairwise_scale: f64) -> Self {
        Self {
            system,
            pairwise_scale,
        }
    }
}

impl LinearOperator for SystemOperator<'_> {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.system.apply_pairwise(v, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = self.pairwise_scale * *o + self.system.lambda * vi;
        }
    }
}

/// Converged score vector with the solve diagnostics.
#[derive(Debug, Clone)]
pub struct SolvedScores {
    /// s*, length 2L, same layout as the unaries.
    pub scores: Vec<f64>,
    pub residual: f64,
    pub iters: usize,
}

/// Solves `(W + λI) s* = U` by conjugate gradients.
pub fn solve_scores(sys: &GcrfSystem, tol: f64) -> Result<SolvedScores> {
    solve_scores_scaled(sys, 1.0, 1.0, tol)
}

/// Solves `(pairwise_scale·W + λI) s* = unary_scale·U`, the system the
/// potential-balancing schemes work with.
pub fn solve_scores_scaled(
    sys: &GcrfSystem,
    unary_scale: f64,
    pairwise_scale: f64,
    tol: f64,
) -> Result<SolvedScores> {
    let rhs: Vec<f64> = sys.unary.iter().map(|u| unary_scale * u).collect();
    let op = SystemOperator::new(sys, pairwise_scale);
    let sol = conjugate_gradient(&op, &rhs, tol, cg_default_max_iter(sys.dim()))?;
    Ok(SolvedScores {
        scores: sol.x,
        residual: sol.residual,
        iters: sol.iters,
    })
}

/// Per-pixel argmax of the score vector; ties go to label 0.
pub fn predict(scores: &[f64]) -> Vec<usize> {
    let pixels = scores.len() / 2;
    (0..pixels)
        .map(|j| usize::from(scores[pixels + j] > scores[j]))
        .collect()
}

/// Per-pixel softmax marginals of the scores and the cross-entropy
/// `−(1/L) Σ_j log p_j(y_j)` against the labeling.
pub fn marginals_and_ce(scores: &[f64], labels: &[usize]) -> Result<(Tensor, f64)> {
    let pixels = scores.len() / 2;
    if labels.len() != pixels {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: pixels,
        });
    }
    let mut marginals = Tensor::zeros(&[pixels, 2]);
    let mut loss = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::LabelOutOfRange {
                label,
                num_labels: 2,
                pos: j,
            });
        }
        let mut log_p = [scores[j], scores[pixels + j]];
        log_softmax_in_place(&mut log_p);
        loss -= log_p[label] / pixels as f64;
        *marginals.at_mut(j, 0) = log_p[0].exp();
        *marginals.at_mut(j, 1) = log_p[1].exp();
    }
    Ok((marginals, loss))
}

/// Gradient of the cross-entropy with respect to the score vector:
/// `(1/L)(p − onehot(y))` in the class-major layout.
pub fn ce_score_grad(scores: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let pixels = scores.len() / 2;
    let (marginals, _) = marginals_and_ce(scores, labels)?;
    let inv = 1.0 / pixels as f64;
    let mut grad = vec![0.0; scores.len()];
    for (j, &label) in labels.iter().enumerate() {
        for k in 0..2 {
            let indicator = if k == label { 1.0 } else { 0.0 };
            grad[k * pixels + j] = inv * (marginals.at(j, k) - indicator);
        }
    }
    Ok(grad)
}

/// Gradients flowing out of one solve, for the potentials, the embeddings,
/// and the two scale factors.
#[derive(Debug, Clone)]
pub struct GcrfBackward {
    /// dL/dU, with respect to the raw (unscaled) unaries.
    pub dl_du: Vec<f64>,
    /// dL/d𝒜, L×d.
    pub dl_da: Tensor,
    pub dl_dunary_scale: f64,
    pub dl_dpairwise_scale: f64,
    pub residual: f64,
    pub iters: usize,
}

/// Backward pass for the plain (unscaled) system: dL/dU and dL/d𝒜 given
/// dL/ds* at the converged scores.
pub fn backward(
    sys: &GcrfSystem,
    s_star: &[f64],
    dl_ds: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, Tensor)> {
    let b = backward_scaled(sys, s_star, dl_ds, 1.0, 1.0, tol)?;
    Ok((b.dl_du, b.dl_da))
}

/// Backward pass through the scaled solve.
///
/// A second CG solve with the same operator gives `g = (pairwise_scale·W +
/// λI)⁻¹ dL/ds*`. Then dL/dU = unary_scale·g, and the pairwise gradient
/// `−g ⊗ s*` is never materialized: it is contracted through the block
/// structure and the 𝒜𝒜ᵀ parameterization into four outer-product terms,
/// each an L-vector times a d-row, so the whole pass stays O(L·d).
pub fn backward_scaled(
    sys: &GcrfSystem,
    s_star: &[f64],
    dl_ds: &[f64],
    unary_scale: f64,
    pairwise_scale: f64,
    tol: f64,
) -> Result<GcrfBackward> {
    let pixels = sys.pixel_count();
    let depth = sys.embeddings.cols();
    if s_star.len() != sys.dim() || dl_ds.len() != sys.dim() {
        return Err(Error::ShapeMismatch(format!(
            "score or gradient length does not match system dim {}",
            sys.dim()
        )));
    }

    let op = SystemOperator::new(sys, pairwise_scale);
    let sol = conjugate_gradient(&op, dl_ds, tol, cg_default_max_iter(sys.dim()))?;
    let g = sol.x;

    let dl_du: Vec<f64> = g.iter().map(|v| unary_scale * v).collect();
    let dl_dunary_scale = dot(&g, &sys.unary);

    let mut pairwise_applied = vec![0.0; sys.dim()];
    sys.apply_pairwise(s_star, &mut pairwise_applied);
    let dl_dpairwise_scale = -dot(&g, &pairwise_applied);

    // dL/d𝒜 = −c·[g₁(s₂ᵀ𝒜) + g₂(s₁ᵀ𝒜) + s₂(g₁ᵀ𝒜) + s₁(g₂ᵀ𝒜)] with
    // c = pairwise_scale, where subscripts split the 2L vectors in halves.
    let (g1, g2) = g.split_at(pixels);
    let (s1, s2) = s_star.split_at(pixels);
    let project = |vec: &[f64]| -> Vec<f64> {
        let mut row = vec![0.0; depth];
        for j in 0..pixels {
            let a_row = sys.embeddings.row(j);
            let vj = vec[j];
            if vj != 0.0 {
                for (r, a) in row.iter_mut().zip(a_row) {
                    *r += a * vj;
                }
            }
        }
        row
    };
    let s1_a = project(s1);
    let s2_a = project(s2);
    let g1_a = project(g1);
    let g2_a = project(g2);

    let mut dl_da = Tensor::zeros(&[pixels, depth]);
    for j in 0..pixels {
        let row = dl_da.row_mut(j);
        for q in 0..depth {
            row[q] = -pairwise_scale
                * (g1[j] * s2_a[q] + g2[j] * s1_a[q] + s2[j] * g1_a[q] + s1[j] * g2_a[q]);
        }
    }

    Ok(GcrfBackward {
        dl_du,
        dl_da,
        dl_dunary_scale,
        dl_dpairwise_scale,
        residual: sol.residual,
        iters: sol.iters,
    })
}

/// One full cross-entropy step on an image: solve, loss, and all gradients.
#[derive(Debug, Clone)]
pub struct GcrfCeLoss {
    pub loss: f64,
    pub marginals: Tensor,
    pub prediction: Vec<usize>,
    pub backward: GcrfBackward,
    pub forward_residual: f64,
    pub forward_iters: usize,
}

/// End-to-end cross-entropy on a labeled image under the given scales:
/// forward solve, softmax marginals, loss, and the backward pass.
pub fn loss_ce_scaled(
    sys: &GcrfSystem,
    labels: &[usize],
    unary_scale: f64,
    pairwise_scale: f64,
    tol: f64,
) -> Result<GcrfCeLoss> {
    let solved = solve_scores_scaled(sys, unary_scale, pairwise_scale, tol)?;
    let (marginals, loss) = marginals_and_ce(&solved.scores, labels)?;
    let dl_ds = ce_score_grad(&solved.scores, labels)?;
    let backward = backward_scaled(sys, &solved.scores, &dl_ds, unary_scale, pairwise_scale, tol)?;
    Ok(GcrfCeLoss {
        loss,
        marginals,
        prediction: predict(&solved.scores),
        backward,
        forward_residual: solved.residual,
        forward_iters: solved.iters,
    })
}
