//! Balancing unary and pairwise potential magnitudes.
//!
//! Structured models whose potentials come from separate networks can start
//! (and stay) with wildly mismatched unary and pairwise scales, which drags
//! down both training and final accuracy. This module implements the
//! counter-measures: multiplying the unaries by a scale α picked by online
//! grid search during training, normalizing both potential families to fixed
//! magnitudes offline, penalizing the magnitude ratio directly, and the
//! temperature baseline that scales both families together (and therefore
//! cannot fix a ratio). The ratio statistic itself is exposed for telemetry.

use crate::chain_crf::ChainPotentials;
use crate::error::{Error, Result};
use crate::gcrf::GcrfSystem;
use crate::numerics::{mean_abs, mean_abs_slice, Tensor};
use serde::{Deserialize, Serialize};

/// Floor substituted for a potential norm during training so pathological
/// initializations cannot divide by zero. The pure normalization operation
/// still errors instead.
pub const NORM_FLOOR: f64 = 1e-8;

/// Which balancing scheme a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// No intervention; potentials used as produced.
    None,
    /// Unary scale α re-picked by grid search after every epoch and applied
    /// at evaluation too.
    Online,
    /// Per-instance normalization of both families to fixed magnitudes.
    Offline,
    /// Ratio penalty added to the objective; potentials left unmodified.
    OfflineReg,
    /// Both families scaled by the same α (a baseline, not a fix).
    Temperature,
}

/// Scaling configuration and the mutable α it carries across epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingState {
    pub mode: ScalingMode,
    /// Current unary scale. Starts at 1 in online mode and persists across
    /// epochs; fixed for offline and temperature modes.
    pub alpha: f64,
    /// Candidate scales for the online grid search, ascending.
    pub grid: Vec<f64>,
    /// Weight λ of the ratio penalty.
    pub reg_lambda: f64,
    /// Target α of the ratio penalty.
    pub reg_alpha: f64,
}

impl ScalingState {
    pub fn new(mode: ScalingMode) -> Self {
        Self {
            mode,
            alpha: 1.0,
            grid: default_alpha_grid(),
            reg_lambda: 1.0,
            reg_alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::NonPositiveAlpha { alpha: self.alpha });
        }
        if self.mode == ScalingMode::Online {
            if self.grid.is_empty() {
                return Err(Error::EmptyGrid);
            }
            if self.grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("alpha grid must be strictly ascending".into()));
            }
        }
        if self.grid.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Config("alpha grid entries must be positive and finite".into()));
        }
        if self.reg_lambda < 0.0 {
            return Err(Error::Config("reg_lambda must be nonnegative".into()));
        }
        if !(self.reg_alpha > 0.0) {
            return Err(Error::NonPositiveAlpha { alpha: self.reg_alpha });
        }
        Ok(())
    }
}

/// Powers of two from 2⁻⁸ to 2⁸, uniform in log scale.
pub fn default_alpha_grid() -> Vec<f64> {
    (-8..=8).map(|t| 2f64.powi(t)).collect()
}

fn require_positive_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::NonPositiveAlpha { alpha });
    }
    Ok(())
}

/// Chain potentials with the unaries multiplied by α, pairwise untouched.
pub fn apply_unary_scale(p: &ChainPotentials, alpha: f64) -> Result<ChainPotentials> {
    require_positive_alpha(alpha)?;
    ChainPotentials::new(p.unary().scaled(alpha), p.pairwise().clone())
}

/// Gaussian CRF system with the unaries multiplied by α.
pub fn apply_unary_scale_gcrf(sys: &GcrfSystem, alpha: f64) -> Result<GcrfSystem> {
    require_positive_alpha(alpha)?;
    GcrfSystem::new(
        sys.unary().iter().map(|u| alpha * u).collect(),
        sys.embeddings().clone(),
        sys.lambda(),
    )
}

/// Chain potentials with both families multiplied by α.
pub fn temperature_scale(p: &ChainPotentials, alpha: f64) -> Result<ChainPotentials> {
    require_positive_alpha(alpha)?;
    ChainPotentials::new(p.unary().scaled(alpha), p.pairwise().scaled(alpha))
}

/// Gaussian CRF system with both families multiplied by α. The pairwise
/// matrix is a quadratic function of the embeddings, so scaling them by √α
/// scales it by α.
pub fn temperature_scale_gcrf(sys: &GcrfSystem, alpha: f64) -> Result<GcrfSystem> {
    require_positive_alpha(alpha)?;
    GcrfSystem::new(
        sys.unary().iter().map(|u| alpha * u).collect(),
        sys.embeddings().scaled(alpha.sqrt()),
        sys.lambda(),
    )
}

/// Picks the grid point whose evaluated loss is smallest.
///
/// Grid points where the loss comes back non-finite are skipped; ties prefer
/// the smaller α. Errors when no point evaluates finite.
pub fn grid_search_alpha(grid: &[f64], mut loss_eval: impl FnMut(f64) -> f64) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best: Option<(f64, f64)> = None;
    for &alpha in grid {
        require_positive_alpha(alpha)?;
        let loss = loss_eval(alpha);
        if !loss.is_finite() {
            continue;
        }
        let replace = match best {
            None => true,
            Some((best_loss, best_alpha)) => {
                loss < best_loss || (loss == best_loss && alpha < best_alpha)
            }
        };
        if replace {
            best = Some((loss, alpha));
        }
    }
    best.map(|(_, alpha)| alpha).ok_or(Error::NoFiniteGridPoint)
}

/// Ratio of the unary and pairwise mean absolute magnitudes. A zero pairwise
/// family yields +∞, which telemetry records as a flagged sentinel.
pub fn potential_ratio(p: &ChainPotentials) -> f64 {
    let unary_norm = mean_abs(p.unary()).unwrap();
    let pairwise_norm = mean_abs(p.pairwise()).unwrap();
    if pairwise_norm == 0.0 {
        f64::INFINITY
    } else {
        unary_norm / pairwise_norm
    }
}

/// Same statistic for the Gaussian CRF, with the pairwise norm taken over
/// the dense matrix the embeddings imply.
pub fn potential_ratio_gcrf(sys: &GcrfSystem) -> f64 {
    let pairwise_norm = sys.pairwise_norm();
    if pairwise_norm == 0.0 {
        f64::INFINITY
    } else {
        sys.unary_norm() / pairwise_norm
    }
}

/// Chain potentials renormalized per instance: `Û = α·U/mean_abs(U)`,
/// `Ŵ = W/mean_abs(W)`. The pure operation; zero norms are an error.
pub fn offline_normalize(p: &ChainPotentials, alpha: f64) -> Result<ChainPotentials> {
    require_positive_alpha(alpha)?;
    let unary_norm = mean_abs(p.unary()).unwrap();
    let pairwise_norm = mean_abs(p.pairwise()).unwrap();
    if unary_norm == 0.0 || pairwise_norm == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    ChainPotentials::new(
        p.unary().scaled(alpha / unary_norm),
        p.pairwise().scaled(1.0 / pairwise_norm),
    )
}

/// Training-time variant: norms below `NORM_FLOOR` are clamped to it instead
/// of erroring, so a pathological initialization cannot blow up the division.
pub fn offline_normalize_guarded(p: &ChainPotentials, alpha: f64) -> Result<ChainPotentials> {
    require_positive_alpha(alpha)?;
    let unary_norm = mean_abs(p.unary()).unwrap().max(NORM_FLOOR);
    let pairwise_norm = mean_abs(p.pairwise()).unwrap().max(NORM_FLOOR);
    ChainPotentials::new(
        p.unary().scaled(alpha / unary_norm),
        p.pairwise().scaled(1.0 / pairwise_norm),
    )
}

/// Pulls a gradient taken with respect to `x̂ = k·x / max(mean_abs(x), floor)`
/// back to a gradient with respect to `x`, treating the norm as part of the
/// differentiated graph. In the clamped regime the norm is constant, so only
/// the direct term survives; that is the exact subgradient of the guarded
/// map.
fn normalized_scale_backward(x: &[f64], k: f64, g_hat: &[f64], g_out: &mut [f64]) {
    let count = x.len() as f64;
    let raw_norm = mean_abs_slice(x).unwrap();
    let norm = raw_norm.max(NORM_FLOOR);
    let direct = k / norm;
    let clamped = raw_norm < NORM_FLOOR;
    let inner: f64 = g_hat.iter().zip(x).map(|(g, v)| g * v).sum();
    for ((out, &g), &v) in g_out.iter_mut().zip(g_hat).zip(x) {
        *out += direct * g;
        if !clamped && v != 0.0 {
            *out -= k * inner * v.signum() / (count * norm * norm);
        }
    }
}

/// Backward pass of `offline_normalize_guarded`: converts gradients with
/// respect to the normalized potentials into gradients with respect to the
/// raw ones.
pub fn offline_normalize_backward(
    p: &ChainPotentials,
    alpha: f64,
    grad_u_hat: &Tensor,
    grad_w_hat: &Tensor,
) -> (Tensor, Tensor) {
    let mut grad_u = Tensor::zeros(p.unary().shape());
    let mut grad_w = Tensor::zeros(p.pairwise().shape());
    normalized_scale_backward(p.unary().data(), alpha, grad_u_hat.data(), grad_u.data_mut());
    normalized_scale_backward(p.pairwise().data(), 1.0, grad_w_hat.data(), grad_w.data_mut());
    (grad_u, grad_w)
}

/// Scale factors realizing offline normalization for the Gaussian CRF, whose
/// pairwise family lives behind a matrix-free operator:
/// `(α/mean_abs(U), 1/mean_abs(W))`.
pub fn offline_scales_gcrf(sys: &GcrfSystem, alpha: f64) -> Result<(f64, f64)> {
    require_positive_alpha(alpha)?;
    let unary_norm = sys.unary_norm();
    let pairwise_norm = sys.pairwise_norm();
    if unary_norm == 0.0 || pairwise_norm == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    Ok((alpha / unary_norm, 1.0 / pairwise_norm))
}

/// Training-time variant with the `NORM_FLOOR` clamp.
pub fn offline_scales_gcrf_guarded(sys: &GcrfSystem, alpha: f64) -> Result<(f64, f64)> {
    require_positive_alpha(alpha)?;
    Ok((
        alpha / sys.unary_norm().max(NORM_FLOOR),
        1.0 / sys.pairwise_norm().max(NORM_FLOOR),
    ))
}

/// Ratio penalty `λ(mean_abs(U)/mean_abs(W) − α)²` on chain potentials, with
/// analytic gradients. The mean-abs derivative is `sign(x_i)/n`, zero at
/// exactly-zero entries.
pub fn ratio_regularizer(
    p: &ChainPotentials,
    reg_lambda: f64,
    reg_alpha: f64,
) -> Result<(f64, Tensor, Tensor)> {
    require_positive_alpha(reg_alpha)?;
    let unary_norm = mean_abs(p.unary()).unwrap();
    let pairwise_norm = mean_abs(p.pairwise()).unwrap();
    if pairwise_norm == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let ratio = unary_norm / pairwise_norm;
    let gap = ratio - reg_alpha;
    let penalty = reg_lambda * gap * gap;

    // d penalty / d norm_u = 2λ·gap / ‖W‖; d penalty / d norm_w = −2λ·gap·r/‖W‖.
    let d_norm_u = 2.0 * reg_lambda * gap / pairwise_norm;
    let d_norm_w = -2.0 * reg_lambda * gap * ratio / pairwise_norm;

    let mut grad_u = Tensor::zeros(p.unary().shape());
    let inv_u = 1.0 / p.unary().len() as f64;
    for (g, &v) in grad_u.data_mut().iter_mut().zip(p.unary().data()) {
        if v != 0.0 {
            *g = d_norm_u * v.signum() * inv_u;
        }
    }
    let mut grad_w = Tensor::zeros(p.pairwise().shape());
    let inv_w = 1.0 / p.pairwise().len() as f64;
    for (g, &v) in grad_w.data_mut().iter_mut().zip(p.pairwise().data()) {
        if v != 0.0 {
            *g = d_norm_w * v.signum() * inv_w;
        }
    }
    Ok((penalty, grad_u, grad_w))
}

/// Ratio penalty for the Gaussian CRF: gradients with respect to the unary
/// vector and the embeddings (through the dense-matrix norm).
pub fn ratio_regularizer_gcrf(
    sys: &GcrfSystem,
    reg_lambda: f64,
    reg_alpha: f64,
) -> Result<(f64, Vec<f64>, Tensor)> {
    require_positive_alpha(reg_alpha)?;
    let unary_norm = sys.unary_norm();
    let pairwise_norm = sys.pairwise_norm();
    if pairwise_norm == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let ratio = unary_norm / pairwise_norm;
    let gap = ratio - reg_alpha;
    let penalty = reg_lambda * gap * gap;

    let d_norm_u = 2.0 * reg_lambda * gap / pairwise_norm;
    let d_norm_w = -2.0 * reg_lambda * gap * ratio / pairwise_norm;

    let inv_u = 1.0 / sys.unary().len() as f64;
    let grad_u: Vec<f64> = sys
        .unary()
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { d_norm_u * v.signum() * inv_u })
        .collect();
    let mut grad_a = sys.pairwise_norm_grad();
    for g in grad_a.data_mut() {
        *g *= d_norm_w;
    }
    Ok((penalty, grad_u, grad_a))
}
