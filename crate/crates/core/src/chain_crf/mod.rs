//! Linear-chain CRF: exact and approximate inference plus the training
//! objectives defined on its potentials.
//!
//! A chain instance is scored by unary potentials (one row per position) and
//! a single pairwise matrix shared across all adjacent position pairs. All
//! recursions run in log space so heavily scaled potentials stay finite.

mod inference;
mod loss;

pub use inference::{
    forward_backward, map_decode, mean_field, InferenceResult, MfTrace,
};
pub use loss::{loss_ce, loss_nll, loss_ssvm, MarginalSource};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Potentials of one chain instance.
///
/// `unary` has one row per sequence position and one column per label;
/// `pairwise[a][b]` scores the transition from label `a` at position `j` to
/// label `b` at position `j + 1` and is shared across positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPotentials {
    unary: Tensor,
    pairwise: Tensor,
}

impl ChainPotentials {
    /// Validates shapes: unary is L×M with L ≥ 1 and M ≥ 2, pairwise is M×M.
    pub fn new(unary: Tensor, pairwise: Tensor) -> Result<Self> {
        if unary.shape().len() != 2 || pairwise.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected matrices, got unary shape {:?} and pairwise shape {:?}",
                unary.shape(),
                pairwise.shape()
            )));
        }
        let (len, labels) = (unary.rows(), unary.cols());
        if len < 1 || labels < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need L >= 1 and M >= 2, got L={len}, M={labels}"
            )));
        }
        if pairwise.rows() != labels || pairwise.cols() != labels {
            return Err(Error::ShapeMismatch(format!(
                "pairwise is {}x{}, expected {labels}x{labels}",
                pairwise.rows(),
                pairwise.cols()
            )));
        }
        Ok(Self { unary, pairwise })
    }

    /// Sequence length L.
    pub fn seq_len(&self) -> usize {
        self.unary.rows()
    }

    /// Label count M.
    pub fn num_labels(&self) -> usize {
        self.unary.cols()
    }

    pub fn unary(&self) -> &Tensor {
        &self.unary
    }

    pub fn pairwise(&self) -> &Tensor {
        &self.pairwise
    }

    /// Checks that `labels` pairs with these potentials: length L, every
    /// entry in `[0, M)`.
    pub fn validate_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.seq_len() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: self.seq_len(),
            });
        }
        for (pos, &label) in labels.iter().enumerate() {
            if label >= self.num_labels() {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_labels: self.num_labels(),
                    pos,
                });
            }
        }
        Ok(())
    }
}

/// Score of a labeling: Σ_j U[j, y_j] + Σ_j W[y_j, y_{j+1}].
pub fn score(p: &ChainPotentials, labels: &[usize]) -> Result<f64> {
    p.validate_labels(labels)?;
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        total += p.unary.at(j, y);
        if j + 1 < labels.len() {
            total += p.pairwise.at(y, labels[j + 1]);
        }
    }
    Ok(total)
}

/// Normalized Hamming distance: the fraction of positions where the two
/// sequences disagree.
pub fn hamming_margin(y: &[usize], y2: &[usize]) -> Result<f64> {
    if y.len() != y2.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: y2.len(),
        });
    }
    let differing = y.iter().zip(y2).filter(|(a, b)| a != b).count();
    Ok(differing as f64 / y.len() as f64)
}

#[cfg(test)]
pub(crate) fn random_potentials(seed: u64, len: usize, labels: usize) -> ChainPotentials {
    use crate::numerics::{seeded_rng, RngDomain};
    use rand::Rng;

    let mut rng = seeded_rng(seed, RngDomain::Probe);
    let unary = Tensor::from_vec(
        vec![len, labels],
        (0..len * labels).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let pairwise = Tensor::from_vec(
        vec![labels, labels],
        (0..labels * labels)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap();
    ChainPotentials::new(unary, pairwise).unwrap()
}
