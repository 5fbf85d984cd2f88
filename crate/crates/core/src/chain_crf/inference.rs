use crate::chain_crf::ChainPotentials;
use crate::numerics::{log_softmax_in_place, log_sum_exp, Tensor};

/// Exact inference output for one chain instance.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// log Z, the log of the sum of exponentiated scores over all labelings.
    pub log_partition: f64,
    /// L×M matrix of per-position label probabilities.
    pub unary_marginals: Tensor,
    /// L−1 slices, each M×M, of adjacent-pair probabilities.
    pub pairwise_marginals: Vec<Tensor>,
}

/// Forward and backward log messages, kept for gradient work.
pub(crate) struct FbState {
    /// log_alpha[j][b]: log of the summed exponentiated scores of all prefixes
    /// ending at position j with label b.
    pub log_alpha: Tensor,
    /// log_beta[j][a]: same for suffixes starting after position j given
    /// label a at j; the last row is zero.
    pub log_beta: Tensor,
    pub log_z: f64,
}

pub(crate) fn forward_backward_state(p: &ChainPotentials) -> FbState {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let u = p.unary();
    let w = p.pairwise();

    let mut log_alpha = Tensor::zeros(&[len, labels]);
    log_alpha.row_mut(0).copy_from_slice(u.row(0));
    let mut terms = vec![0.0; labels];
    for j in 1..len {
        for b in 0..labels {
            for a in 0..labels {
                terms[a] = log_alpha.at(j - 1, a) + w.at(a, b);
            }
            *log_alpha.at_mut(j, b) = u.at(j, b) + log_sum_exp(&terms).unwrap();
        }
    }
    let log_z = log_sum_exp(log_alpha.row(len - 1)).unwrap();

    let mut log_beta = Tensor::zeros(&[len, labels]);
    for j in (0..len - 1).rev() {
        for a in 0..labels {
            for b in 0..labels {
                terms[b] = w.at(a, b) + u.at(j + 1, b) + log_beta.at(j + 1, b);
            }
            *log_beta.at_mut(j, a) = log_sum_exp(&terms).unwrap();
        }
    }

    FbState {
        log_alpha,
        log_beta,
        log_z,
    }
}

impl FbState {
    /// L×M matrix of log marginals, each row summing to one after
    /// exponentiation.
    pub(crate) fn unary_log_marginals(&self) -> Tensor {
        let mut out = self.log_alpha.clone();
        for (v, b) in out.data_mut().iter_mut().zip(self.log_beta.data()) {
            *v += b - self.log_z;
        }
        out
    }
}

/// Exact log partition and exact unary and pairwise marginals, computed by
/// log-space forward and backward recursions in O(L·M²).
pub fn forward_backward(p: &ChainPotentials) -> InferenceResult {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let state = forward_backward_state(p);

    let mut unary = state.unary_log_marginals();
    for v in unary.data_mut() {
        *v = v.exp();
    }

    let u = p.unary();
    let w = p.pairwise();
    let mut pairwise = Vec::with_capacity(len.saturating_sub(1));
    for j in 0..len.saturating_sub(1) {
        let mut slice = Tensor::zeros(&[labels, labels]);
        for a in 0..labels {
            for b in 0..labels {
                let log_p = state.log_alpha.at(j, a)
                    + w.at(a, b)
                    + u.at(j + 1, b)
                    + state.log_beta.at(j + 1, b)
                    - state.log_z;
                *slice.at_mut(a, b) = log_p.exp();
            }
        }
        pairwise.push(slice);
    }

    InferenceResult {
        log_partition: state.log_z,
        unary_marginals: unary,
        pairwise_marginals: pairwise,
    }
}

/// Max-sum decoding over unaries with an optional per-position bonus added
/// on top. Ties prefer the smallest label index at every backtracking step,
/// which makes the result the maximizer whose reversed label sequence is
/// lexicographically smallest.
fn viterbi(p: &ChainPotentials, bonus: Option<&Tensor>) -> (Vec<usize>, f64) {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let w = p.pairwise();
    let unary_at = |j: usize, a: usize| -> f64 {
        p.unary().at(j, a) + bonus.map_or(0.0, |t| t.at(j, a))
    };

    let mut delta = Tensor::zeros(&[len, labels]);
    let mut argmax_prev = vec![vec![0usize; labels]; len];
    for b in 0..labels {
        *delta.at_mut(0, b) = unary_at(0, b);
    }
    for j in 1..len {
        for b in 0..labels {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..labels {
                let cand = delta.at(j - 1, a) + w.at(a, b);
                if cand > best {
                    best = cand;
                    best_a = a;
                }
            }
            *delta.at_mut(j, b) = unary_at(j, b) + best;
            argmax_prev[j][b] = best_a;
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (b, &v) in delta.row(len - 1).iter().enumerate() {
        if v > best {
            best = v;
            last = b;
        }
    }

    let mut labels_out = vec![0usize; len];
    labels_out[len - 1] = last;
    for j in (0..len - 1).rev() {
        labels_out[j] = argmax_prev[j + 1][labels_out[j + 1]];
    }
    (labels_out, best)
}

/// Highest-scoring labeling and its score.
pub fn map_decode(p: &ChainPotentials) -> (Vec<usize>, f64) {
    viterbi(p, None)
}

/// Maximizer of `score(y') + margin_weight · #{j : y'_j ≠ gold_j}` and its
/// augmented score. The margin decomposes per position, so it rides along as
/// a unary bonus on every non-gold label.
pub(crate) fn margin_augmented_decode(
    p: &ChainPotentials,
    gold: &[usize],
    margin_weight: f64,
) -> (Vec<usize>, f64) {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let mut bonus = Tensor::zeros(&[len, labels]);
    for (j, &g) in gold.iter().enumerate() {
        for a in 0..labels {
            if a != g {
                *bonus.at_mut(j, a) = margin_weight;
            }
        }
    }
    viterbi(p, Some(&bonus))
}

/// Record of one unrolled mean-field run, enough to replay it backwards.
///
/// `initial` holds the row-wise log-softmax of the unaries; `rows[s][j]` holds
/// the log marginals of position j right after its update in sweep s. Updates
/// run left to right and read the left neighbor's current-sweep value and the
/// right neighbor's previous-sweep value.
pub struct MfTrace {
    pub(crate) initial: Tensor,
    pub(crate) rows: Vec<Tensor>,
    pub(crate) sweeps: usize,
}

impl MfTrace {
    /// L×M log marginals after the final sweep.
    pub fn final_log_marginals(&self) -> &Tensor {
        self.rows.last().unwrap_or(&self.initial)
    }
}

pub(crate) fn mean_field_trace(p: &ChainPotentials, sweeps: usize) -> MfTrace {
    assert!(sweeps >= 1, "mean field needs at least one sweep");
    let (len, labels) = (p.seq_len(), p.num_labels());
    let u = p.unary();
    let w = p.pairwise();

    let mut initial = u.clone();
    for j in 0..len {
        log_softmax_in_place(initial.row_mut(j));
    }

    let mut state = initial.clone();
    let mut rows = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        let prev_sweep = rows.last().unwrap_or(&initial).clone();
        for j in 0..len {
            let mut logits: Vec<f64> = u.row(j).to_vec();
            if j > 0 {
                for b in 0..labels {
                    let q_left = state.at(j - 1, b).exp();
                    for a in 0..labels {
                        logits[a] += q_left * w.at(b, a);
                    }
                }
            }
            if j + 1 < len {
                for b in 0..labels {
                    let q_right = prev_sweep.at(j + 1, b).exp();
                    for a in 0..labels {
                        logits[a] += q_right * w.at(a, b);
                    }
                }
            }
            log_softmax_in_place(&mut logits);
            state.row_mut(j).copy_from_slice(&logits);
        }
        rows.push(state.clone());
    }

    MfTrace {
        initial,
        rows,
        sweeps,
    }
}

/// Approximate marginals from `sweeps` sequential left-to-right update
/// passes, starting from the row-wise softmax of the unaries. Missing
/// neighbors at the chain ends contribute nothing.
pub fn mean_field(p: &ChainPotentials, sweeps: usize) -> Tensor {
    let trace = mean_field_trace(p, sweeps);
    let mut out = trace.final_log_marginals().clone();
    for v in out.data_mut() {
        *v = v.exp();
    }
    out
}
