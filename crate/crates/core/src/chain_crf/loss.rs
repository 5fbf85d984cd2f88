use crate::chain_crf::inference::{
    forward_backward_state, margin_augmented_decode, mean_field_trace, FbState,
};
use crate::chain_crf::{forward_backward, score, ChainPotentials};
use crate::error::Result;
use crate::numerics::Tensor;

/// Where the marginals of the cross-entropy objective come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalSource {
    /// Exact marginals from forward-backward.
    Exact,
    /// Approximate marginals from this many mean-field sweeps.
    MeanField { sweeps: usize },
}

/// Negative log-likelihood `log Z − score(p, y)` and its exact gradient.
///
/// The gradient is the usual moment difference: marginals minus the empirical
/// indicators of the observed labeling.
pub fn loss_nll(p: &ChainPotentials, y: &[usize]) -> Result<(f64, Tensor, Tensor)> {
    p.validate_labels(y)?;
    let (len, labels) = (p.seq_len(), p.num_labels());
    let inference = forward_backward(p);
    let loss = inference.log_partition - score(p, y)?;

    let mut grad_u = inference.unary_marginals;
    for (j, &label) in y.iter().enumerate() {
        *grad_u.at_mut(j, label) -= 1.0;
    }

    let mut grad_w = Tensor::zeros(&[labels, labels]);
    for slice in &inference.pairwise_marginals {
        grad_w.add_assign(slice);
    }
    for j in 0..len.saturating_sub(1) {
        *grad_w.at_mut(y[j], y[j + 1]) -= 1.0;
    }

    Ok((loss, grad_u, grad_w))
}

/// Cross-entropy on marginals: `−(1/L) Σ_j log p_j(y_j)`, with the gradient
/// obtained by replaying the producing recursion backwards.
pub fn loss_ce(
    p: &ChainPotentials,
    y: &[usize],
    source: MarginalSource,
) -> Result<(f64, Tensor, Tensor)> {
    p.validate_labels(y)?;
    match source {
        MarginalSource::Exact => Ok(loss_ce_exact(p, y)),
        MarginalSource::MeanField { sweeps } => Ok(loss_ce_mean_field(p, y, sweeps)),
    }
}

/// Reverse-mode pass through the forward-backward recursions.
///
/// The forward program computes, in order: the alpha recursion (ascending j),
/// log Z from the last alpha row, the beta recursion (descending j), and the
/// log marginals `alpha + beta − log Z`. The adjoint pass below visits those
/// four stages in reverse, so beta adjoints are consumed ascending and alpha
/// adjoints descending. Softmax weights are recomputed from the stored
/// messages instead of being cached, which keeps memory at O(L·M).
fn loss_ce_exact(p: &ChainPotentials, y: &[usize]) -> (f64, Tensor, Tensor) {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let u = p.unary();
    let w = p.pairwise();
    let state: FbState = forward_backward_state(p);
    let log_marginals = state.unary_log_marginals();

    let inv_len = 1.0 / len as f64;
    let mut loss = 0.0;
    let mut g_marginal = Tensor::zeros(&[len, labels]);
    for (j, &label) in y.iter().enumerate() {
        loss -= inv_len * log_marginals.at(j, label);
        *g_marginal.at_mut(j, label) = -inv_len;
    }

    let mut grad_u = Tensor::zeros(&[len, labels]);
    let mut grad_w = Tensor::zeros(&[labels, labels]);

    // Marginal stage: log_marginal[j][a] = alpha[j][a] + beta[j][a] − log Z.
    let mut g_alpha = g_marginal.clone();
    let mut g_beta = g_marginal.clone();
    let g_log_z: f64 = -g_marginal.data().iter().sum::<f64>();

    // log Z = log-sum-exp of the last alpha row.
    for b in 0..labels {
        *g_alpha.at_mut(len - 1, b) +=
            g_log_z * (state.log_alpha.at(len - 1, b) - state.log_z).exp();
    }

    // Beta stage, reversed: the recursion filled rows descending, so adjoints
    // drain ascending. beta[j][a] = lse_b(W[a][b] + U[j+1][b] + beta[j+1][b]).
    for j in 0..len.saturating_sub(1) {
        for a in 0..labels {
            let g = g_beta.at(j, a);
            if g == 0.0 {
                continue;
            }
            for b in 0..labels {
                let weight = (w.at(a, b) + u.at(j + 1, b) + state.log_beta.at(j + 1, b)
                    - state.log_beta.at(j, a))
                .exp();
                let c = g * weight;
                *grad_w.at_mut(a, b) += c;
                *grad_u.at_mut(j + 1, b) += c;
                *g_beta.at_mut(j + 1, b) += c;
            }
        }
    }

    // Alpha stage, reversed: rows filled ascending, adjoints drain descending.
    // alpha[j][b] = U[j][b] + lse_a(alpha[j-1][a] + W[a][b]).
    for j in (1..len).rev() {
        for b in 0..labels {
            let g = g_alpha.at(j, b);
            if g == 0.0 {
                continue;
            }
            *grad_u.at_mut(j, b) += g;
            let lse = state.log_alpha.at(j, b) - u.at(j, b);
            for a in 0..labels {
                let weight = (state.log_alpha.at(j - 1, a) + w.at(a, b) - lse).exp();
                let c = g * weight;
                *g_alpha.at_mut(j - 1, a) += c;
                *grad_w.at_mut(a, b) += c;
            }
        }
    }
    for a in 0..labels {
        *grad_u.at_mut(0, a) += g_alpha.at(0, a);
    }

    (loss, grad_u, grad_w)
}

/// Reverse-mode pass through the unrolled mean-field sweeps.
///
/// Each update overwrites one row of the running log-marginal matrix, so the
/// backward walk visits updates in reverse program order (last sweep first,
/// right to left within a sweep) and keeps one adjoint row per position for
/// whatever version of that row is current at that point of the walk.
/// Consuming an update resets its row's adjoint, because earlier program
/// points see the previous version of the row.
fn loss_ce_mean_field(p: &ChainPotentials, y: &[usize], sweeps: usize) -> (f64, Tensor, Tensor) {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let w = p.pairwise();
    let trace = mean_field_trace(p, sweeps);

    let inv_len = 1.0 / len as f64;
    let final_rows = trace.final_log_marginals();
    let mut loss = 0.0;
    let mut g_state = Tensor::zeros(&[len, labels]);
    for (j, &label) in y.iter().enumerate() {
        loss -= inv_len * final_rows.at(j, label);
        *g_state.at_mut(j, label) = -inv_len;
    }

    let mut grad_u = Tensor::zeros(&[len, labels]);
    let mut grad_w = Tensor::zeros(&[labels, labels]);
    let mut g_logits = vec![0.0; labels];

    for s in (0..trace.sweeps).rev() {
        let this_sweep = &trace.rows[s];
        let prev_sweep = if s == 0 { &trace.initial } else { &trace.rows[s - 1] };
        for j in (0..len).rev() {
            // Log-softmax backward for the row this update wrote.
            let g_row = g_state.row(j);
            let g_sum: f64 = g_row.iter().sum();
            for a in 0..labels {
                g_logits[a] = g_row[a] - g_sum * this_sweep.at(j, a).exp();
            }
            for v in g_state.row_mut(j) {
                *v = 0.0;
            }

            for a in 0..labels {
                let g = g_logits[a];
                if g == 0.0 {
                    continue;
                }
                *grad_u.at_mut(j, a) += g;
                if j > 0 {
                    // Left neighbor was already updated this sweep.
                    for b in 0..labels {
                        let q_left = this_sweep.at(j - 1, b).exp();
                        *grad_w.at_mut(b, a) += g * q_left;
                        *g_state.at_mut(j - 1, b) += g * w.at(b, a) * q_left;
                    }
                }
                if j + 1 < len {
                    // Right neighbor still carried the previous sweep's value.
                    for b in 0..labels {
                        let q_right = prev_sweep.at(j + 1, b).exp();
                        *grad_w.at_mut(a, b) += g * q_right;
                        *g_state.at_mut(j + 1, b) += g * w.at(a, b) * q_right;
                    }
                }
            }
        }
    }

    // Whatever adjoint mass is left sits on the initial rows, which are plain
    // log-softmaxes of the unaries.
    for j in 0..len {
        let g_row = g_state.row(j);
        let g_sum: f64 = g_row.iter().sum();
        for a in 0..labels {
            *grad_u.at_mut(j, a) += g_row[a] - g_sum * trace.initial.at(j, a).exp();
        }
    }

    (loss, grad_u, grad_w)
}

/// Margin-rescaled structured hinge loss with normalized Hamming margin.
///
/// `y_star` maximizes `score(p, y') + Δ(y, y')` via margin-augmented
/// decoding; the loss is that augmented score minus the gold score, and the
/// subgradient is the difference of the two labelings' indicator statistics.
pub fn loss_ssvm(p: &ChainPotentials, y: &[usize]) -> Result<(f64, Tensor, Tensor, Vec<usize>)> {
    p.validate_labels(y)?;
    let (len, labels) = (p.seq_len(), p.num_labels());
    let margin_weight = 1.0 / len as f64;
    let (y_star, augmented) = margin_augmented_decode(p, y, margin_weight);

    let mut grad_u = Tensor::zeros(&[len, labels]);
    let mut grad_w = Tensor::zeros(&[labels, labels]);
    if y_star == y {
        return Ok((0.0, grad_u, grad_w, y_star));
    }

    let loss = augmented - score(p, y)?;
    for j in 0..len {
        *grad_u.at_mut(j, y_star[j]) += 1.0;
        *grad_u.at_mut(j, y[j]) -= 1.0;
        if j + 1 < len {
            *grad_w.at_mut(y_star[j], y_star[j + 1]) += 1.0;
            *grad_w.at_mut(y[j], y[j + 1]) -= 1.0;
        }
    }
    Ok((loss, grad_u, grad_w, y_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_crf::random_potentials;
    use crate::chain_crf::{hamming_margin, map_decode};
    use crate::numerics::{finite_difference_grad, max_rel_deviation, Tensor};

    /// Packs (unary, pairwise) into one flat vector so losses can be probed
    /// by finite differences.
    fn loss_on_flat(
        template: &ChainPotentials,
        flat: &[f64],
        eval: impl Fn(&ChainPotentials) -> f64,
    ) -> f64 {
        let n_u = template.unary().len();
        let unary = Tensor::from_vec(template.unary().shape().to_vec(), flat[..n_u].to_vec()).unwrap();
        let pairwise =
            Tensor::from_vec(template.pairwise().shape().to_vec(), flat[n_u..].to_vec()).unwrap();
        eval(&ChainPotentials::new(unary, pairwise).unwrap())
    }

    fn flatten(p: &ChainPotentials) -> Vec<f64> {
        let mut flat = p.unary().data().to_vec();
        flat.extend_from_slice(p.pairwise().data());
        flat
    }

    fn check_grad_against_fd(
        p: &ChainPotentials,
        grad_u: &Tensor,
        grad_w: &Tensor,
        eval: impl Fn(&ChainPotentials) -> f64,
        tol: f64,
        context: &str,
    ) {
        let flat = flatten(p);
        let fd = finite_difference_grad(|v| loss_on_flat(p, v, &eval), &flat, 1e-5).unwrap();
        let mut analytic = grad_u.data().to_vec();
        analytic.extend_from_slice(grad_w.data());
        let dev = max_rel_deviation(&analytic, &fd, 1e-6);
        assert!(dev < tol, "{context}: gradient deviates from finite differences by {dev:e}");
    }

    #[test]
    fn nll_zero_potentials() {
        let p = ChainPotentials::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).unwrap();
        let (loss, _, _) = loss_nll(&p, &[0, 1]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_unary_grad_rows_sum_to_zero() {
        let p = random_potentials(1, 4, 3);
        let (_, grad_u, _) = loss_nll(&p, &[0, 1, 2, 1]).unwrap();
        for j in 0..4 {
            let s: f64 = grad_u.row(j).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let len = 1 + (seed % 4) as usize;
            let labels = 3;
            let p = random_potentials(seed, len, labels);
            let y: Vec<usize> = (0..len).map(|j| (j + seed as usize) % labels).collect();
            let (_, gu, gw) = loss_nll(&p, &y).unwrap();
            let y2 = y.clone();
            check_grad_against_fd(
                &p,
                &gu,
                &gw,
                move |q| loss_nll(q, &y2).map(|(l, _, _)| l).unwrap(),
                1e-5,
                &format!("nll seed {seed}"),
            );
        }
    }

    #[test]
    fn ce_zero_potentials() {
        let p = ChainPotentials::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[4, 4])).unwrap();
        let (loss, _, _) = loss_ce(&p, &[0, 3, 2], MarginalSource::Exact).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        let (loss_mf, _, _) =
            loss_ce(&p, &[0, 3, 2], MarginalSource::MeanField { sweeps: 5 }).unwrap();
        assert!((loss_mf - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_exact_gradient_matches_finite_differences() {
        for seed in 20..40u64 {
            let len = 1 + (seed % 4) as usize;
            let labels = 2 + (seed % 2) as usize;
            let p = random_potentials(seed, len, labels);
            let y: Vec<usize> = (0..len).map(|j| (j * 2 + seed as usize) % labels).collect();
            let (_, gu, gw) = loss_ce(&p, &y, MarginalSource::Exact).unwrap();
            let y2 = y.clone();
            check_grad_against_fd(
                &p,
                &gu,
                &gw,
                move |q| loss_ce(q, &y2, MarginalSource::Exact).map(|(l, _, _)| l).unwrap(),
                1e-4,
                &format!("ce exact seed {seed}"),
            );
        }
    }

    #[test]
    fn ce_mean_field_gradient_matches_finite_differences() {
        for seed in 40..60u64 {
            let len = 1 + (seed % 4) as usize;
            let labels = 2 + (seed % 2) as usize;
            let p = random_potentials(seed, len, labels);
            let y: Vec<usize> = (0..len).map(|j| (j + 3 * seed as usize) % labels).collect();
            let source = MarginalSource::MeanField { sweeps: 10 };
            let (_, gu, gw) = loss_ce(&p, &y, source).unwrap();
            let y2 = y.clone();
            check_grad_against_fd(
                &p,
                &gu,
                &gw,
                move |q| loss_ce(q, &y2, source).map(|(l, _, _)| l).unwrap(),
                1e-4,
                &format!("ce mean-field seed {seed}"),
            );
        }
    }

    #[test]
    fn ce_mean_field_factorized_unary_grad_is_softmax_ce() {
        // With a zero pairwise matrix the marginals factorize, so the loss
        // and the unary gradient reduce to averaged per-position softmax
        // cross-entropy. The pairwise gradient does not vanish: first-order
        // changes of W still enter every update through the neighbor terms,
        // and finite differences confirm the nonzero value.
        let p = random_potentials(60, 3, 2);
        let zero_w = ChainPotentials::new(p.unary().clone(), Tensor::zeros(&[2, 2])).unwrap();
        let y = [1, 0, 1];
        let source = MarginalSource::MeanField { sweeps: 10 };
        let (loss, gu, gw) = loss_ce(&zero_w, &y, source).unwrap();

        let exact = forward_backward(&zero_w);
        let mut expected_loss = 0.0;
        for (j, &label) in y.iter().enumerate() {
            expected_loss -= exact.unary_marginals.at(j, label).ln() / 3.0;
            for a in 0..2 {
                let indicator = if a == label { 1.0 } else { 0.0 };
                let expected = (exact.unary_marginals.at(j, a) - indicator) / 3.0;
                assert!((gu.at(j, a) - expected).abs() < 1e-12);
            }
        }
        assert!((loss - expected_loss).abs() < 1e-12);

        let y2 = y;
        check_grad_against_fd(
            &zero_w,
            &gu,
            &gw,
            move |q| loss_ce(q, &y2, source).map(|(l, _, _)| l).unwrap(),
            1e-4,
            "ce mean-field with zero pairwise",
        );
    }

    #[test]
    fn ssvm_zero_potentials() {
        let p = ChainPotentials::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 2])).unwrap();
        let (loss, _, _, y_star) = loss_ssvm(&p, &[0, 0, 0]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert_eq!(y_star, vec![1, 1, 1]);
    }

    #[test]
    fn ssvm_satisfied_margin_gives_zero_loss() {
        // Unaries strongly favor the gold labeling, and the margin is at most
        // one, so no competitor comes close.
        let mut u = Tensor::zeros(&[3, 2]);
        let y = [1, 0, 1];
        for (j, &label) in y.iter().enumerate() {
            *u.at_mut(j, label) = 10.0;
        }
        let p = ChainPotentials::new(u, Tensor::zeros(&[2, 2])).unwrap();
        let (loss, gu, gw, y_star) = loss_ssvm(&p, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(y_star, y.to_vec());
        assert!(gu.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssvm_decode_matches_enumeration() {
        for seed in 70..90u64 {
            let len = 1 + (seed % 5) as usize;
            let labels = 2 + (seed % 2) as usize;
            let p = random_potentials(seed, len, labels);
            let y: Vec<usize> = (0..len).map(|j| (j + seed as usize) % labels).collect();
            let (loss, _, _, y_star) = loss_ssvm(&p, &y).unwrap();
            let (expected, _) =
                crate::check::enumerate_augmented_best(&p, &y, 1.0 / len as f64);
            assert_eq!(y_star, expected, "seed {seed}");
            assert!(loss >= 0.0);
            assert_eq!(loss == 0.0, y_star == y);
        }
    }

    #[test]
    fn ssvm_loss_bounds_margin() {
        // The hinge upper-bounds the task loss of the decoder's prediction.
        for seed in 90..100u64 {
            let p = random_potentials(seed, 4, 3);
            let y = [0, 1, 2, 0];
            let (loss, _, _, _) = loss_ssvm(&p, &y).unwrap();
            let (decoded, _) = map_decode(&p);
            assert!(loss + 1e-12 >= hamming_margin(&y, &decoded).unwrap());
        }
    }
}
