//! Reference implementations used to validate the fast paths.
//!
//! Everything here trades speed for obviousness: brute-force enumeration over
//! all labelings, dense Gaussian elimination, a plainly coded fixed-point
//! loop. Tests and the CLI self-test compare the production code against
//! these on small instances, so none of this shares code with the modules it
//! checks.

use crate::chain_crf::{score, ChainPotentials};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tensor};

/// Everything enumeration can say about a small chain instance.
pub struct ChainEnumeration {
    pub log_partition: f64,
    /// Highest-scoring labeling; among ties, the one whose reversed sequence
    /// is lexicographically smallest. That matches a backtracking decoder
    /// that fixes the last label first and prefers lower indices.
    pub best_labeling: Vec<usize>,
    pub best_score: f64,
    /// L×M matrix of exact unary marginals.
    pub unary_marginals: Tensor,
    /// L−1 slices, each M×M, of exact adjacent-pair marginals.
    pub pairwise_marginals: Vec<Tensor>,
}

/// True when `a` precedes `b` once both are read right to left.
fn reversed_lex_less(a: &[usize], b: &[usize]) -> bool {
    a.iter().rev().lt(b.iter().rev())
}

fn for_each_labeling(len: usize, labels: usize, mut visit: impl FnMut(&[usize])) {
    let mut current = vec![0usize; len];
    loop {
        visit(&current);
        let mut pos = 0;
        loop {
            if pos == len {
                return;
            }
            current[pos] += 1;
            if current[pos] < labels {
                break;
            }
            current[pos] = 0;
            pos += 1;
        }
    }
}

fn assert_enumerable(p: &ChainPotentials) {
    let states = (p.num_labels() as u128).checked_pow(p.seq_len() as u32);
    assert!(
        states.is_some_and(|s| s <= 2_000_000),
        "enumeration over {}^{} labelings is too large for an oracle",
        p.num_labels(),
        p.seq_len()
    );
}

/// Brute-force partition function, best labeling, and exact marginals.
pub fn enumerate_chain(p: &ChainPotentials) -> ChainEnumeration {
    assert_enumerable(p);
    let (len, labels) = (p.seq_len(), p.num_labels());

    let mut scores = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_labeling = vec![0usize; len];
    for_each_labeling(len, labels, |y| {
        let s = score(p, y).unwrap();
        scores.push(s);
        if s > best_score || (s == best_score && reversed_lex_less(y, &best_labeling)) {
            best_score = s;
            best_labeling = y.to_vec();
        }
    });
    let log_partition = log_sum_exp(&scores).unwrap();

    let mut unary = Tensor::zeros(&[len, labels]);
    let mut pairwise = vec![Tensor::zeros(&[labels, labels]); len - 1];
    let mut idx = 0usize;
    for_each_labeling(len, labels, |y| {
        let prob = (scores[idx] - log_partition).exp();
        idx += 1;
        for (j, &a) in y.iter().enumerate() {
            *unary.at_mut(j, a) += prob;
            if j + 1 < len {
                *pairwise[j].at_mut(a, y[j + 1]) += prob;
            }
        }
    });

    ChainEnumeration {
        log_partition,
        best_labeling,
        best_score,
        unary_marginals: unary,
        pairwise_marginals: pairwise,
    }
}

/// Brute-force maximizer of `score(y') + margin_weight · #{j : y'_j ≠ gold_j}`,
/// the search target of margin-rescaled decoding. Ties resolve like
/// `enumerate_chain`.
pub fn enumerate_augmented_best(
    p: &ChainPotentials,
    gold: &[usize],
    margin_weight: f64,
) -> (Vec<usize>, f64) {
    assert_enumerable(p);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_labeling = gold.to_vec();
    for_each_labeling(p.seq_len(), p.num_labels(), |y| {
        let mismatches = y.iter().zip(gold).filter(|(a, b)| a != b).count();
        let s = score(p, y).unwrap() + margin_weight * mismatches as f64;
        if s > best_score || (s == best_score && reversed_lex_less(y, &best_labeling)) {
            best_score = s;
            best_labeling = y.to_vec();
        }
    });
    (best_labeling, best_score)
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// `matrix` is a square dense tensor. Used to cross-check iterative solvers
/// on small systems.
pub fn solve_dense(matrix: &Tensor, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    if matrix.shape() != [n, n] {
        return Err(Error::ShapeMismatch(format!(
            "matrix shape {:?} vs rhs length {n}",
            matrix.shape()
        )));
    }
    let mut a: Vec<f64> = matrix.data().to_vec();
    let mut x = rhs.to_vec();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-300 {
            return Err(Error::ShapeMismatch("singular matrix in dense solve".into()));
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            x.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Densely materialized matrix of the Gaussian CRF quadratic form,
/// `pairwise_scale·W + λI` with `W = [[0, 𝒜𝒜ᵀ], [𝒜𝒜ᵀ, 0]]`, for
/// cross-checking the matrix-free operator on small instances.
pub fn dense_gcrf_operator(sys: &crate::gcrf::GcrfSystem, pairwise_scale: f64) -> Tensor {
    let pixels = sys.pixel_count();
    let n = 2 * pixels;
    let mut out = Tensor::zeros(&[n, n]);
    for j in 0..pixels {
        let row_j = sys.embeddings().row(j);
        for k in 0..pixels {
            let row_k = sys.embeddings().row(k);
            let entry: f64 = row_j.iter().zip(row_k).map(|(a, b)| a * b).sum();
            *out.at_mut(j, pixels + k) = pairwise_scale * entry;
            *out.at_mut(pixels + j, k) = pairwise_scale * entry;
        }
    }
    for i in 0..n {
        *out.at_mut(i, i) += sys.lambda();
    }
    out
}

/// True when the symmetric matrix admits a Cholesky factorization with
/// strictly positive pivots, which characterizes positive definiteness.
pub fn is_positive_definite(matrix: &Tensor) -> bool {
    let n = matrix.rows();
    assert_eq!(matrix.cols(), n, "PD check needs a square matrix");
    let mut chol = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = matrix.at(i, j);
            for k in 0..j {
                acc -= chol[i * n + k] * chol[j * n + k];
            }
            if i == j {
                if acc <= 0.0 {
                    return false;
                }
                chol[i * n + i] = acc.sqrt();
            } else {
                chol[i * n + j] = acc / chol[j * n + j];
            }
        }
    }
    true
}

/// Plainly coded mean-field fixed-point iteration in probability space.
///
/// Starts from row-wise softmax of the unaries and repeats sequential updates
/// until the largest per-entry change drops below `tol` or `max_iters` passes
/// have run. Returns the L×M matrix of approximate marginals.
pub fn mean_field_reference(p: &ChainPotentials, tol: f64, max_iters: usize) -> Tensor {
    let (len, labels) = (p.seq_len(), p.num_labels());
    let softmax = |row: &[f64]| -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    };

    let mut q: Vec<Vec<f64>> = (0..len).map(|j| softmax(p.unary().row(j))).collect();
    for _ in 0..max_iters {
        let mut max_change = 0.0f64;
        for j in 0..len {
            let mut logits: Vec<f64> = p.unary().row(j).to_vec();
            if j > 0 {
                for a in 0..labels {
                    for b in 0..labels {
                        logits[a] += q[j - 1][b] * p.pairwise().at(b, a);
                    }
                }
            }
            if j + 1 < len {
                for a in 0..labels {
                    for b in 0..labels {
                        logits[a] += q[j + 1][b] * p.pairwise().at(a, b);
                    }
                }
            }
            let row = softmax(&logits);
            for a in 0..labels {
                max_change = max_change.max((row[a] - q[j][a]).abs());
            }
            q[j] = row;
        }
        if max_change < tol {
            break;
        }
    }

    let mut out = Tensor::zeros(&[len, labels]);
    for j in 0..len {
        out.row_mut(j).copy_from_slice(&q[j]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_on_uniform_model() {
        let p = ChainPotentials::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).unwrap();
        let e = enumerate_chain(&p);
        assert!((e.log_partition - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(e.best_labeling, vec![0, 0]);
        assert_eq!(e.best_score, 0.0);
        for v in e.unary_marginals.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        for v in e.pairwise_marginals[0].data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_tie_break_prefers_reversed_lex_smallest() {
        // Two labelings tie at the top: force it with a unary matrix whose
        // rows are constant. Reversed-lex order minimizes the last label
        // first, so [1, 0] beats [0, 1] once [0, 0] and [1, 1] are ruled out.
        let u = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let p = ChainPotentials::new(u, w).unwrap();
        let e = enumerate_chain(&p);
        assert_eq!(e.best_labeling, vec![1, 0]);
    }

    #[test]
    fn dense_solve_roundtrip() {
        let m = Tensor::matrix(3, 3, vec![4.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 5.0]).unwrap();
        let x_true = [1.0, -2.0, 0.5];
        let mut b = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i] += m.at(i, j) * x_true[j];
            }
        }
        let x = solve_dense(&m, &b).unwrap();
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_solve_needs_pivoting() {
        // Zero in the leading position forces a row swap.
        let m = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let x = solve_dense(&m, &[3.0, 7.0]).unwrap();
        assert!((x[0] - 7.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dense_solve_rejects_singular() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(solve_dense(&m, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cg_matches_dense_solve_on_random_spd_systems() {
        use crate::numerics::{
            cg_default_max_iter, conjugate_gradient, seeded_rng, DenseOperator, RngDomain,
            CG_DEFAULT_TOL,
        };
        use rand::Rng;

        for seed in 0..10u64 {
            let n = 4 + (seed as usize % 13);
            let mut rng = seeded_rng(seed, RngDomain::Probe);
            // MᵀM + n·I is symmetric positive definite by construction.
            let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut spd = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = if i == j { n as f64 } else { 0.0 };
                    for k in 0..n {
                        acc += m[k * n + i] * m[k * n + j];
                    }
                    spd[i * n + j] = acc;
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

            let op = DenseOperator::new(n, spd.clone()).unwrap();
            let sol =
                conjugate_gradient(&op, &b, CG_DEFAULT_TOL, cg_default_max_iter(n)).unwrap();
            let direct = solve_dense(&Tensor::from_vec(vec![n, n], spd).unwrap(), &b).unwrap();
            for (x, y) in sol.x.iter().zip(&direct) {
                let rel = (x - y).abs() / y.abs().max(1.0);
                assert!(rel < 1e-8, "seed {seed}: CG vs dense solve differ by {rel:e}");
            }
        }
    }
}
