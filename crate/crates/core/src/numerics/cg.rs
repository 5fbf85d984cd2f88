use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, LinearOperator};

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    /// Approximate solution of `A x = b`.
    pub x: Vec<f64>,
    /// Relative residual `||b - A x|| / max(||b||, eps)` at the returned
    /// iterate, recomputed from a fresh operator application.
    pub residual: f64,
    /// Number of iterations performed.
    pub iters: usize,
}

/// Solves `A x = b` for a symmetric positive definite operator.
///
/// Iterates until the relative residual drops below `tol` or `max_iter`
/// applications have been spent. The recurrence residual drifts from the true
/// one in long runs, so convergence is confirmed against a recomputed
/// `b - A x` before returning; if the check fails the iteration continues.
/// Returns the best iterate seen when the budget runs out.
pub fn conjugate_gradient<Op: LinearOperator + ?Sized>(
    op: &Op,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution> {
    let n = op.dim();
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "operator dim {n} vs rhs length {}",
            b.len()
        )));
    }
    let b_norm = norm2(b).max(1e-30);

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs = dot(&r, &r);

    let true_residual = |x: &[f64], scratch: &mut Vec<f64>| -> f64 {
        op.apply(x, scratch);
        let mut s = 0.0;
        for i in 0..n {
            let d = b[i] - scratch[i];
            s += d * d;
        }
        s.sqrt() / b_norm
    };

    let mut scratch = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_res = true_residual(&x, &mut scratch);
    if best_res <= tol {
        return Ok(CgSolution {
            x: best_x,
            residual: best_res,
            iters: 0,
        });
    }

    for iter in 1..=max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::CgDivergence { iter });
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::CgDivergence { iter });
        }

        if rs_new.sqrt() / b_norm <= tol {
            let res = true_residual(&x, &mut scratch);
            if res < best_res {
                best_res = res;
                best_x.copy_from_slice(&x);
            }
            if res <= tol {
                return Ok(CgSolution {
                    x,
                    residual: res,
                    iters: iter,
                });
            }
            // Recurrence residual lied; restart from the current iterate.
            op.apply(&x, &mut scratch);
            for i in 0..n {
                r[i] = b[i] - scratch[i];
            }
            let rs_true = dot(&r, &r);
            p.copy_from_slice(&r);
            rs = rs_true;
            continue;
        }

        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }

    let final_res = true_residual(&x, &mut scratch);
    if final_res < best_res {
        best_res = final_res;
        best_x.copy_from_slice(&x);
    }
    Ok(CgSolution {
        x: best_x,
        residual: best_res,
        iters: max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseOperator;

    #[test]
    fn solves_identity() {
        let op = DenseOperator::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let sol = conjugate_gradient(&op, &[1.0, -2.0, 3.0], 1e-12, 30).unwrap();
        assert!(sol.residual <= 1e-12);
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.x[1] + 2.0).abs() < 1e-12);
        assert!((sol.x[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solves_spd_system() {
        // A = [[4, 1], [1, 3]], b = [1, 2], x = [1/11, 7/11].
        let op = DenseOperator::new(2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let sol = conjugate_gradient(&op, &[1.0, 2.0], 1e-12, 20).unwrap();
        assert!((sol.x[0] - 1.0 / 11.0).abs() < 1e-10);
        assert!((sol.x[1] - 7.0 / 11.0).abs() < 1e-10);
    }

    #[test]
    fn zero_rhs_converges_immediately() {
        let op = DenseOperator::new(2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let sol = conjugate_gradient(&op, &[0.0, 0.0], 1e-10, 10).unwrap();
        assert_eq!(sol.iters, 0);
        assert_eq!(sol.x, vec![0.0, 0.0]);
    }

    #[test]
    fn indefinite_operator_errors() {
        let op = DenseOperator::new(2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let err = conjugate_gradient(&op, &[0.0, 1.0], 1e-10, 10).unwrap_err();
        assert!(matches!(err, Error::CgDivergence { .. }));
    }

    #[test]
    fn budget_exhaustion_returns_best_iterate() {
        // Ill-conditioned diagonal system with a budget too small to converge.
        let mut entries = vec![0.0; 16];
        for i in 0..4 {
            entries[i * 4 + i] = 10f64.powi(i as i32 * 3);
        }
        let op = DenseOperator::new(4, entries).unwrap();
        let sol = conjugate_gradient(&op, &[1.0, 1.0, 1.0, 1.0], 1e-14, 1).unwrap();
        assert_eq!(sol.iters, 1);
        assert!(sol.residual.is_finite());
    }
}
