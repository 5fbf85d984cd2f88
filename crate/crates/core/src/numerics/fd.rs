use crate::error::{Error, Result};

/// Central-difference gradient estimate of a scalar function.
///
/// Probes `f` at `x[i] +- h` for every coordinate, leaving `x` unchanged on
/// return. The step is applied to a scratch copy so `f` may assume its input
/// is exactly `x` except at one coordinate.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest relative elementwise deviation between two gradients.
///
/// Uses `|a - b| / max(|a|, |b|, floor)` so that near-zero entries are judged
/// on an absolute scale instead of blowing up the ratio.
pub fn max_rel_deviation(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
