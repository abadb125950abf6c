//! Central finite-difference utilities for validating adjoints.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function, one element at a time.
pub fn fd_gradient(mut f: impl FnMut(&ArrayD<f64>) -> f64, x0: &ArrayD<f64>, step: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let orig = x.as_slice().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Central-difference gradient restricted to a coordinate subset.
pub fn fd_gradient_subset(
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
    x0: &ArrayD<f64>,
    step: f64,
    indices: &[usize],
) -> Vec<f64> {
    let mut x = x0.clone();
    indices
        .iter()
        .map(|&idx| {
            let orig = x.as_slice().unwrap()[idx];
            x.as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Norm-based relative error between two gradient vectors:
/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
