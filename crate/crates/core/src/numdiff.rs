//! Central-difference helpers used when a map does not supply analytic derivatives.

use nalgebra::{DMatrix, DVector};

/// Relative step `scale * (1 + |x|)`.
pub fn relative_step(scale: f64, x: &DVector<f64>) -> f64 {
    scale * (1.0 + x.norm())
}

/// Central-difference Jacobian of `f` at `x` (rows = outputs).
pub fn central_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        (fp - fm) / (2.0 * h)
    })
}
