//! Central finite differences, the independent oracle for every backward rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite difference step must be positive, got {h}")));
    }
    let base = x.data().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = base[i] - h;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), probe))?;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
