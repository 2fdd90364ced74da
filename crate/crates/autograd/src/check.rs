//! Central finite differences for gradient checks.

use crate::graph::Array;

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_grad(x: &Array, h: f64, mut f: impl FnMut(&Array) -> f64) -> Array {
    let mut grad = Array::zeros(x.raw_dim());
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.as_slice().expect("standard layout")[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    grad
}

/// `max |a - b| / max(max |b|, floor)`: relative error scaled by the
/// reference magnitude.
pub fn relative_error(analytic: &Array, numeric: &Array, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = numeric
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(floor);
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}
