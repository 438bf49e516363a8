use ndarray::{Array2, ArrayView2};

use super::mlp::Mlp;
use crate::error::{OdpError, Result};

/// Largest relative disagreement between backprop and central differences
/// for the scalar loss `Σ outputs`, over every parameter:
/// `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check(net: &Mlp, inputs: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(OdpError::invalid("finite-difference epsilon must be > 0"));
    }
    let cache = net.forward_cached(inputs)?;
    let ones = Array2::ones(cache.output().raw_dim());
    let (grads, _) = net.backward(&cache, ones.view())?;
    let analytic = grads.flatten();

    let loss = |n: &Mlp| -> Result<f64> { Ok(n.forward(inputs)?.sum()) };
    let mut probe = net.clone();
    let mut flat = net.flat_params();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + epsilon;
        probe.set_flat_params(&flat)?;
        let up = loss(&probe)?;
        flat[i] = orig - epsilon;
        probe.set_flat_params(&flat)?;
        let down = loss(&probe)?;
        flat[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
