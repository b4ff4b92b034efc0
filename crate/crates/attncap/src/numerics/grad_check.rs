use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Central-difference gradient of a scalar function, per coordinate.
/// The oracle against which every differentiable primitive is checked.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst-case relative disagreement between two gradients. Tiny entries
/// compare against a floor so noise around zero does not blow up the
/// ratio.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes must agree");
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
