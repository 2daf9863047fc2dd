use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of `∂f/∂x` at `x`, one coordinate at a time.
///
/// `f` must return a single-element tensor.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut eval = |t: &Tensor| -> Result<f64> {
        let out = f(t)?;
        if !out.is_scalar() {
            return Err(Error::Shape(format!(
                "finite differences need a scalar function, got {:?}",
                out.shape()
            )));
        }
        Ok(out.data()[0])
    };
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for j in 0..x.numel() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[j] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[j] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}
