use super::{no_grad, Tensor};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares autograd against central differences for a scalar function of a
/// single input. Returns the maximum relative error over all elements.
pub fn grad_check<F>(f: F, input: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let x = Tensor::param(input.to_vec(), shape)?;
    grad_check_params(std::slice::from_ref(&x), || f(&x), eps)
}

/// Central-difference check over every element of every tensor in
/// `params`, perturbing their values in place. `f` must rebuild its graph on
/// every call. Stored gradients on `params` are reset first.
pub fn grad_check_params<F>(params: &[Tensor<f64>], f: F, eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let _guard = no_grad();
    let mut worst = 0.0f64;
    for (p, grad) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + eps;
            let plus = f()?.item();
            p.data_mut()[i] = orig - eps;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(worst)
}
