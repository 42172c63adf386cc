use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_value(op: &str, t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "{op}: function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Largest relative error between the backward gradient of scalar `f` at `x`
/// and central differences with step `eps`.
///
/// The relative error uses `max(|a|, |b|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe = x.detach().requires_grad();
    let loss = f(&probe)?;
    scalar_value("grad_check", &loss)?;
    loss.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let mut worst: f64 = 0.0;
    no_grad(|| -> Result<()> {
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + eps;
            let up = scalar_value("grad_check", &f(&Tensor::new(x.shape(), shifted.clone())?)?)?;
            shifted[i] = base[i] - eps;
            let down = scalar_value("grad_check", &f(&Tensor::new(x.shape(), shifted)?)?)?;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
        }
        Ok(())
    })?;
    Ok(worst)
}

/// Like [`grad_check`], but perturbs the given tensors in place and checks the
/// gradient of `f()` with respect to each of them.
///
/// Gradients already stored on `params` are cleared first.
pub fn grad_check_params<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    scalar_value("grad_check_params", &loss)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    no_grad(|| -> Result<()> {
        for (p, grad) in params.iter().zip(&analytic) {
            for i in 0..p.numel() {
                let orig = p.data()[i];
                p.data_mut()[i] = orig + eps;
                let up = f().and_then(|t| scalar_value("grad_check_params", &t));
                p.data_mut()[i] = orig - eps;
                let down = f().and_then(|t| scalar_value("grad_check_params", &t));
                p.data_mut()[i] = orig;
                worst = worst.max(relative_error(grad[i], (up? - down?) / (2.0 * eps)));
            }
        }
        Ok(())
    })?;
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}
