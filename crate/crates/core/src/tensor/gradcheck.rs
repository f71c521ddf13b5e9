use super::Tensor;
use crate::error::{Error, Result};

/// Relative errors below this denominator are measured absolutely, so
/// vanishing gradients do not blow up the ratio.
const DENOM_FLOOR: f64 = 1e-6;

/// Comparison of reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Checks `f` at `x`; `f` must return a single-element tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps, tol)
}

/// Multi-input variant: every coordinate of every input is perturbed.
/// Gradients are reported in input order, flattened.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let params: Vec<Tensor> = xs.iter().map(|x| x.detach().requires_grad()).collect();
    let y = f(&params)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let grads = y.backward()?;
    let mut analytic = Vec::new();
    for p in &params {
        analytic.extend(grads.get_or_zeros(p));
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let base: Vec<Vec<f64>> = xs.iter().map(|x| x.to_vec()).collect();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let inputs: Vec<Tensor> = base
                    .iter()
                    .zip(xs)
                    .enumerate()
                    .map(|(j, (vals, orig))| {
                        let mut v = vals.clone();
                        if j == which {
                            v[i] += delta;
                        }
                        Tensor::new(v, orig.shape())
                    })
                    .collect::<Result<_>>()?;
                f(&inputs)?.item()
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .collect();
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol && max_rel_error.is_finite(),
    })
}
