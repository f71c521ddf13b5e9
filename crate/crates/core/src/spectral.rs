//! Bernstein-polynomial graph filters, channel mixing and reference
//! spectral responses.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseOp;
use crate::tensor::Tensor;

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `C(K,k)(1−λ)^{K−k}λ^k`
pub fn bernstein_basis(k: usize, order: usize, lambda: f64) -> Result<f64> {
    if k > order {
        return Err(Error::Argument(format!("basis index {k} exceeds order {order}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda {lambda} outside [0,1]")));
    }
    Ok(binomial(order, k) * (1.0 - lambda).powi((order - k) as i32) * lambda.powi(k as i32))
}

/// `Σ_k θ_k b_k^K(λ)` with `K = θ.len() − 1`.
pub fn bernstein_eval(theta: &[f64], lambda: f64) -> Result<f64> {
    let order = theta.len().checked_sub(1).ok_or_else(|| Error::Argument("empty coefficient list".into()))?;
    theta
        .iter()
        .enumerate()
        .map(|(k, t)| Ok(t * bernstein_basis(k, order, lambda)?))
        .sum()
}

/// `2^{−K}·C(K,⌊K/2⌋)`, the largest value any single interior basis
/// function can reach.
pub fn bound_factor(order: usize) -> f64 {
    binomial(order, order / 2) / 2f64.powi(order as i32)
}

/// Positive coefficients with `max_λ B_K(λ) ≤ 1`.
///
/// Raw values go through softplus and are divided by
/// `max(2^{−K}C(K,⌊K/2⌋)·Σθ, max_k θ_k)`. The second term covers the
/// endpoint basis functions, which peak at 1 rather than at the central
/// binomial bound.
pub fn normalize_coefficients(theta_raw: &Tensor) -> Result<Tensor> {
    if theta_raw.rank() != 1 || theta_raw.numel() == 0 {
        return Err(Error::shape("normalize_coefficients", format!("expected K+1 coefficients, got {:?}", theta_raw.shape())));
    }
    let order = theta_raw.numel() - 1;
    let pos = theta_raw.softplus()?;
    let s = pos.sum_all()?.scale(bound_factor(order))?;
    let denom = Tensor::concat(&[&s, &pos], 0)?.max(0, false)?;
    pos.div(&denom)
}

#[derive(Clone, Debug)]
pub struct FilterSpec {
    /// `[K+1]` unconstrained coefficients.
    pub theta_raw: Tensor,
}

impl FilterSpec {
    pub fn new(theta_raw: Tensor) -> Result<Self> {
        if theta_raw.rank() != 1 || theta_raw.numel() == 0 {
            return Err(Error::shape("filter", format!("theta must be [K+1], got {:?}", theta_raw.shape())));
        }
        Ok(FilterSpec { theta_raw })
    }

    pub fn order(&self) -> usize {
        self.theta_raw.numel() - 1
    }

    pub fn theta(&self) -> Result<Tensor> {
        normalize_coefficients(&self.theta_raw)
    }

    /// Normalized response at `λ`.
    pub fn response(&self, lambda: f64) -> Result<f64> {
        bernstein_eval(self.theta()?.data(), lambda)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelMixer {
    pub m1_raw: Tensor,
    pub m2_raw: Tensor,
}

impl ChannelMixer {
    pub fn new(m1_raw: Tensor, m2_raw: Tensor) -> Result<Self> {
        let dh = m1_raw.shape().first().copied().unwrap_or(0);
        if m1_raw.shape() != [dh, dh] || m2_raw.shape() != [dh, dh] {
            return Err(Error::shape(
                "channel_mixer",
                format!("expected square matrices, got {:?} and {:?}", m1_raw.shape(), m2_raw.shape()),
            ));
        }
        Ok(ChannelMixer { m1_raw, m2_raw })
    }

    /// `W1 = I`, `W2 = 0`.
    pub fn identity(dh: usize) -> Self {
        ChannelMixer {
            m1_raw: Tensor::eye(dh),
            m2_raw: Tensor::zeros(&[dh, dh]),
        }
    }

    pub fn w1(&self) -> Result<Tensor> {
        symmetrize(&self.m1_raw)
    }

    pub fn w2(&self) -> Result<Tensor> {
        symmetrize(&self.m2_raw)
    }
}

fn symmetrize(m: &Tensor) -> Result<Tensor> {
    m.add(&m.transpose()?)?.scale(0.5)
}

/// `Σ_k θ_k C(K,k)(I−A)^{K−k}A^k Z` for any linear `apply(Z) = A·Z`.
///
/// Evaluated Horner-style in `(I−A)`: `r ← (I−A)r + a_j A^j Z`, which costs
/// `2K` operator applications.
pub fn apply_filter_with<F>(theta: &Tensor, apply: F, z: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let order = theta.numel().checked_sub(1).ok_or_else(|| Error::shape("apply_filter", "empty theta"))?;
    let coef = |j: usize| -> Result<Tensor> { theta.narrow(0, j, 1)?.scale(binomial(order, j)) };
    let mut power = z.clone();
    let mut acc = z.mul(&coef(0)?)?;
    for j in 1..=order {
        power = apply(&power)?;
        acc = acc.sub(&apply(&acc)?)?.add(&power.mul(&coef(j)?)?)?;
    }
    Ok(acc)
}

pub fn apply_filter(spec: &FilterSpec, op: &SparseOp, z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 || z.dim(0) != op.n() {
        return Err(Error::shape("apply_filter", format!("Z {:?} for an operator of size {}", z.shape(), op.n())));
    }
    apply_filter_with(&spec.theta()?, |v| op.apply(v), z)
}

/// `B_K(A)·Z·W1 − Z·W2`
pub fn mixing_rhs(spec: &FilterSpec, op: &SparseOp, z: &Tensor, mixer: &ChannelMixer) -> Result<Tensor> {
    let filtered = apply_filter(spec, op, z)?;
    filtered.matmul(&mixer.w1()?)?.sub(&z.matmul(&mixer.w2()?)?)
}

/// `{μ_a·φ_b − ϕ_a}` sorted ascending. `μ_a` and `ϕ_a` must be eigenvalues
/// of `W1` and `W2` on a shared eigenvector.
pub fn kronecker_spectrum(phi: &[f64], mu: &[f64], varphi: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != varphi.len() {
        return Err(Error::Argument(format!("{} mixing eigenvalues vs {} shift eigenvalues", mu.len(), varphi.len())));
    }
    let mut out: Vec<f64> = mu
        .iter()
        .zip(varphi)
        .flat_map(|(m, v)| phi.iter().map(move |p| m * p - v))
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClosedForm {
    Ppr,
    GnnLf,
    GnnHf,
    Chebyshev,
    Vanilla,
}

impl FromStr for ClosedForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppr" => Ok(ClosedForm::Ppr),
            "gnn-lf" => Ok(ClosedForm::GnnLf),
            "gnn-hf" => Ok(ClosedForm::GnnHf),
            "chebyshev" => Ok(ClosedForm::Chebyshev),
            "vanilla" => Ok(ClosedForm::Vanilla),
            other => Err(Error::Argument(format!(
                "unknown filter '{other}' (expected ppr, gnn-lf, gnn-hf, chebyshev or vanilla)"
            ))),
        }
    }
}

fn range_err(msg: String) -> Error {
    Error::Argument(msg)
}

/// Reference responses of hand-designed and learned filter families.
///
/// Parameters:
/// - `ppr`: `[θ]`, θ ∈ (0,1]
/// - `gnn-lf`: `[μ, θ1, θ2]`, θ1 ∈ [1/2,1), θ2 ∈ (0,2/3)
/// - `gnn-hf`: `[θ1, θ2]`, θ1 > 0, θ2 ∈ (0,1]
/// - `chebyshev`: `[θ_0, …, θ_K]`
/// - `vanilla`: `[θ_1, …, θ_K]`
pub fn closed_form_response(filter: ClosedForm, params: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if params.iter().any(|p| !p.is_finite()) {
        return Err(range_err("filter parameters must be finite".into()));
    }
    let want = |n: usize| -> Result<()> {
        if params.len() != n {
            return Err(range_err(format!("{filter:?} takes {n} parameters, got {}", params.len())));
        }
        Ok(())
    };
    let g: Box<dyn Fn(f64) -> f64> = match filter {
        ClosedForm::Ppr => {
            want(1)?;
            let t = params[0];
            if !(t > 0.0 && t <= 1.0) {
                return Err(range_err(format!("ppr theta {t} outside (0,1]")));
            }
            Box::new(move |l| t / (1.0 - (1.0 - t) * l))
        }
        ClosedForm::GnnLf => {
            want(3)?;
            let (mu, t1, t2) = (params[0], params[1], params[2]);
            if !(0.5..1.0).contains(&t1) || !(t2 > 0.0 && t2 < 2.0 / 3.0) {
                return Err(range_err(format!("gnn-lf needs theta1 in [1/2,1), theta2 in (0,2/3); got {t1}, {t2}")));
            }
            let (c0, c1) = (t1 + 1.0 / t2 - 1.0, 2.0 - t1 - 1.0 / t2);
            Box::new(move |l| (mu + (1.0 - t1) * l) / (c0 + c1 * l))
        }
        ClosedForm::GnnHf => {
            want(2)?;
            let (t1, t2) = (params[0], params[1]);
            if !(t1 > 0.0) || !(t2 > 0.0 && t2 <= 1.0) {
                return Err(range_err(format!("gnn-hf needs theta1 > 0, theta2 in (0,1]; got {t1}, {t2}")));
            }
            let (c0, c1) = (t1 + 1.0 / t2, 1.0 - t1 - 1.0 / t2);
            Box::new(move |l| (1.0 + t1 * (1.0 - l)) / (c0 + c1 * l))
        }
        ClosedForm::Chebyshev => {
            if params.is_empty() {
                return Err(range_err("chebyshev needs at least one coefficient".into()));
            }
            let th = params.to_vec();
            Box::new(move |l| {
                let (mut prev, mut cur) = (1.0, l);
                let mut acc = th[0];
                for (k, t) in th.iter().enumerate().skip(1) {
                    if k >= 2 {
                        let next = 2.0 * l * cur - prev;
                        prev = cur;
                        cur = next;
                    }
                    acc += t * cur;
                }
                acc
            })
        }
        ClosedForm::Vanilla => {
            if params.is_empty() {
                return Err(range_err("vanilla needs at least one coefficient".into()));
            }
            let th = params.to_vec();
            Box::new(move |l| th.iter().enumerate().map(|(i, t)| t * l.powi(i as i32 + 1)).sum())
        }
    };
    Ok(grid.iter().map(|&l| g(l)).collect())
}

/// `n` evenly spaced points covering `[0,1]`.
pub fn lambda_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Argument(format!("grid needs at least 2 points, got {n}")));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

/// Formats `x` with 9 significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..=9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

/// `lambda,response` CSV body.
pub fn response_csv(grid: &[f64], response: &[f64]) -> String {
    let mut out = String::from("lambda,response\n");
    for (l, r) in grid.iter().zip(response) {
        writeln!(out, "{},{}", sig9(*l), sig9(*r)).expect("string write");
    }
    out
}
