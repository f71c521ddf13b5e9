//! Built-in numerical self-checks: per-op gradients, the Bernstein bound,
//! RK4 convergence order and the Kronecker spectrum.

use crate::error::{Error, Result};
use crate::gconv::{integrate_steps, FnDynamics, IntegratorConfig};
use crate::graph::{
    build_operator, euclidean_adjacency, geometric_adjacency, jacobian_attention, knn, riemannian_edge_lengths2,
    MetricMode, MetricParams,
};
use crate::spectral::{apply_filter, bernstein_eval, kronecker_spectrum, normalize_coefficients, FilterSpec};
use crate::tensor::{grad_check_many, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Ops covered by the gradient suite, in report order.
pub const GRAD_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "max",
    "min",
    "gather_rows",
    "concat",
    "narrow",
    "neg",
    "exp",
    "sqrt",
    "square",
    "leaky_relu",
    "softplus",
    "spmm",
    "jacobian_attention",
    "riemannian_edge_lengths2",
    "apply_filter",
    "geometric_adjacency",
];

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
const BOUND_SLACK: f64 = 1e-9;
const KRON_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub max_error: f64,
    /// Names of failing cases.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

/// Runs every suite. `fault` names an op whose backward pass is deliberately
/// corrupted, to confirm the gradient suite catches it.
pub fn run(fault: Option<&str>) -> Result<SelftestReport> {
    if let Some(op) = fault {
        if !GRAD_OPS.contains(&op) {
            return Err(Error::Argument(format!("unknown op '{op}' (expected one of {})", GRAD_OPS.join(", "))));
        }
    }
    let suites = vec![grad_suite(fault)?, bernstein_suite()?, rk4_suite()?, kronecker_suite()?];
    Ok(SelftestReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(data, shape).expect("shape matches data")
}

/// Identity in the forward pass whose backward scales the incoming gradient.
fn corrupt(name: &'static str, y: Tensor) -> Result<Tensor> {
    Tensor::from_op(name, vec![y.clone()], y.shape().to_vec(), y.to_vec(), |_, _, g| {
        Ok(vec![Some(g.iter().map(|v| 1.5 * v + 0.1).collect())])
    })
}

fn metric_params(rng: &mut ChaCha8Rng, width: usize, d: usize, k: usize, mode: MetricMode) -> MetricParams {
    let (heads, key_dim) = (2, 3);
    MetricParams {
        w_q: rand_tensor(rng, &[width, heads * key_dim], -0.5, 0.5),
        w_k: rand_tensor(rng, &[width, heads * key_dim], -0.5, 0.5),
        w_proj: rand_tensor(rng, &[heads * k * k, d * d], -0.3, 0.3),
        alpha_raw: Tensor::scalar(-0.5).reshape(&[1]).expect("scalar reshape"),
        heads,
        key_dim,
        d,
        mode,
    }
}

/// One gradient case: inputs and the op applied to them, returning a tensor
/// that the harness contracts with fixed weights to a scalar.
fn grad_case(op: &'static str, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>)> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, 0.5, 2.0);
    let case: (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>) = match op {
        "add" => (vec![r(rng, &[3, 4]), r(rng, &[4])], Box::new(|x| x[0].add(&x[1]))),
        "sub" => (vec![r(rng, &[3, 1]), r(rng, &[3, 4])], Box::new(|x| x[0].sub(&x[1]))),
        "mul" => (vec![r(rng, &[2, 3, 4]), r(rng, &[3, 1])], Box::new(|x| x[0].mul(&x[1]))),
        "div" => (vec![r(rng, &[3, 4]), pos(rng, &[3, 4])], Box::new(|x| x[0].div(&x[1]))),
        "matmul" => (vec![r(rng, &[2, 3, 4]), r(rng, &[4, 2])], Box::new(|x| x[0].matmul(&x[1]))),
        "transpose" => (vec![r(rng, &[2, 3, 4])], Box::new(|x| x[0].transpose())),
        "reshape" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].reshape(&[2, 6]))),
        "sum" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].sum(1, true))),
        "mean" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].mean(0, false))),
        "max" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].max(1, false))),
        "min" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].min(0, false))),
        "gather_rows" => (
            vec![r(rng, &[4, 3])],
            Box::new(|x| x[0].gather_rows(&[0, 2, 2, 3, 1, 0], &[3, 2])),
        ),
        "concat" => (
            vec![r(rng, &[3, 2]), r(rng, &[3, 4])],
            Box::new(|x| Tensor::concat(&[&x[0], &x[1]], 1)),
        ),
        "narrow" => (vec![r(rng, &[3, 5])], Box::new(|x| x[0].narrow(1, 1, 3))),
        "neg" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].neg())),
        "exp" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].exp())),
        "sqrt" => (vec![pos(rng, &[3, 4])], Box::new(|x| x[0].sqrt())),
        "square" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].square())),
        "leaky_relu" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].leaky_relu(0.01))),
        "softplus" => (vec![r(rng, &[3, 4])], Box::new(|x| x[0].softplus())),
        "spmm" => {
            let pts = r(rng, &[8, 2]);
            let idx = knn(pts.data(), 2, 3)?;
            (
                vec![pos(rng, &[8, 3]), r(rng, &[8, 2])],
                Box::new(move |x| build_operator(&idx, &x[0])?.apply(&x[1])),
            )
        }
        "jacobian_attention" => {
            let (n, k, d) = (7, 3, 2);
            let m = metric_params(rng, 5, d, k, MetricMode::Symmetric);
            let x0 = r(rng, &[n, 5]);
            let idx = knn(x0.data(), 5, k)?;
            (
                vec![x0, m.w_q.clone(), m.w_k.clone(), m.w_proj.clone()],
                Box::new(move |x| {
                    let p = MetricParams {
                        w_q: x[1].clone(),
                        w_k: x[2].clone(),
                        w_proj: x[3].clone(),
                        ..m.clone()
                    };
                    jacobian_attention(&x[0], &idx, k, &p)
                }),
            )
        }
        "riemannian_edge_lengths2" => {
            let (n, k, d) = (7, 3, 2);
            let p0 = r(rng, &[n, d]);
            let idx = knn(p0.data(), d, k)?;
            (
                vec![p0, r(rng, &[n, d, d]), Tensor::new(vec![0.7], &[1])?],
                Box::new(move |x| riemannian_edge_lengths2(&x[0], &x[1], &x[2], &idx, k, MetricMode::Symmetric)),
            )
        }
        "apply_filter" => {
            let g = euclidean_adjacency(&r(rng, &[9, 2]), 3)?;
            (
                vec![r(rng, &[5]), r(rng, &[9, 2])],
                Box::new(move |x| apply_filter(&FilterSpec::new(x[0].clone())?, &g.op, &x[1])),
            )
        }
        "geometric_adjacency" => {
            let (n, k, d, dh) = (8, 3, 2, 2);
            let m = metric_params(rng, d + dh, d, k, MetricMode::Symmetric);
            (
                vec![r(rng, &[n, d]), r(rng, &[n, dh]), m.w_proj.clone()],
                Box::new(move |x| {
                    let p = MetricParams {
                        w_proj: x[2].clone(),
                        ..m.clone()
                    };
                    Ok(geometric_adjacency(&x[0], &x[1], &p, k)?.weights)
                }),
            )
        }
        other => return Err(Error::Argument(format!("no gradient case for '{other}'"))),
    };
    Ok(case)
}

/// Central-difference check of every op in [`GRAD_OPS`].
pub fn grad_suite(fault: Option<&str>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_error = 0.0f64;
    let mut failures = Vec::new();
    for &op in GRAD_OPS {
        let (inputs, f) = grad_case(op, &mut rng)?;
        let probe = f(&inputs)?;
        let weights = rand_tensor(&mut rng, probe.shape(), -1.0, 1.0);
        let inject = fault == Some(op);
        let report = grad_check_many(
            |x| {
                let mut y = f(x)?;
                if inject {
                    y = corrupt(op, y)?;
                }
                y.mul(&weights)?.sum_all()
            },
            &inputs,
            GRAD_EPS,
            GRAD_TOL,
        )?;
        max_error = max_error.max(report.max_rel_error);
        if !report.passed {
            failures.push(op.to_string());
        }
    }
    Ok(SuiteReport {
        suite: "grad-check".into(),
        passed: failures.is_empty(),
        max_error,
        failures,
    })
}

/// Normalized Bernstein filters with random raw coefficients stay in (0, 1].
pub fn bernstein_suite() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..200 {
        let order = 1 + case % 12;
        let raw = rand_tensor(&mut rng, &[order + 1], -4.0, 4.0);
        let theta = normalize_coefficients(&raw)?.to_vec();
        let mut peak = f64::NEG_INFINITY;
        for &l in &grid {
            peak = peak.max(bernstein_eval(&theta, l)?);
        }
        worst = worst.max(peak - 1.0);
        if !(peak > 0.0 && peak <= 1.0 + BOUND_SLACK) {
            failures.push(format!("case {case} (K={order}): max {peak}"));
        }
    }
    Ok(SuiteReport {
        suite: "bernstein-bound".into(),
        passed: failures.is_empty(),
        max_error: worst.max(0.0),
        failures,
    })
}

fn sym_expm_apply(a: &DMatrix<f64>, t: f64, z: &DVector<f64>) -> DVector<f64> {
    let eig = a.clone().symmetric_eigen();
    let e = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (l * t).exp()));
    &eig.eigenvectors * e * eig.eigenvectors.transpose() * z
}

/// Global RK4 error on `dz/dt = Az` falls by ≈16× per halving of `dt`.
pub fn rk4_suite() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 6;
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = (&m + m.transpose()) * 0.5;
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let exact = sym_expm_apply(&a, 1.0, &z0);
    let at = Tensor::new(a.transpose().as_slice().to_vec(), &[n, n])?;
    let mut errors = Vec::new();
    for dt in [0.1, 0.05, 0.025] {
        let cfg = IntegratorConfig {
            dt,
            t_end: 1.0,
            ..IntegratorConfig::default()
        };
        cfg.validate()?;
        let mut f = FnDynamics(|_t: f64, z: &Tensor| at.matmul(z));
        let zt = Tensor::new(z0.as_slice().to_vec(), &[n, 1])?;
        let out = integrate_steps(&mut f, &zt, &cfg, &[cfg.steps()])?;
        let got = DVector::from_column_slice(out[0].1.data());
        errors.push((got - &exact).norm());
    }
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
    let mut failures = Vec::new();
    for (i, r) in ratios.iter().enumerate() {
        if !(12.0..=20.0).contains(r) {
            failures.push(format!("halving {}: ratio {r:.3}", i + 1));
        }
    }
    Ok(SuiteReport {
        suite: "rk4-order".into(),
        passed: failures.is_empty(),
        max_error: ratios.iter().map(|r| (r - 16.0).abs()).fold(0.0, f64::max),
        failures,
    })
}

/// The predicted spectrum of the vectorized mixing operator against a dense
/// eigensolve, with `W1`, `W2` sharing an eigenbasis.
pub fn kronecker_suite() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..20 {
        let n = rng.random_range(3..=8);
        let dh = rng.random_range(1..=4);
        let g = euclidean_adjacency(&rand_tensor(&mut rng, &[n, 2], 0.0, 1.0), 2.min(n - 1))?;
        let order = rng.random_range(1..=6);
        let spec = FilterSpec::new(rand_tensor(&mut rng, &[order + 1], -2.0, 2.0))?;
        let b = apply_filter(&spec, &g.op, &Tensor::eye(n))?;
        let b = DMatrix::from_row_slice(n, n, b.data());
        let b = (&b + b.transpose()) * 0.5;
        let phi: Vec<f64> = b.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        let q = DMatrix::from_fn(dh, dh, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let mu: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vp: Vec<f64> = (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w1 = &q * DMatrix::from_diagonal(&DVector::from_vec(mu.clone())) * q.transpose();
        let w2 = &q * DMatrix::from_diagonal(&DVector::from_vec(vp.clone())) * q.transpose();
        let big = w1.transpose().kronecker(&b) - w2.transpose().kronecker(&DMatrix::identity(n, n));
        let big = (&big + big.transpose()) * 0.5;
        let mut dense: Vec<f64> = big.symmetric_eigen().eigenvalues.iter().copied().collect();
        dense.sort_by(f64::total_cmp);
        let predicted = kronecker_spectrum(&phi, &mu, &vp)?;
        let err = predicted.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        if err > KRON_TOL {
            failures.push(format!("case {case}: error {err:e}"));
        }
    }
    Ok(SuiteReport {
        suite: "kronecker-spectrum".into(),
        passed: failures.is_empty(),
        max_error: worst,
        failures,
    })
}
