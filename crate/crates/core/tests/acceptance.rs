//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! `cargo test -p gdflow --test acceptance`

use gdflow::cli::{cmd_denoise, save_cloud, DenoiseArgs};
use gdflow::gconv::{integrate_steps, FnDynamics, IntegratorConfig};
use gdflow::graph::{build_operator, euclidean_adjacency, knn, riemannian_distance, LocalMetric, MetricMode};
use gdflow::metrics::{chamfer, emd_matching, hausdorff, rmsd, supervised_loss};
use gdflow::model::{forward_tensor, forward_variant, save_checkpoint, ModelConfig, ModelParams, Variant};
use gdflow::pointcloud::{add_noise, synth, NoiseSpec, PointCloud, Shape};
use gdflow::spectral::{apply_filter, bernstein_basis, bernstein_eval, kronecker_spectrum, normalize_coefficients, FilterSpec};
use gdflow::tensor::{grad_check_many, Tensor};
use gdflow::train::{train, LossMode, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Direct Bernstein sum, independent of the library's evaluator.
fn bernstein_direct(theta: &[f64], l: f64) -> f64 {
    let k = theta.len() - 1;
    theta
        .iter()
        .enumerate()
        .map(|(j, t)| t * binom(k, j) * l.powi(j as i32) * (1.0 - l).powi((k - j) as i32))
        .sum()
}

fn grid_1e3() -> Vec<f64> {
    (0..=1000).map(|i| i as f64 / 1000.0).collect()
}

fn random_cloud(r: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [r.random(), r.random(), r.random()]).collect()).unwrap()
}

fn sym_eig(m: &DMatrix<f64>) -> nalgebra::SymmetricEigen<f64, nalgebra::Dyn> {
    ((m + m.transpose()) * 0.5).symmetric_eigen()
}

fn c1_bernstein_bound() -> Outcome {
    let mut r = rng(1);
    let grid = grid_1e3();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for case in 0..200 {
        let k = 1 + case % 12;
        let raw = Tensor::new(rand_vec(&mut r, k + 1, -5.0, 5.0), &[k + 1]).unwrap();
        let theta = normalize_coefficients(&raw).unwrap().to_vec();
        let peak = grid.iter().map(|l| bernstein_direct(&theta, *l)).fold(f64::NEG_INFINITY, f64::max);
        lo = lo.min(peak);
        hi = hi.max(peak);
    }
    outcome(lo > 0.0 && hi <= 1.0 + 1e-9, format!("grid maxima in [{lo:.6}, {hi:.12}]"))
}

fn c2_approximation_rate() -> Outcome {
    let grid = grid_1e3();
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [5usize, 25] {
        let theta: Vec<f64> = (0..=k).map(|j| (j as f64 / k as f64).powi(2)).collect();
        let err = grid
            .iter()
            .map(|l| (bernstein_eval(&theta, *l).unwrap() - l * l).abs())
            .fold(0.0, f64::max);
        let want = 1.0 / (4.0 * k as f64);
        ok &= (err - want).abs() <= 1e-9;
        parts.push(format!("K={k}: max error {err:.12} vs 1/(4K) {want:.12}"));
    }
    outcome(ok, parts.join("; "))
}

fn c3_argmax() -> Outcome {
    let k = 10;
    let grid = grid_1e3();
    let step = 1e-3;
    let mut worst = 0.0f64;
    for j in 0..=k {
        let vals: Vec<f64> = grid.iter().map(|l| bernstein_basis(j, k, *l).unwrap()).collect();
        let arg = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
        worst = worst.max((grid[arg] - j as f64 / k as f64).abs());
    }
    outcome(worst <= step + 1e-12, format!("max |argmax − k/K| = {worst:.2e}"))
}

fn c4_filter_equivalence() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(4..=32);
        let k = r.random_range(2..=6.min(n - 1));
        let pts = Tensor::new(rand_vec(&mut r, n * 3, 0.0, 1.0), &[n, 3]).unwrap();
        let g = euclidean_adjacency(&pts, k).unwrap();
        let order = r.random_range(1..=8);
        let spec = FilterSpec::new(Tensor::new(rand_vec(&mut r, order + 1, -2.0, 2.0), &[order + 1]).unwrap()).unwrap();
        let theta = spec.theta().unwrap().to_vec();
        let z = Tensor::new(rand_vec(&mut r, n * 3, -1.0, 1.0), &[n, 3]).unwrap();
        let got = apply_filter(&spec, &g.op, &z).unwrap();

        let eig = sym_eig(&DMatrix::from_row_slice(n, n, &g.op.to_dense()));
        let resp = eig.eigenvalues.map(|l| bernstein_direct(&theta, l));
        let b = &eig.eigenvectors * DMatrix::from_diagonal(&resp) * eig.eigenvectors.transpose();
        let want = b * DMatrix::from_row_slice(n, 3, z.data());
        for i in 0..n {
            for c in 0..3 {
                worst = worst.max((got.data()[i * 3 + c] - want[(i, c)]).abs());
            }
        }
    }
    outcome(worst <= 1e-10, format!("max |polynomial − spectral| = {worst:.2e}"))
}

fn c5_kronecker() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(2..=8);
        let dh = r.random_range(1..=4);
        let pts = Tensor::new(rand_vec(&mut r, n * 3, 0.0, 1.0), &[n, 3]).unwrap();
        let g = euclidean_adjacency(&pts, 1.max((n - 1).min(3))).unwrap();
        let order = r.random_range(1..=6);
        let spec = FilterSpec::new(Tensor::new(rand_vec(&mut r, order + 1, -2.0, 2.0), &[order + 1]).unwrap()).unwrap();
        let b = apply_filter(&spec, &g.op, &Tensor::eye(n)).unwrap();
        let b = DMatrix::from_row_slice(n, n, b.data());
        let phi: Vec<f64> = sym_eig(&b).eigenvalues.iter().copied().collect();
        let q = DMatrix::from_fn(dh, dh, |_, _| r.random_range(-1.0..1.0)).qr().q();
        let mu = rand_vec(&mut r, dh, -1.0, 1.0);
        let vp = rand_vec(&mut r, dh, -1.0, 1.0);
        let w1 = &q * DMatrix::from_diagonal(&DVector::from_vec(mu.clone())) * q.transpose();
        let w2 = &q * DMatrix::from_diagonal(&DVector::from_vec(vp.clone())) * q.transpose();
        let big = w1.transpose().kronecker(&b) - w2.transpose().kronecker(&DMatrix::identity(n, n));
        let mut dense: Vec<f64> = sym_eig(&big).eigenvalues.iter().copied().collect();
        dense.sort_by(f64::total_cmp);
        let pred = kronecker_spectrum(&phi, &mu, &vp).unwrap();
        for (a, b) in pred.iter().zip(&dense) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-8, format!("max eigenvalue mismatch {worst:.2e}"))
}

fn c6_rk4_order() -> Outcome {
    let mut r = rng(6);
    let mut ratios = Vec::new();
    for _ in 0..5 {
        let n = r.random_range(2..=8);
        let m = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let a = (&m + m.transpose()) * 0.5;
        let z0 = DVector::from_vec(rand_vec(&mut r, n, -1.0, 1.0));
        let eig = a.clone().symmetric_eigen();
        let exact = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp)) * eig.eigenvectors.transpose() * &z0;
        let at = Tensor::new(a.as_slice().to_vec(), &[n, n]).unwrap();
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| {
                let cfg = IntegratorConfig {
                    dt,
                    t_end: 1.0,
                    ..IntegratorConfig::default()
                };
                let mut f = FnDynamics(|_t: f64, z: &Tensor| at.matmul(z));
                let z = Tensor::new(z0.as_slice().to_vec(), &[n, 1]).unwrap();
                let out = integrate_steps(&mut f, &z, &cfg, &[cfg.steps()]).unwrap();
                (DVector::from_column_slice(out[0].1.data()) - &exact).norm()
            })
            .collect();
        ratios.push(errs[0] / errs[1]);
        ratios.push(errs[1] / errs[2]);
    }
    let ok = ratios.iter().all(|q| (12.0..=20.0).contains(q));
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    outcome(ok, format!("{} halving ratios in [{lo:.3}, {hi:.3}]", ratios.len()))
}

fn c7_gradients() -> Outcome {
    let cfg = ModelConfig {
        d: 2,
        d_h: 4,
        order: 3,
        k: 4,
        heads: 2,
        key_dim: 2,
        lift_hidden: 8,
        integrator: IntegratorConfig {
            dt: 0.1,
            t_end: 0.2,
            ..IntegratorConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut r = rng(7);
    let init = ModelParams::init(&cfg, 7).unwrap();
    // a non-zero readout so every upstream parameter receives gradient
    let xs: Vec<Tensor> = init
        .named()
        .into_iter()
        .map(|(name, t)| {
            if name.starts_with("head.") {
                Tensor::new(rand_vec(&mut r, t.numel(), -0.3, 0.3), t.shape()).unwrap()
            } else {
                t
            }
        })
        .collect();
    let noisy = random_cloud(&mut r, 16).to_tensor();
    let clean = random_cloud(&mut r, 16).to_tensor();
    let rep = grad_check_many(
        |xs| {
            let p = init.with_tensors(xs.to_vec())?;
            supervised_loss(&forward_tensor(&p, &cfg, Variant::Full, &noisy)?, &clean)
        },
        &xs,
        1e-5,
        1e-4,
    )
    .unwrap();
    outcome(
        rep.passed,
        format!("{} parameters, max relative error {:.2e}", rep.analytic.len(), rep.max_rel_error),
    )
}

fn brute_nn2(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points()
        .iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            for q in b.points() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                best = best.min(d);
            }
            best
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let mut out = vec![a.clone()];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

fn c8_metrics() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = random_cloud(&mut r, 64);
        let b = random_cloud(&mut r, 64);
        let ab = brute_nn2(&a, &b);
        let ba = brute_nn2(&b, &a);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let cd = mean(&ab) + mean(&ba);
        let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max).sqrt();
        let rm = mean(&ab).sqrt();
        worst = worst
            .max((chamfer(&a, &b).unwrap() - cd).abs())
            .max((hausdorff(&a, &b).unwrap() - hd).abs())
            .max((rmsd(&a, &b).unwrap() - rm).abs());
    }
    let perms = permutations(8);
    let mut mismatches = 0;
    for _ in 0..50 {
        let a = random_cloud(&mut r, 8);
        let b = random_cloud(&mut r, 8);
        let cost = |i: usize, j: usize| {
            let (p, q) = (a.points()[i], b.points()[j]);
            let (x, y, z) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
            x * x + y * y + z * z
        };
        let best = perms
            .iter()
            .map(|pm| pm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / 8.0)
            .fold(f64::INFINITY, f64::min);
        let m = emd_matching(&a, &b).unwrap();
        if m.cost != best || !m.exact {
            mismatches += 1;
        }
    }
    outcome(
        worst <= 1e-12 && mismatches == 0 && perms.len() == 40320,
        format!("CD/HD/RMSD max deviation {worst:.2e}; EMD vs 8! enumeration: {mismatches}/50 mismatches"),
    )
}

fn c9_domination() -> Outcome {
    let mut r = rng(9);
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..10_000 {
        let d = r.random_range(1..=6);
        let scale = 10f64.powf(r.random_range(-6.0..3.0));
        let pi = rand_vec(&mut r, d, -scale, scale);
        let pj = rand_vec(&mut r, d, -scale, scale);
        let metric = |r: &mut ChaCha8Rng| LocalMetric {
            d,
            j: rand_vec(r, d * d, -3.0, 3.0),
            alpha: r.random_range(0.0..2.0),
        };
        let (gi, gj) = (metric(&mut r), metric(&mut r));
        let l = riemannian_distance(&pi, &pj, &gi, &gj).unwrap();
        let e = pi.iter().zip(&pj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if l < e {
            violations += 1;
        }
        min_gap = min_gap.min(l - e);
    }
    outcome(violations == 0, format!("{violations} violations in 10000 samples, min(ℓ − d) = {min_gap:.3e}"))
}

fn c10_operator_spectrum() -> Outcome {
    let mut r = rng(10);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..50 {
        let n = r.random_range(2..=64);
        let k = r.random_range(1..=8.min(n - 1));
        let pts = rand_vec(&mut r, n * 3, 0.0, 1.0);
        let idx = knn(&pts, 3, k).unwrap();
        let w = Tensor::new(rand_vec(&mut r, n * k, 1e-3, 1.0), &[n, k]).unwrap();
        let op = build_operator(&idx, &w).unwrap();
        let dense = DMatrix::from_row_slice(n, n, &op.to_dense());
        for v in sym_eig(&dense).eigenvalues.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    outcome(lo >= -1e-10 && hi <= 1.0 + 1e-10, format!("eigenvalues in [{lo:.3e}, {hi:.12}]"))
}

/// Model and training settings shared by the smoke and ablation runs.
fn smoke_model() -> ModelConfig {
    ModelConfig {
        d: 4,
        d_h: 16,
        order: 3,
        k: 16,
        heads: 1,
        key_dim: 4,
        lift_hidden: 16,
        metric_mode: MetricMode::Symmetric,
        variant: Variant::Full,
        integrator: IntegratorConfig {
            dt: 0.2,
            ..IntegratorConfig::default()
        },
    }
}

fn smoke_train(mode: LossMode) -> TrainConfig {
    TrainConfig {
        iterations: 200,
        batch_size: 4,
        patch_size: 1024,
        sigma_range: [0.02, 0.02],
        val_sigma: 0.02,
        lr_init: 2e-2,
        val_every: 10,
        plateau_patience: 2,
        loss_mode: mode,
        seed: 0,
        ..TrainConfig::default()
    }
}

struct SmokeData {
    train: Vec<PointCloud>,
    val: Vec<PointCloud>,
    /// Held-out (noisy, clean) pairs, disjoint from training and validation.
    test: Vec<(PointCloud, PointCloud)>,
}

fn shape_of(i: u64) -> Shape {
    if i.is_multiple_of(2) {
        Shape::Sphere
    } else {
        Shape::Torus
    }
}

fn smoke_data() -> SmokeData {
    let train = (0..4).map(|i| synth(shape_of(i), 2048, 10 + i).unwrap()).collect();
    let val = (0..2).map(|i| synth(shape_of(i), 1024, 100 + i).unwrap()).collect();
    let test = (0..2)
        .map(|i| {
            let clean = synth(shape_of(i), 1024, 200 + i).unwrap();
            let noisy = add_noise(&clean, &NoiseSpec::gaussian(0.02, 300 + i)).unwrap();
            (noisy, clean)
        })
        .collect();
    SmokeData { train, val, test }
}

/// Held-out CD of the denoised clouds and of the noisy inputs.
fn held_out_cd(params: &ModelParams, cfg: &ModelConfig, data: &SmokeData) -> (f64, f64) {
    let mut den = 0.0;
    let mut noisy = 0.0;
    for (n, c) in &data.test {
        let out = forward_variant(cfg.variant, n, params, cfg).unwrap();
        den += chamfer(&out, c).unwrap();
        noisy += chamfer(n, c).unwrap();
    }
    (den, noisy)
}

struct SmokeRun {
    params: ModelParams,
    cfg: ModelConfig,
    ratio: f64,
    den_cd: f64,
    time: Duration,
}

fn smoke_run(data: &SmokeData, variant: Variant, mode: LossMode) -> SmokeRun {
    let cfg = ModelConfig {
        variant,
        ..smoke_model()
    };
    let tcfg = smoke_train(mode);
    let start = Instant::now();
    let init = ModelParams::init(&cfg, tcfg.seed).unwrap();
    let out = train(&cfg, &init, &data.train, &data.val, &tcfg, None).unwrap();
    let time = start.elapsed();
    let (den, noisy) = held_out_cd(&out.best_params, &cfg, data);
    SmokeRun {
        params: out.best_params,
        cfg,
        ratio: den / noisy,
        den_cd: den / data.test.len() as f64,
        time,
    }
}

fn c11_smoke(sup: &SmokeRun, unsup: &SmokeRun) -> Outcome {
    let total = sup.time + unsup.time;
    let ok = sup.ratio <= 0.6 && unsup.ratio <= 0.85 && total <= Duration::from_secs(600);
    outcome(
        ok,
        format!(
            "supervised ratio {:.3} (≤ 0.6), unsupervised ratio {:.3} (≤ 0.85), training time {:.0}s + {:.0}s (≤ 600s)",
            sup.ratio,
            unsup.ratio,
            sup.time.as_secs_f64(),
            unsup.time.as_secs_f64()
        ),
    )
}

fn c12_ablation(data: &SmokeData, full: &SmokeRun) -> Outcome {
    let mut ok = true;
    let mut parts = vec![format!("full {:.4e}", full.den_cd)];
    for v in [Variant::NoGeoGraph, Variant::NoSpectralFiltering, Variant::NoChannelMixing, Variant::DtlGcn] {
        let run = smoke_run(data, v, LossMode::Supervised);
        let within = full.den_cd <= run.den_cd * 1.1;
        if v == Variant::DtlGcn {
            ok &= within;
        }
        parts.push(format!("{v} {:.4e}{}", run.den_cd, if within { "" } else { " (full worse)" }));
    }
    outcome(ok, parts.join(", "))
}

fn c13_determinism(run: &SmokeRun, data: &SmokeData) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &run.params, &run.cfg).unwrap();
    let input = dir.path().join("noisy.xyz");
    save_cloud(&data.test[0].0, &input).unwrap();
    let outs: Vec<Vec<u8>> = ["a.xyz", "b.xyz"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            cmd_denoise(&DenoiseArgs {
                ckpt: ckpt.clone(),
                input: input.clone(),
                out: out.clone(),
                variant: None,
                snapshots: None,
            })
            .unwrap();
            std::fs::read(out).unwrap()
        })
        .collect();
    let same = outs[0] == outs[1];
    let moved = outs[0] != std::fs::read(&input).unwrap();
    outcome(same && moved, format!("{} bytes, identical: {same}", outs[0].len()))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let dt = t.elapsed();
        println!(
            "criterion {id:>2} [{}] {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64()
        );
        results.push((id, name, o, dt));
    };
    record(1, "bernstein bound", &mut c1_bernstein_bound);
    record(2, "bernstein approximation rate", &mut c2_approximation_rate);
    record(3, "basis argmax", &mut c3_argmax);
    record(4, "polynomial/spectral equivalence", &mut c4_filter_equivalence);
    record(5, "kronecker spectrum", &mut c5_kronecker);
    record(6, "rk4 order", &mut c6_rk4_order);
    record(7, "gradient fidelity", &mut c7_gradients);
    record(8, "metric oracles", &mut c8_metrics);
    record(9, "riemannian domination", &mut c9_domination);
    record(10, "operator spectrum", &mut c10_operator_spectrum);

    let data = smoke_data();
    let sup = smoke_run(&data, Variant::Full, LossMode::Supervised);
    let unsup = smoke_run(&data, Variant::Full, LossMode::Unsupervised);
    record(11, "smoke training", &mut || c11_smoke(&sup, &unsup));
    record(12, "ablation ordering", &mut || c12_ablation(&data, &sup));
    record(13, "denoise determinism", &mut || c13_determinism(&sup, &data));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
