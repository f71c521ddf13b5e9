//! Evaluation metrics (CD, EMD, HD, RMSD) and the training losses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{knn, knn_query};
use crate::pointcloud::PointCloud;
use crate::tensor::Tensor;

/// Largest size solved exactly; bigger inputs use the auction approximation.
pub const EMD_EXACT_MAX: usize = 512;
pub const REPULSION_WEIGHT: f64 = 0.01;
/// Support of the reconstruction prior.
pub const RECON_NEIGHBORS: usize = 8;

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

fn nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Index of the nearest point of `b` for every point of `a`.
fn nearest_index(a: &[f64], b: &[f64]) -> Result<Vec<usize>> {
    knn_query(b, a, 3, 1)
}

/// Squared distance from each point of `a` to its nearest neighbour in `b`.
pub fn nearest_dist2(a: &PointCloud, b: &PointCloud) -> Result<Vec<f64>> {
    nonempty(a, b)?;
    let nn = nearest_index(&a.flat(), &b.flat())?;
    Ok(a.points().iter().zip(nn).map(|(p, j)| dist2(p, &b.points()[j])).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Squared-distance Chamfer distance, averaged in both directions.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(mean(&nearest_dist2(a, b)?) + mean(&nearest_dist2(b, a)?))
}

pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let ab = max(&nearest_dist2(a, b)?);
    let ba = max(&nearest_dist2(b, a)?);
    Ok(ab.max(ba).sqrt())
}

/// Root mean squared distance from `a` to the surface sampled by `b`.
pub fn rmsd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(mean(&nearest_dist2(a, b)?).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `assignment[i]` is the point of `b` matched to point `i` of `a`.
    pub assignment: Vec<usize>,
    /// Mean squared matched distance.
    pub cost: f64,
    pub exact: bool,
}

fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    let n = b.len();
    let mut c = vec![0.0; a.len() * n];
    c.par_chunks_mut(n).zip(a.points().par_iter()).for_each(|(row, p)| {
        for (r, q) in row.iter_mut().zip(b.points()) {
            *r = dist2(p, q);
        }
    });
    c
}

/// Mean cost of an assignment, summed in row order.
pub fn assignment_cost(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
}

/// Earth mover's distance between equal-size clouds: the optimal bijection
/// under squared distances, exact up to `EMD_EXACT_MAX` points.
pub fn emd_matching(a: &PointCloud, b: &PointCloud) -> Result<Matching> {
    nonempty(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Argument(format!("emd needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let cost = cost_matrix(a, b);
    let exact = n <= EMD_EXACT_MAX;
    let assignment = if exact { hungarian(&cost, n) } else { auction(&cost, n) };
    Ok(Matching {
        cost: assignment_cost(&cost, n, &assignment),
        assignment,
        exact,
    })
}

pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(emd_matching(a, b)?.cost)
}

/// Minimum-cost perfect matching on a dense `n×n` matrix (shortest
/// augmenting paths with potentials, O(n³)).
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based internals, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Forward auction with ε-scaling. The result is within `n·ε_final` of
/// the optimal total cost.
pub fn auction(cost: &[f64], n: usize) -> Vec<usize> {
    let scale = cost.iter().copied().fold(0.0, f64::max);
    if n == 1 || scale == 0.0 {
        return (0..n).collect();
    }
    let eps_final = scale * 1e-6 / n as f64;
    let mut eps = scale / 4.0;
    let mut price = vec![0.0; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        assigned.iter_mut().for_each(|a| *a = None);
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best, mut best_val, mut second_val) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let val = -row[j] - price[j];
                if val > best_val {
                    second_val = best_val;
                    best_val = val;
                    best = j;
                } else if val > second_val {
                    second_val = val;
                }
            }
            price[best] += best_val - second_val + eps;
            if let Some(prev) = owner[best].replace(i) {
                assigned[prev] = None;
                queue.push(prev);
            }
            assigned[i] = Some(best);
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    assigned.into_iter().map(|a| a.expect("auction assigns every row")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: Option<f64>,
    pub emd: Option<f64>,
    pub hd: Option<f64>,
    pub rmsd: Option<f64>,
    pub n_ref: usize,
    pub n_test: usize,
    pub emd_exact: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cd,
    Emd,
    Hd,
    Rmsd,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Cd, Metric::Emd, Metric::Hd, Metric::Rmsd];

    /// Parses a comma-separated list such as `cd,emd`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(|t| match t.trim() {
                "cd" => Ok(Metric::Cd),
                "emd" => Ok(Metric::Emd),
                "hd" => Ok(Metric::Hd),
                "rmsd" => Ok(Metric::Rmsd),
                other => Err(Error::Argument(format!("unknown metric '{other}' (expected cd, emd, hd, rmsd)"))),
            })
            .collect()
    }
}

/// Metrics of `test` against `reference`; RMSD runs from test to reference.
pub fn evaluate(reference: &PointCloud, test: &PointCloud, metrics: &[Metric]) -> Result<MetricReport> {
    let mut r = MetricReport {
        cd: None,
        emd: None,
        hd: None,
        rmsd: None,
        n_ref: reference.len(),
        n_test: test.len(),
        emd_exact: true,
    };
    for m in metrics {
        match m {
            Metric::Cd => r.cd = Some(chamfer(reference, test)?),
            Metric::Hd => r.hd = Some(hausdorff(reference, test)?),
            Metric::Rmsd => r.rmsd = Some(rmsd(test, reference)?),
            Metric::Emd => {
                let mt = emd_matching(test, reference)?;
                r.emd = Some(mt.cost);
                r.emd_exact = mt.exact;
            }
        }
    }
    Ok(r)
}

fn cloud_of(t: &Tensor) -> Result<PointCloud> {
    PointCloud::from_tensor(&t.detach())
}

/// Mean squared distance between rows of `x` and rows of `y` picked by `idx`.
fn paired_mse(x: &Tensor, y: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let picked = y.gather_rows(idx, &[idx.len()])?;
    x.sub(&picked)?.square()?.sum(1, false)?.mean_all()
}

/// Differentiable Chamfer distance between `N×3` tensors. Nearest pairs are
/// fixed by the forward pass.
pub fn chamfer_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (xd, yd) = (x.detach(), y.detach());
    if xd.dim(0) == 0 || yd.dim(0) == 0 {
        return Err(Error::EmptyCloud);
    }
    let xy = nearest_index(xd.data(), yd.data())?;
    let yx = nearest_index(yd.data(), xd.data())?;
    paired_mse(x, y, &xy)?.add(&paired_mse(y, x, &yx)?)
}

/// Differentiable EMD through the optimal matching of the forward pass.
pub fn emd_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let m = emd_matching(&cloud_of(x)?, &cloud_of(y)?)?;
    paired_mse(x, y, &m.assignment)
}

pub fn supervised_loss(denoised: &Tensor, clean: &Tensor) -> Result<Tensor> {
    chamfer_loss(denoised, clean)?.add(&emd_loss(denoised, clean)?)
}

/// Reconstruction term: each denoised point against its `m` nearest noisy
/// points, weighted by a Gaussian prior of width `sigma`.
pub fn reconstruction_loss(denoised: &Tensor, noisy: &Tensor, sigma: f64, m: usize) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be > 0, got {sigma}")));
    }
    let n = denoised.dim(0);
    let m = m.min(noisy.dim(0));
    let idx = knn_query(noisy.detach().data(), denoised.detach().data(), 3, m)?;
    let nbrs = noisy.gather_rows(&idx, &[n, m])?;
    let d2 = nbrs.sub(&denoised.reshape(&[n, 1, 3])?)?.square()?.sum(2, false)?;
    let logits = d2.scale(-1.0 / (2.0 * sigma * sigma))?;
    let shifted = logits.sub(&logits.detach().max(1, true)?)?;
    let e = shifted.exp()?;
    let w = e.div(&e.sum(1, true)?)?;
    w.mul(&d2)?.sum(1, false)?.mean_all()
}

/// `mean_i Σ_{j∈kNN(i)} exp(−‖u_i−u_j‖²)·‖u_i−u_j‖²`.
pub fn repulsion_loss(denoised: &Tensor, k: usize) -> Result<Tensor> {
    let n = denoised.dim(0);
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let idx = knn(denoised.detach().data(), 3, k)?;
    let nbrs = denoised.gather_rows(&idx, &[n, k])?;
    let d2 = nbrs.sub(&denoised.reshape(&[n, 1, 3])?)?.square()?.sum(2, false)?;
    d2.neg()?.exp()?.mul(&d2)?.sum(1, false)?.mean_all()
}

pub fn unsupervised_loss(denoised: &Tensor, noisy: &Tensor, sigma: f64, lambda: f64, k: usize) -> Result<Tensor> {
    reconstruction_loss(denoised, noisy, sigma, RECON_NEIGHBORS)?.add(&repulsion_loss(denoised, k)?.scale(lambda)?)
}
