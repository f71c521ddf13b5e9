//! Neighbour graphs: Euclidean and learned-metric (Riemannian) edge weights
//! and the normalized propagation operator built from them.

mod knn;
mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, DEFAULT_LEAKY_SLOPE};

pub use knn::{knn, knn_query, GRID_THRESHOLD};

pub use sparse::{build_operator, spmm, validate_neighbors, CsrPattern, SparseOp};

/// Lower bound on the kernel bandwidth, relative to the mean neighbour distance.
pub const DELTA_REL_FLOOR: f64 = 1e-3;
pub const DELTA_ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct NeighborGraph {
    pub k: usize,
    /// `N·k` neighbour indices, row-major.
    pub idx: Vec<usize>,
    /// `N×k` directed kernel weights, aligned with `idx`.
    pub weights: Tensor,
    pub op: SparseOp,
}

impl NeighborGraph {
    pub fn n(&self) -> usize {
        self.op.n()
    }
}

/// Which per-point metrics enter an edge length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    /// `(G_i + G_j)/2`, giving an undirected length.
    #[default]
    Symmetric,
    /// `G_i` only.
    Center,
}

/// Learned Jacobian attention and the metric scale.
#[derive(Clone, Debug)]
pub struct MetricParams {
    /// `(d+d_h) × (heads·key_dim)`
    pub w_q: Tensor,
    /// `(d+d_h) × (heads·key_dim)`
    pub w_k: Tensor,
    /// `(heads·k²) × d²`
    pub w_proj: Tensor,
    /// `[1]`; the scale is `softplus(alpha_raw)`.
    pub alpha_raw: Tensor,
    pub heads: usize,
    pub key_dim: usize,
    pub d: usize,
    pub mode: MetricMode,
}

impl MetricParams {
    pub fn alpha(&self) -> Result<Tensor> {
        self.alpha_raw.softplus()
    }

    fn check(&self, width: usize, k: usize) -> Result<()> {
        let hk = self.heads * self.key_dim;
        let ok = self.heads >= 1
            && self.w_q.shape() == [width, hk]
            && self.w_k.shape() == [width, hk]
            && self.w_proj.shape() == [self.heads * k * k, self.d * self.d]
            && self.alpha_raw.numel() == 1;
        if !ok {
            return Err(Error::shape(
                "metric",
                format!(
                    "w_q {:?}, w_k {:?}, w_proj {:?} do not fit width {width}, k {k}, heads {}, key_dim {}, d {}",
                    self.w_q.shape(),
                    self.w_k.shape(),
                    self.w_proj.shape(),
                    self.heads,
                    self.key_dim,
                    self.d
                ),
            ));
        }
        Ok(())
    }
}

/// Per-point Jacobians `N×d×d` from local multi-head attention over each
/// point's neighbour block.
pub fn jacobian_attention(x: &Tensor, idx: &[usize], k: usize, params: &MetricParams) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("jacobian_attention", format!("embedding must be N×c, got {:?}", x.shape())));
    }
    let n = x.dim(0);
    params.check(x.dim(1), k)?;
    validate_neighbors(idx, n, k)?;
    // project before gathering: N·k rows share N projections
    let q_all = x.matmul(&params.w_q)?;
    let k_all = x.matmul(&params.w_k)?;
    let flat = neighbor_scores(&q_all, &k_all, idx, k, params.heads, 1.0 / (params.d as f64).sqrt())?;
    flat.matmul(&params.w_proj)?.reshape(&[n, params.d, params.d])
}

/// `N × (heads·k·k)` block scores `leaky(scale·q_a·k_b)` over each point's
/// neighbours `a, b`, laid out as `[head][a][b]`.
fn neighbor_scores(q_all: &Tensor, k_all: &Tensor, idx: &[usize], k: usize, heads: usize, scale: f64) -> Result<Tensor> {
    let n = q_all.dim(0);
    let dk = q_all.dim(1) / heads;
    let width = heads * k * k;
    let (q, kk) = (q_all.data(), k_all.data());
    let hd = heads * dk;
    let mut out = vec![0.0; n * width];
    for i in 0..n {
        let nb = &idx[i * k..(i + 1) * k];
        let row = &mut out[i * width..(i + 1) * width];
        for h in 0..heads {
            for (a, &ja) in nb.iter().enumerate() {
                let qa = &q[ja * hd + h * dk..ja * hd + (h + 1) * dk];
                for (b, &jb) in nb.iter().enumerate() {
                    let kb = &kk[jb * hd + h * dk..jb * hd + (h + 1) * dk];
                    let v = scale * qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>();
                    row[(h * k + a) * k + b] = if v > 0.0 { v } else { DEFAULT_LEAKY_SLOPE * v };
                }
            }
        }
    }
    let idx = idx.to_vec();
    Tensor::from_op("neighbor_scores", vec![q_all.clone(), k_all.clone()], vec![n, width], out, move |inp, out, g| {
        let (q, kk, y) = (inp[0].data(), inp[1].data(), out.data());
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; kk.len()];
        for i in 0..n {
            let nb = &idx[i * k..(i + 1) * k];
            for h in 0..heads {
                for (a, &ja) in nb.iter().enumerate() {
                    for (b, &jb) in nb.iter().enumerate() {
                        let o = i * width + (h * k + a) * k + b;
                        // y > 0 exactly when the pre-activation is
                        let dpre = g[o] * scale * if y[o] > 0.0 { 1.0 } else { DEFAULT_LEAKY_SLOPE };
                        if dpre == 0.0 {
                            continue;
                        }
                        let (qa, kb) = (ja * hd + h * dk, jb * hd + h * dk);
                        for t in 0..dk {
                            gq[qa + t] += dpre * kk[kb + t];
                            gk[kb + t] += dpre * q[qa + t];
                        }
                    }
                }
            }
        }
        Ok(vec![inp[0].tracks_grad().then_some(gq), inp[1].tracks_grad().then_some(gk)])
    })
}

/// One point's metric `G = I + α²JᵀJ`, kept in factored form.
#[derive(Clone, Debug)]
pub struct LocalMetric {
    pub d: usize,
    /// Row-major `d×d`.
    pub j: Vec<f64>,
    pub alpha: f64,
}

impl LocalMetric {
    pub fn identity(d: usize) -> Self {
        LocalMetric {
            d,
            j: vec![0.0; d * d],
            alpha: 0.0,
        }
    }

    /// Dense `G`.
    pub fn matrix(&self) -> Vec<f64> {
        let d = self.d;
        let a2 = self.alpha * self.alpha;
        let mut g = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                let jtj: f64 = (0..d).map(|t| self.j[t * d + r] * self.j[t * d + c]).sum();
                g[r * d + c] = a2 * jtj + if r == c { 1.0 } else { 0.0 };
            }
        }
        g
    }

    /// `‖αJv‖²`
    fn excess(&self, v: &[f64]) -> f64 {
        let d = self.d;
        let a2 = self.alpha * self.alpha;
        a2 * (0..d)
            .map(|r| {
                let jv: f64 = (0..d).map(|c| self.j[r * d + c] * v[c]).sum();
                jv * jv
            })
            .sum::<f64>()
    }
}

/// Edge length under the symmetrized metric `(G_i + G_j)/2`.
///
/// Written as the Euclidean term plus non-negative excess, so the result is
/// never below the Euclidean distance, even in floating point.
pub fn riemannian_distance(pi: &[f64], pj: &[f64], gi: &LocalMetric, gj: &LocalMetric) -> Result<f64> {
    let d = pi.len();
    if pj.len() != d || gi.d != d || gj.d != d || gi.j.len() != d * d || gj.j.len() != d * d {
        return Err(Error::shape("riemannian_distance", "dimension mismatch"));
    }
    if pi.iter().chain(pj).chain(&gi.j).chain(&gj.j).any(|v| !v.is_finite()) || !gi.alpha.is_finite() || !gj.alpha.is_finite() {
        return Err(Error::Computation {
            op: "riemannian_distance",
            msg: "non-finite input".into(),
        });
    }
    let delta: Vec<f64> = pi.iter().zip(pj).map(|(a, b)| a - b).collect();
    let eu: f64 = delta.iter().map(|v| v * v).sum();
    Ok((eu + 0.5 * (gi.excess(&delta) + gj.excess(&delta))).sqrt())
}

/// Squared edge lengths `N×k` in `P`-space under the per-point metrics.
pub fn riemannian_edge_lengths2(
    p: &Tensor,
    jac: &Tensor,
    alpha: &Tensor,
    idx: &[usize],
    k: usize,
    mode: MetricMode,
) -> Result<Tensor> {
    let (n, d) = (p.dim(0), p.dim(1));
    if jac.shape() != [n, d, d] || alpha.numel() != 1 {
        return Err(Error::shape(
            "riemannian_edge_lengths2",
            format!("P {:?}, J {:?}, alpha {:?}", p.shape(), jac.shape(), alpha.shape()),
        ));
    }
    validate_neighbors(idx, n, k)?;
    // weights of ‖J_i δ‖² and ‖J_j δ‖² in the excess term
    let (ci, cj) = match mode {
        MetricMode::Center => (1.0, 0.0),
        MetricMode::Symmetric => (0.5, 0.5),
    };
    let (pd, jd) = (p.data(), jac.data());
    let a = alpha.data()[0];
    let a2 = a * a;
    let mut out = vec![0.0; n * k];
    let mut delta = vec![0.0; d];
    for i in 0..n {
        for (s, &j) in idx[i * k..(i + 1) * k].iter().enumerate() {
            for t in 0..d {
                delta[t] = pd[i * d + t] - pd[j * d + t];
            }
            let eu: f64 = delta.iter().map(|v| v * v).sum();
            let mut ex = ci * jnorm2(&jd[i * d * d..(i + 1) * d * d], &delta);
            if cj != 0.0 {
                ex += cj * jnorm2(&jd[j * d * d..(j + 1) * d * d], &delta);
            }
            out[i * k + s] = eu + ex * a2;
        }
    }
    let idx = idx.to_vec();
    Tensor::from_op(
        "riemannian_edge_lengths2",
        vec![p.clone(), jac.clone(), alpha.clone()],
        vec![n, k],
        out,
        move |inp, _, g| {
            let (pd, jd) = (inp[0].data(), inp[1].data());
            let a = inp[2].data()[0];
            let a2 = a * a;
            let mut gp = vec![0.0; pd.len()];
            let mut gj = vec![0.0; jd.len()];
            let mut ga = 0.0;
            let mut delta = vec![0.0; d];
            let mut ui = vec![0.0; d];
            let mut uj = vec![0.0; d];
            let mut gdelta = vec![0.0; d];
            for i in 0..n {
                for (s, &j) in idx[i * k..(i + 1) * k].iter().enumerate() {
                    let gv = g[i * k + s];
                    if gv == 0.0 {
                        continue;
                    }
                    for t in 0..d {
                        delta[t] = pd[i * d + t] - pd[j * d + t];
                    }
                    let (ji, jj) = (i * d * d, j * d * d);
                    matvec(&jd[ji..ji + d * d], &delta, &mut ui);
                    let mut ex = ci * ui.iter().map(|v| v * v).sum::<f64>();
                    if cj != 0.0 {
                        matvec(&jd[jj..jj + d * d], &delta, &mut uj);
                        ex += cj * uj.iter().map(|v| v * v).sum::<f64>();
                    }
                    ga += gv * 2.0 * a * ex;
                    // ∂/∂δ = 2δ + 2α²(c_i J_iᵀu_i + c_j J_jᵀu_j)
                    for t in 0..d {
                        gdelta[t] = 2.0 * delta[t];
                    }
                    let si = 2.0 * gv * a2 * ci;
                    for r in 0..d {
                        for c in 0..d {
                            gdelta[c] += 2.0 * a2 * ci * jd[ji + r * d + c] * ui[r];
                            gj[ji + r * d + c] += si * ui[r] * delta[c];
                        }
                    }
                    if cj != 0.0 {
                        let sj = 2.0 * gv * a2 * cj;
                        for r in 0..d {
                            for c in 0..d {
                                gdelta[c] += 2.0 * a2 * cj * jd[jj + r * d + c] * uj[r];
                                gj[jj + r * d + c] += sj * uj[r] * delta[c];
                            }
                        }
                    }
                    for t in 0..d {
                        gp[i * d + t] += gv * gdelta[t];
                        gp[j * d + t] -= gv * gdelta[t];
                    }
                }
            }
            Ok(vec![
                inp[0].tracks_grad().then_some(gp),
                inp[1].tracks_grad().then_some(gj),
                inp[2].tracks_grad().then(|| vec![ga]),
            ])
        },
    )
}

/// `out = J v` for a row-major `d×d` block.
#[inline]
fn matvec(j: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = j[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `‖J v‖²`
#[inline]
fn jnorm2(j: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    (0..d)
        .map(|r| {
            let jv: f64 = j[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum();
            jv * jv
        })
        .sum()
}

/// Gaussian kernel `exp(−ℓ²/(2δ_i²))` with `δ_i` the (population) standard
/// deviation of row `i`'s edge lengths. Rows whose deviation does not exceed
/// `max(1e-6, 1e-3·mean)` are degenerate and get uniform weight 1.
pub fn gaussian_weights(len2: &Tensor) -> Result<Tensor> {
    if len2.rank() != 2 {
        return Err(Error::shape("gaussian_weights", format!("expected N×k, got {:?}", len2.shape())));
    }
    let n = len2.dim(0);
    let len = len2.sqrt()?;
    let mean = len.mean(1, true)?;
    let var = len.sub(&mean)?.square()?.mean(1, true)?;
    let mask: Vec<f64> = var
        .data()
        .iter()
        .zip(mean.data())
        .map(|(v, m)| {
            let floor = DELTA_ABS_FLOOR.max(DELTA_REL_FLOOR * m);
            if v.sqrt() > floor {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let keep = Tensor::new(mask.clone(), &[n, 1])?;
    let fill = Tensor::new(mask.iter().map(|m| 1.0 - m).collect(), &[n, 1])?;
    let denom = var.mul(&keep)?.add(&fill)?.scale(2.0)?;
    len2.div(&denom)?.neg()?.exp()?.mul(&keep)?.add(&fill)
}

/// Baseline graph: kNN and Gaussian weights under the Euclidean metric in
/// whatever coordinates are given.
pub fn euclidean_adjacency(points: &Tensor, k: usize) -> Result<NeighborGraph> {
    if points.rank() != 2 {
        return Err(Error::shape("euclidean_adjacency", format!("expected N×c, got {:?}", points.shape())));
    }
    let (n, c) = (points.dim(0), points.dim(1));
    let idx = knn(points.data(), c, k)?;
    let delta = points.reshape(&[n, 1, c])?.sub(&points.gather_rows(&idx, &[n, k])?)?;
    let weights = gaussian_weights(&delta.square()?.sum(2, false)?)?;
    let op = build_operator(&idx, &weights)?;
    Ok(NeighborGraph { k, idx, weights, op })
}

/// Learned-metric graph: neighbours are found in `X = [P, αZ]`, edge lengths
/// are measured in `P` under `I + α²JᵀJ` with attention Jacobians `J`.
pub fn geometric_adjacency(p: &Tensor, z: &Tensor, params: &MetricParams, k: usize) -> Result<NeighborGraph> {
    if p.rank() != 2 || z.rank() != 2 || p.dim(0) != z.dim(0) || p.dim(1) != params.d {
        return Err(Error::shape(
            "geometric_adjacency",
            format!("P {:?} and Z {:?} with metric dimension {}", p.shape(), z.shape(), params.d),
        ));
    }
    let alpha = params.alpha()?;
    let x = Tensor::concat(&[p, &z.mul(&alpha)?], 1)?;
    let idx = knn(x.data(), x.dim(1), k)?;
    let jac = jacobian_attention(&x, &idx, k, params)?;
    let len2 = riemannian_edge_lengths2(p, &jac, &alpha, &idx, k, params.mode)?;
    let weights = gaussian_weights(&len2)?;
    let op = build_operator(&idx, &weights)?;
    Ok(NeighborGraph { k, idx, weights, op })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect(), shape).unwrap()
    }

    fn metric(rng: &mut ChaCha8Rng, d: usize, dh: usize, heads: usize, dk: usize, k: usize) -> MetricParams {
        MetricParams {
            w_q: rand_tensor(rng, &[d + dh, heads * dk], 0.5),
            w_k: rand_tensor(rng, &[d + dh, heads * dk], 0.5),
            w_proj: rand_tensor(rng, &[heads * k * k, d * d], 0.3),
            alpha_raw: Tensor::scalar(0.2),
            heads,
            key_dim: dk,
            d,
            mode: MetricMode::Symmetric,
        }
    }

    #[test]
    fn kernel_formula_points() {
        // lengths (1,1,3,3): mean 2, population std 1, so the near pair sits
        // exactly one bandwidth away
        let w = gaussian_weights(&Tensor::from_slice(&[1.0, 1.0, 9.0, 9.0], &[1, 4]).unwrap()).unwrap();
        assert!((w.data()[0] - 0.6065306597126334).abs() < 1e-15);
        assert!((w.data()[2] - (-4.5f64).exp()).abs() < 1e-15);
        // coincident neighbour
        let w = gaussian_weights(&Tensor::from_slice(&[0.0, 1.0, 4.0], &[1, 3]).unwrap()).unwrap();
        assert_eq!(w.data()[0], 1.0);
    }

    #[test]
    fn equal_distances_give_unit_weights() {
        let len2 = Tensor::from_slice(&[4.0, 4.0, 4.0, 1.0, 2.0, 3.0], &[2, 3]).unwrap();
        let w = gaussian_weights(&len2).unwrap();
        assert_eq!(&w.data()[..3], &[1.0, 1.0, 1.0]);
        assert!(w.data()[3..].iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn riemannian_hand_case() {
        let j = LocalMetric {
            d: 2,
            j: vec![1.0, 0.0, 0.0, 0.0],
            alpha: 1.0,
        };
        assert_eq!(j.matrix(), vec![2.0, 0.0, 0.0, 1.0]);
        let l = riemannian_distance(&[1.0, 0.0], &[0.0, 0.0], &j, &j).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-15);
        let e = riemannian_distance(&[3.0, 4.0], &[0.0, 0.0], &LocalMetric::identity(2), &LocalMetric::identity(2)).unwrap();
        assert_eq!(e, 5.0);
        assert!(riemannian_distance(&[f64::NAN, 0.0], &[0.0, 0.0], &j, &j).is_err());
    }

    #[test]
    fn riemannian_matches_quadratic_form_and_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let d = rng.random_range(1..5);
            let mk = |rng: &mut ChaCha8Rng| LocalMetric {
                d,
                j: (0..d * d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
                alpha: rng.random::<f64>() * 2.0,
            };
            let (gi, gj) = (mk(&mut rng), mk(&mut rng));
            let pi: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let pj: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let l = riemannian_distance(&pi, &pj, &gi, &gj).unwrap();
            let lr = riemannian_distance(&pj, &pi, &gj, &gi).unwrap();
            let eu = pi.iter().zip(&pj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(l >= eu);
            assert_eq!(l, lr);
            let (a, b) = (gi.matrix(), gj.matrix());
            let dv: Vec<f64> = pi.iter().zip(&pj).map(|(x, y)| x - y).collect();
            let q: f64 = (0..d)
                .flat_map(|r| (0..d).map(move |c| (r, c)))
                .map(|(r, c)| dv[r] * 0.5 * (a[r * d + c] + b[r * d + c]) * dv[c])
                .sum();
            assert!((l - q.sqrt()).abs() <= 1e-12 * (1.0 + l));
        }
    }

    #[test]
    fn attention_zero_weights_give_zero_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = metric(&mut rng, 2, 3, 2, 2, 3);
        m.w_proj = Tensor::zeros(m.w_proj.shape());
        let x = rand_tensor(&mut rng, &[6, 5], 1.0);
        let idx = knn(x.data(), 5, 3).unwrap();
        let j = jacobian_attention(&x, &idx, 3, &m).unwrap();
        assert_eq!(j.shape(), &[6, 2, 2]);
        assert!(j.data().iter().all(|v| *v == 0.0));
        for heads in 1..4 {
            let m = metric(&mut rng, 2, 3, heads, 2, 3);
            assert_eq!(jacobian_attention(&x, &idx, 3, &m).unwrap().shape(), &[6, 2, 2]);
        }
    }

    #[test]
    fn attention_single_head_hand_case() {
        // d=2, d_h=0, k=1, key_dim 2, W_Q = W_K = I, projection maps the
        // single score s to J = [[s, 0], [0, 2s]]
        let m = MetricParams {
            w_q: Tensor::eye(2),
            w_k: Tensor::eye(2),
            w_proj: Tensor::from_slice(&[1.0, 0.0, 0.0, 2.0], &[1, 4]).unwrap(),
            alpha_raw: Tensor::scalar(0.0),
            heads: 1,
            key_dim: 2,
            d: 2,
            mode: MetricMode::Symmetric,
        };
        let x = Tensor::from_slice(&[0.0, 0.0, 1.0, 2.0, -3.0, 0.5], &[3, 2]).unwrap();
        let idx = [1, 0, 1];
        let j = jacobian_attention(&x, &idx, 1, &m).unwrap();
        for (i, &nb) in idx.iter().enumerate() {
            let h = &x.data()[nb * 2..nb * 2 + 2];
            let raw = (h[0] * h[0] + h[1] * h[1]) / 2f64.sqrt();
            let s = if raw > 0.0 { raw } else { 0.01 * raw };
            assert!((j.data()[i * 4] - s).abs() < 1e-14);
            assert!((j.data()[i * 4 + 3] - 2.0 * s).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_alpha_reduces_to_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = metric(&mut rng, 3, 4, 2, 3, 5);
        m.alpha_raw = Tensor::scalar(-800.0); // softplus underflows to exactly 0
        let p = rand_tensor(&mut rng, &[20, 3], 1.0);
        let z = rand_tensor(&mut rng, &[20, 4], 1.0);
        let g = geometric_adjacency(&p, &z, &m, 5).unwrap();
        let e = euclidean_adjacency(&p, 5).unwrap();
        assert_eq!(g.idx, e.idx);
        for (a, b) in g.weights.data().iter().zip(e.weights.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(g.weights.data().iter().all(|w| *w > 0.0 && *w <= 1.0));
    }

    #[test]
    fn geometric_weights_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, dh, k) = (8, 2, 3, 3);
        let m = metric(&mut rng, d, dh, 2, 2, k);
        let p = rand_tensor(&mut rng, &[n, d], 1.0);
        let z = rand_tensor(&mut rng, &[n, dh], 1.0);
        let g = geometric_adjacency(&p, &z, &m, k).unwrap();
        let alpha = m.alpha().unwrap().item().unwrap();
        let x = Tensor::concat(&[&p, &z.scale(alpha).unwrap()], 1).unwrap();
        let jac = jacobian_attention(&x, &g.idx, k, &m).unwrap();
        let local = |i: usize| LocalMetric {
            d,
            j: jac.data()[i * d * d..(i + 1) * d * d].to_vec(),
            alpha,
        };
        for i in 0..n {
            let lens: Vec<f64> = (0..k)
                .map(|s| {
                    let j = g.idx[i * k + s];
                    riemannian_distance(&p.data()[i * d..(i + 1) * d], &p.data()[j * d..(j + 1) * d], &local(i), &local(j)).unwrap()
                })
                .collect();
            let mean = lens.iter().sum::<f64>() / k as f64;
            let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k as f64;
            for s in 0..k {
                let want = (-lens[s] * lens[s] / (2.0 * var)).exp();
                assert!((g.weights.data()[i * k + s] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operator_spectrum_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let n = rng.random_range(2..40);
            let k = rng.random_range(1..n.min(8));
            let pts = rand_tensor(&mut rng, &[n, 3], 1.0);
            let g = euclidean_adjacency(&pts, k).unwrap();
            let m = DMatrix::from_row_slice(n, n, &g.op.to_dense());
            for ev in m.symmetric_eigen().eigenvalues.iter() {
                assert!(*ev >= -1e-10 && *ev <= 1.0 + 1e-10, "{ev}");
            }
        }
    }

    #[test]
    fn geometric_graph_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, dh, k) = (10, 2, 2, 3);
        for mode in [MetricMode::Symmetric, MetricMode::Center] {
        let m = MetricParams { mode, ..metric(&mut rng, d, dh, 2, 2, k) };
        let p = rand_tensor(&mut rng, &[n, d], 1.0);
        let z = rand_tensor(&mut rng, &[n, dh], 1.0);
        let probe = rand_tensor(&mut rng, &[n, 1], 1.0);
        let r = grad_check_many(
            |xs| {
                let mm = MetricParams {
                    w_q: xs[2].clone(),
                    w_k: xs[3].clone(),
                    w_proj: xs[4].clone(),
                    alpha_raw: xs[5].clone(),
                    ..m.clone()
                };
                let g = geometric_adjacency(&xs[0], &xs[1], &mm, k)?;
                g.op.apply(&probe)?.square()?.sum_all()
            },
            &[p, z, m.w_q.clone(), m.w_k.clone(), m.w_proj.clone(), m.alpha_raw.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{mode:?}: {}", r.max_rel_error);
        }
    }
}
