//! Point clouds: data model, synthetic shapes, noise injection and patches.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load, save, CloudFormat};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    pub name: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("point cloud contains non-finite coordinates".into()));
        }
        Ok(PointCloud { points, name: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Flattened `N×3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.flat(), &[self.len(), 3]).expect("N×3 layout")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.dim(1) != 3 {
            return Err(Error::shape("from_tensor", format!("expected N×3, got {:?}", t.shape())));
        }
        Self::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.points[i]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
}

/// Additive noise. `sigma` is a fraction of the cloud's bounding-box diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma,
            seed,
        }
    }
}

pub fn add_noise(pc: &PointCloud, spec: &NoiseSpec) -> Result<PointCloud> {
    if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() {
        return Err(Error::Argument(format!("noise sigma must be >= 0, got {}", spec.sigma)));
    }
    if spec.sigma == 0.0 {
        return Ok(pc.clone());
    }
    let std = spec.sigma * pc.bbox_diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = pc
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for v in q.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += std * z;
            }
            q
        })
        .collect();
    let mut out = PointCloud::new(points)?;
    out.name = pc.name.clone();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Torus,
    Cube,
    Plane,
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "torus" => Ok(Shape::Torus),
            "cube" => Ok(Shape::Cube),
            "plane" => Ok(Shape::Plane),
            other => Err(Error::Argument(format!(
                "unknown shape '{other}' (expected sphere, torus, cube or plane)"
            ))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Shape::Sphere => "sphere",
            Shape::Torus => "torus",
            Shape::Cube => "cube",
            Shape::Plane => "plane",
        };
        f.write_str(s)
    }
}

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.4;

/// Uniform surface samples of a canonical shape centred at the origin, then
/// scaled (not translated) so the bounding-box diagonal is 1.
pub fn synth(shape: Shape, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 8 {
        return Err(Error::Argument(format!("synth needs n >= 8, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| match shape {
            Shape::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if r > 1e-12 {
                    break [v[0] / r, v[1] / r, v[2] / r];
                }
            },
            Shape::Torus => {
                // tube angle density is proportional to R + r cos(tube)
                let tube = loop {
                    let a = rng.random::<f64>() * std::f64::consts::TAU;
                    let accept = rng.random::<f64>() * (TORUS_MAJOR + TORUS_MINOR);
                    if accept <= TORUS_MAJOR + TORUS_MINOR * a.cos() {
                        break a;
                    }
                };
                let around = rng.random::<f64>() * std::f64::consts::TAU;
                let ring = TORUS_MAJOR + TORUS_MINOR * tube.cos();
                [ring * around.cos(), ring * around.sin(), TORUS_MINOR * tube.sin()]
            }
            Shape::Cube => {
                let face = rng.random_range(0..6usize);
                let u = rng.random::<f64>() * 2.0 - 1.0;
                let v = rng.random::<f64>() * 2.0 - 1.0;
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            Shape::Plane => [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0, 0.0],
        })
        .collect();
    let mut pc = PointCloud::new(points)?;
    let diag = pc.bbox_diagonal();
    for p in pc.points.iter_mut() {
        for v in p.iter_mut() {
            *v /= diag;
        }
    }
    Ok(pc.with_name(shape.to_string()))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Indices (ascending) of the `patch_size` points nearest to `center`,
/// ties broken by lower index.
pub fn patch_indices(pc: &PointCloud, center: usize, patch_size: usize) -> Result<Vec<usize>> {
    if patch_size == 0 || patch_size > pc.len() {
        return Err(Error::Argument(format!(
            "patch of {patch_size} points requested from a cloud of {}",
            pc.len()
        )));
    }
    let c = pc.points[center];
    let mut order: Vec<(f64, usize)> = pc.points.iter().map(|p| dist2(p, &c)).zip(0..).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if patch_size < order.len() {
        order.select_nth_unstable_by(patch_size - 1, cmp);
        order.truncate(patch_size);
    }
    let mut idx: Vec<usize> = order.into_iter().map(|(_, i)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Random seed points, one patch of `patch_size` nearest neighbours each.
pub fn extract_patch_indices(
    pc: &PointCloud,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if pc.len() < patch_size {
        return Err(Error::Argument(format!(
            "cloud has {} points, fewer than patch size {patch_size}",
            pc.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let center = rng.random_range(0..pc.len());
            patch_indices(pc, center, patch_size)
        })
        .collect()
}

pub fn extract_patches(
    pc: &PointCloud,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    extract_patch_indices(pc, patch_size, count, seed)?
        .iter()
        .map(|idx| pc.select(idx))
        .collect()
}
