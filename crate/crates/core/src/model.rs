//! The denoising network: edge-feature lifts, the graph ODE core, a linear
//! displacement head, the ablation variants and checkpoint IO.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gconv::{integer_step_baseline, integrate_with_snapshots, GConvParams, GraphSource, IntegratorConfig, OdeState};
use crate::graph::{knn, MetricMode, MetricParams};
use crate::pointcloud::PointCloud;
use crate::spectral::{ChannelMixer, FilterSpec};
use crate::tensor::{Tensor, DEFAULT_LEAKY_SLOPE};

/// Layers of the integer-step baseline.
pub const BASELINE_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoGeoGraph,
    NoSpectralFiltering,
    NoChannelMixing,
    DtlGcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGeoGraph,
        Variant::NoSpectralFiltering,
        Variant::NoChannelMixing,
        Variant::DtlGcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGeoGraph => "no-geo-graph",
            Variant::NoSpectralFiltering => "no-spectral-filtering",
            Variant::NoChannelMixing => "no-channel-mixing",
            Variant::DtlGcn => "dtl-gcn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Manifold dimension of `P`.
    pub d: usize,
    /// Hidden feature width of `Z`.
    pub d_h: usize,
    /// Bernstein order.
    #[serde(rename = "K")]
    pub order: usize,
    /// Neighbours per point.
    pub k: usize,
    pub heads: usize,
    /// Attention key width per head.
    pub key_dim: usize,
    /// Hidden width of the edge-feature MLPs.
    pub lift_hidden: usize,
    pub metric_mode: MetricMode,
    pub variant: Variant,
    pub integrator: IntegratorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            d_h: 64,
            order: 8,
            k: 16,
            heads: 4,
            key_dim: 16,
            lift_hidden: 64,
            metric_mode: MetricMode::Symmetric,
            variant: Variant::Full,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_h", self.d_h),
            ("k", self.k),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("lift_hidden", self.lift_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        self.integrator.validate()
    }
}

/// Two-layer perceptron applied to edge features.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// Hidden layers use leaky ReLU; the last layer is linear.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i + 1 < self.layers.len() {
                h = h.leaky_relu(DEFAULT_LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| (glorot(rng, w[0], w[1]), Tensor::zeros(&[w[1]])))
                .collect(),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-bound..=bound)).collect(), shape).expect("shape matches")
}

/// Edge-convolution lift: `h_i = max_{j∈kNN(i)} mlp([x_i, x_j − x_i])`.
pub fn edge_feature_lift(points: &Tensor, k: usize, mlp: &Mlp) -> Result<Tensor> {
    let n = points.dim(0);
    let c = points.dim(1);
    let idx = knn(points.detach().data(), c, k)?;
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let xi = points.gather_rows(&centers, &[n * k])?;
    let xj = points.gather_rows(&idx, &[n * k])?;
    let edges = Tensor::concat(&[&xi, &xj.sub(&xi)?], 1)?;
    let h = mlp.forward(&edges)?;
    let width = h.dim(1);
    h.reshape(&[n, k, width])?.max(1, false)
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub lift_p: Mlp,
    pub lift_z: Mlp,
    pub metric: MetricParams,
    pub filter: FilterSpec,
    pub mixer: ChannelMixer,
    /// `d_h × 3`
    pub head_w: Tensor,
    /// `[3]`
    pub head_b: Tensor,
    /// Per-layer `d_h × d_h` weights of the integer-step baseline.
    pub baseline: Vec<Tensor>,
}

/// Inverse of softplus, for initialising the metric scale.
fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

pub const INIT_ALPHA: f64 = 0.1;

impl ModelParams {
    /// Seeded initialisation. The head starts at zero, so a fresh model is
    /// the identity map.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh) = (cfg.d, cfg.d_h);
        let lift_p = Mlp::init(&mut rng, &[6, cfg.lift_hidden, d]);
        let lift_z = Mlp::init(&mut rng, &[6, cfg.lift_hidden, dh]);
        let width = d + dh;
        let hk = cfg.heads * cfg.key_dim;
        let metric = MetricParams {
            w_q: glorot(&mut rng, width, hk),
            w_k: glorot(&mut rng, width, hk),
            w_proj: uniform(&mut rng, &[cfg.heads * cfg.k * cfg.k, d * d], 0.1 / (cfg.k as f64)),
            alpha_raw: Tensor::scalar(softplus_inv(INIT_ALPHA)),
            heads: cfg.heads,
            key_dim: cfg.key_dim,
            d,
            mode: cfg.metric_mode,
        };
        // low-pass start: weight grows toward λ = 1
        let kk = cfg.order.max(1) as f64;
        let theta: Vec<f64> = (0..=cfg.order).map(|j| 2.0 * j as f64 / kk - 1.0).collect();
        let filter = FilterSpec::new(Tensor::new(theta, &[cfg.order + 1])?)?;
        // near W1 = W2 = I (diffusion); the jitter keeps B_K(Â)Z − Z off exact zeros
        let jitter = |rng: &mut ChaCha8Rng| Tensor::eye(dh).add(&uniform(rng, &[dh, dh], 0.05));
        let mixer = ChannelMixer::new(jitter(&mut rng)?, jitter(&mut rng)?)?;
        let baseline = (0..BASELINE_LAYERS).map(|_| glorot(&mut rng, dh, dh)).collect();
        Ok(ModelParams {
            lift_p,
            lift_z,
            metric,
            filter,
            mixer,
            head_w: Tensor::zeros(&[dh, 3]),
            head_b: Tensor::zeros(&[3]),
            baseline,
        })
    }

    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("lift_p", &self.lift_p), ("lift_z", &self.lift_z)] {
            for (i, (w, b)) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.w"), w.clone()));
                out.push((format!("{prefix}.{i}.b"), b.clone()));
            }
        }
        out.push(("metric.w_q".into(), self.metric.w_q.clone()));
        out.push(("metric.w_k".into(), self.metric.w_k.clone()));
        out.push(("metric.w_proj".into(), self.metric.w_proj.clone()));
        out.push(("metric.alpha_raw".into(), self.metric.alpha_raw.clone()));
        out.push(("filter.theta_raw".into(), self.filter.theta_raw.clone()));
        out.push(("mixer.m1_raw".into(), self.mixer.m1_raw.clone()));
        out.push(("mixer.m2_raw".into(), self.mixer.m2_raw.clone()));
        out.push(("head.w".into(), self.head_w.clone()));
        out.push(("head.b".into(), self.head_b.clone()));
        for (i, t) in self.baseline.iter().enumerate() {
            out.push((format!("baseline.{i}"), t.clone()));
        }
        out
    }

    /// Copy with tensors replaced, in `named()` order. Shapes must match.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let names = self.named();
        if tensors.len() != names.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, got {}", names.len(), tensors.len())));
        }
        for ((name, old), new) in names.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
            if !new.all_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut mlp = |m: &Mlp| Mlp {
            layers: m.layers.iter().map(|_| (next(), next())).collect(),
        };
        let lift_p = mlp(&self.lift_p);
        let lift_z = mlp(&self.lift_z);
        let metric = MetricParams {
            w_q: next(),
            w_k: next(),
            w_proj: next(),
            alpha_raw: next(),
            ..self.metric.clone()
        };
        let filter = FilterSpec::new(next())?;
        let mixer = ChannelMixer::new(next(), next())?;
        let head_w = next();
        let head_b = next();
        let baseline = self.baseline.iter().map(|_| next()).collect();
        Ok(ModelParams {
            lift_p,
            lift_z,
            metric,
            filter,
            mixer,
            head_w,
            head_b,
            baseline,
        })
    }

    /// Leaf copies that record gradients.
    pub fn trainable(&self) -> Self {
        let t = self.named().into_iter().map(|(_, t)| t.detach().requires_grad()).collect();
        self.with_tensors(t).expect("same shapes")
    }

    pub fn gconv(&self, cfg: &ModelConfig, variant: Variant) -> GConvParams {
        GConvParams {
            metric: self.metric.clone(),
            filter: self.filter.clone(),
            mixer: (variant != Variant::NoChannelMixing).then(|| self.mixer.clone()),
            k: cfg.k,
            graph: if variant == Variant::NoGeoGraph {
                GraphSource::Euclidean
            } else {
                GraphSource::Geometric
            },
            spectral: variant != Variant::NoSpectralFiltering,
        }
    }
}

/// Centroid and RMS radius used to move a cloud into the model frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Frame {
    pub fn of(points: &[f64]) -> Self {
        let n = (points.len() / 3) as f64;
        let mut center = [0.0; 3];
        for p in points.chunks_exact(3) {
            for a in 0..3 {
                center[a] += p[a];
            }
        }
        center.iter_mut().for_each(|c| *c /= n);
        let ms = points
            .chunks_exact(3)
            .map(|p| (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        let radius = if ms > 0.0 { ms.sqrt() } else { 1.0 };
        Frame { center, radius }
    }

    pub fn normalize(&self, points: &[f64]) -> Vec<f64> {
        points
            .chunks_exact(3)
            .flat_map(|p| (0..3).map(move |a| (p[a] - self.center[a]) / self.radius))
            .collect()
    }
}

/// Differentiable forward pass on an `N×3` tensor, returning the denoised
/// points at each requested fraction of the horizon.
pub fn forward_snapshots(params: &ModelParams, cfg: &ModelConfig, variant: Variant, noisy: &Tensor, fractions: &[f64]) -> Result<Vec<Tensor>> {
    if noisy.rank() != 2 || noisy.dim(1) != 3 {
        return Err(Error::shape("forward", format!("expected N×3 points, got {:?}", noisy.shape())));
    }
    let n = noisy.dim(0);
    if n <= cfg.k {
        return Err(Error::Argument(format!("model needs more than k = {} points, got {n}", cfg.k)));
    }
    let raw = noisy.detach();
    let frame = Frame::of(raw.data());
    let x = Tensor::new(frame.normalize(raw.data()), &[n, 3])?;
    let p = edge_feature_lift(&x, cfg.k, &params.lift_p)?;
    let z0 = edge_feature_lift(&x, cfg.k, &params.lift_z)?;
    let gconv = params.gconv(cfg, variant);
    let finals: Vec<Tensor> = if variant == Variant::DtlGcn {
        for f in fractions {
            if *f != 1.0 {
                return Err(Error::Argument("dtl-gcn has no intermediate states; use snapshot 1.0".into()));
            }
        }
        let z = integer_step_baseline(&z0, &p, &gconv, &params.baseline)?;
        vec![z; fractions.len()]
    } else {
        let state = OdeState { t: 0.0, z: z0, p };
        integrate_with_snapshots(&state, &gconv, &cfg.integrator, fractions)?
            .into_iter()
            .map(|s| s.z)
            .collect()
    };
    finals
        .iter()
        .map(|z| {
            let disp = z.matmul(&params.head_w)?.add(&params.head_b)?.scale(frame.radius)?;
            noisy.add(&disp)
        })
        .collect()
}

pub fn forward_tensor(params: &ModelParams, cfg: &ModelConfig, variant: Variant, noisy: &Tensor) -> Result<Tensor> {
    Ok(forward_snapshots(params, cfg, variant, noisy, &[1.0])?.remove(0))
}

/// Denoises a cloud with the configured variant.
pub fn forward(noisy: &PointCloud, params: &ModelParams, cfg: &ModelConfig) -> Result<PointCloud> {
    forward_variant(cfg.variant, noisy, params, cfg)
}

pub fn forward_variant(variant: Variant, noisy: &PointCloud, params: &ModelParams, cfg: &ModelConfig) -> Result<PointCloud> {
    let out = forward_tensor(params, cfg, variant, &noisy.to_tensor())?;
    let mut pc = PointCloud::from_tensor(&out)?;
    pc.name = noisy.name.clone();
    Ok(pc)
}

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";
const FORMAT: &str = "gdflow-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

/// Writes `dir/manifest.json` and `dir/params.bin` (little-endian f64).
pub fn save_checkpoint(dir: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in params.named() {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        config: cfg.clone(),
        params: entries,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))
}

/// Loads a checkpoint; when `expected` is given its architecture must match.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams, ModelConfig)> {
    let man_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", man_path.display())))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    if let Some(want) = expected {
        for (key, a, b) in [
            ("d", want.d, cfg.d),
            ("d_h", want.d_h, cfg.d_h),
            ("K", want.order, cfg.order),
            ("k", want.k, cfg.k),
            ("heads", want.heads, cfg.heads),
            ("key_dim", want.key_dim, cfg.key_dim),
            ("lift_hidden", want.lift_hidden, cfg.lift_hidden),
        ] {
            if a != b {
                return Err(Error::Checkpoint(format!("{key} mismatch: expected {a}, checkpoint has {b}")));
            }
        }
    }
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let template = ModelParams::init(&cfg, 0)?;
    let names = template.named();
    if names.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, manifest lists {}",
            names.len(),
            manifest.params.len()
        )));
    }
    let mut tensors = Vec::with_capacity(names.len());
    let mut end = 0;
    for ((name, t), entry) in names.iter().zip(&manifest.params) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "expected {name} {:?}, manifest has {} {:?}",
                t.shape(),
                entry.name,
                entry.shape
            )));
        }
        let len = t.numel() * 8;
        let bytes = blob.get(entry.offset..entry.offset + len).ok_or_else(|| {
            Error::Checkpoint(format!("{name}: bytes {}..{} beyond blob of {}", entry.offset, entry.offset + len, blob.len()))
        })?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(data, &entry.shape)?);
        end = end.max(entry.offset + len);
    }
    if end != blob.len() {
        return Err(Error::Checkpoint(format!("blob has {} bytes, manifest covers {end}", blob.len())));
    }
    Ok((template.with_tensors(tensors)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d: 3,
            d_h: 4,
            order: 3,
            k: 4,
            heads: 2,
            key_dim: 3,
            lift_hidden: 8,
            metric_mode: MetricMode::Symmetric,
            variant: Variant::Full,
            integrator: IntegratorConfig {
                dt: 0.1,
                t_end: 0.3,
                ..Default::default()
            },
        }
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    fn with_head(params: &ModelParams, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = params.clone();
        p.head_w = uniform(&mut rng, p.head_w.shape(), 0.3);
        p.head_b = uniform(&mut rng, &[3], 0.01);
        p
    }

    #[test]
    fn lift_hand_and_trivial_cases() {
        // one linear layer: h = [x_i, x_j − x_i]·W + b, then max over neighbours
        let pts = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        let x = Tensor::from_slice(&pts, &[8, 3]).unwrap();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.5).collect();
        let mlp = Mlp {
            layers: vec![(Tensor::new(w.clone(), &[6, 2]).unwrap(), Tensor::from_slice(&[0.1, -0.2], &[2]).unwrap())],
        };
        let got = edge_feature_lift(&x, 2, &mlp).unwrap();
        let idx = knn(&pts, 3, 2).unwrap();
        for i in 0..8 {
            for c in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for &j in &idx[i * 2..i * 2 + 2] {
                    let mut feat = [0.0; 6];
                    for a in 0..3 {
                        feat[a] = pts[i * 3 + a];
                        feat[3 + a] = pts[j * 3 + a] - pts[i * 3 + a];
                    }
                    let v = [0.1, -0.2][c] + (0..6).map(|r| feat[r] * w[r * 2 + c]).sum::<f64>();
                    best = best.max(v);
                }
                assert!((got.data()[i * 2 + c] - best).abs() < 1e-12);
            }
        }
        // identical points: every edge difference is zero
        let same = Tensor::full(&[5, 3], 0.7);
        let h = edge_feature_lift(&same, 2, &mlp).unwrap();
        assert!(h.data().chunks(2).all(|r| r == &h.data()[..2]));
    }

    #[test]
    fn zero_head_is_identity() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let pc = cloud(2, 24);
        for v in Variant::ALL {
            let out = forward_variant(v, &pc, &params, &cfg).unwrap();
            assert_eq!(out.points(), pc.points(), "{v}");
        }
    }

    #[test]
    fn variants_are_distinct_and_deterministic() {
        let cfg = small_config();
        let params = with_head(&ModelParams::init(&cfg, 3).unwrap(), 4);
        let pc = cloud(5, 30);
        let outs: Vec<Vec<f64>> = Variant::ALL
            .iter()
            .map(|v| forward_variant(*v, &pc, &params, &cfg).unwrap().flat())
            .collect();
        for i in 0..outs.len() {
            assert_eq!(outs[i].len(), 90);
            for j in i + 1..outs.len() {
                let diff = outs[i].iter().zip(&outs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff > 1e-9, "{} vs {}", Variant::ALL[i], Variant::ALL[j]);
            }
        }
        let again = forward_variant(Variant::Full, &pc, &params, &cfg).unwrap().flat();
        assert_eq!(again, outs[0]);
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = small_config();
        let params = with_head(&ModelParams::init(&cfg, 6).unwrap(), 7);
        let pc = cloud(8, 26);
        let n = pc.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let permuted = pc.select(&perm).unwrap();
        for v in Variant::ALL {
            let a = forward_variant(v, &pc, &params, &cfg).unwrap();
            let b = forward_variant(v, &permuted, &params, &cfg).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                for ax in 0..3 {
                    assert!((b.points()[i][ax] - a.points()[src][ax]).abs() < 1e-10, "{v}");
                }
            }
        }
    }

    #[test]
    fn snapshots_and_errors() {
        let cfg = small_config();
        let params = with_head(&ModelParams::init(&cfg, 9).unwrap(), 10);
        let x = cloud(11, 20).to_tensor();
        let snaps = forward_snapshots(&params, &cfg, Variant::Full, &x, &[1.0, 1.0 / 3.0]).unwrap();
        let full = forward_tensor(&params, &cfg, Variant::Full, &x).unwrap();
        assert_eq!(snaps[0].to_vec(), full.to_vec());
        assert!(forward_snapshots(&params, &cfg, Variant::DtlGcn, &x, &[0.5]).is_err());
        assert!(forward_tensor(&params, &cfg, Variant::Full, &cloud(1, 4).to_tensor()).is_err());
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!("no-geo-graph".parse::<Variant>().unwrap(), Variant::NoGeoGraph);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let cfg = small_config();
        let params = with_head(&ModelParams::init(&cfg, 12).unwrap(), 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &params, &cfg).unwrap();
        let (loaded, lcfg) = load_checkpoint(&path, Some(&cfg)).unwrap();
        assert_eq!(lcfg, cfg);
        for ((n1, a), (n2, b)) in params.named().iter().zip(loaded.named()) {
            assert_eq!(n1, &n2);
            assert_eq!(a.to_vec(), b.to_vec());
        }
        let mut other = cfg.clone();
        other.d_h = 8;
        let err = load_checkpoint(&path, Some(&other)).unwrap_err().to_string();
        assert!(err.contains("d_h"), "{err}");

        let blob = path.join(BLOB);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&blob, &bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
        assert!(load_checkpoint(&dir.path().join("missing"), None).is_err());
    }

    #[test]
    fn config_rejects_unknown_and_missing_keys() {
        let mut v = serde_json::to_value(small_config()).unwrap();
        assert_eq!(serde_json::from_value::<ModelConfig>(v.clone()).unwrap(), small_config());
        v.as_object_mut().unwrap().insert("bogus".into(), 1.into());
        assert!(serde_json::from_value::<ModelConfig>(v.clone()).is_err());
        v.as_object_mut().unwrap().remove("bogus");
        v.as_object_mut().unwrap().remove("d_h");
        let err = serde_json::from_value::<ModelConfig>(v).unwrap_err().to_string();
        assert!(err.contains("d_h"), "{err}");
    }

    #[test]
    fn full_pipeline_gradients() {
        let cfg = ModelConfig {
            integrator: IntegratorConfig {
                dt: 0.1,
                t_end: 0.2,
                ..Default::default()
            },
            ..small_config()
        };
        let base = with_head(&ModelParams::init(&cfg, 14).unwrap(), 15);
        let noisy = cloud(16, 16).to_tensor();
        let clean = cloud(17, 16).to_tensor();
        let xs: Vec<Tensor> = base.named().into_iter().map(|(_, t)| t).collect();
        let r = crate::tensor::grad_check_many(
            |xs| {
                let p = base.with_tensors(xs.to_vec())?;
                let out = forward_tensor(&p, &cfg, Variant::Full, &noisy)?;
                crate::metrics::supervised_loss(&out, &clean)
            },
            &xs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }
}
