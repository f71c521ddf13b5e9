//! Optimisation loop: Adam, plateau schedule, patch batching, validation,
//! checkpoints and the CSV log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{chamfer, supervised_loss, unsupervised_loss, REPULSION_WEIGHT};
use crate::model::{forward, forward_tensor, save_checkpoint, ModelConfig, ModelParams};
use crate::pointcloud::{add_noise, patch_indices, NoiseSpec, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    /// Validations without improvement before the rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Noise std range, relative to each cloud's bounding-box diagonal.
    pub sigma_range: [f64; 2],
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Points per training patch; smaller clouds are used whole.
    pub patch_size: usize,
    /// Validate every this many iterations (and after the last one).
    pub val_every: usize,
    /// Relative noise std of the fixed validation inputs.
    pub val_sigma: f64,
    /// Global gradient norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-3,
            lr_min: 1e-6,
            plateau_patience: 5,
            plateau_factor: 0.5,
            batch_size: 4,
            iterations: 200,
            sigma_range: [0.01, 0.03],
            loss_mode: LossMode::Supervised,
            seed: 0,
            patch_size: 1024,
            val_every: 20,
            val_sigma: 0.02,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_init > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!("train: need 0 < lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("train.plateau_factor must be in (0,1), got {}", self.plateau_factor));
        }
        let [lo, hi] = self.sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("train.sigma_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.val_every == 0 {
            return bad("train.batch_size, patch_size and val_every must be >= 1".into());
        }
        if !(self.val_sigma >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("train.val_sigma and grad_clip must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("train: adam betas must be in [0,1) and adam_eps > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update. Errors name the first parameter with a
/// non-finite gradient.
pub fn adam_step(
    params: &[(String, Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<Vec<Tensor>> {
    if grads.len() != params.len() {
        return Err(Error::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::shape("adam_step", format!("{name}: {} values, {} grads", p.numel(), g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                iteration: state.step as usize + 1,
                msg: format!("non-finite gradient for parameter {name}"),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    params
        .iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .map(|(((_, p), g), (m, v))| {
            let data = p
                .data()
                .iter()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&x, &g), (m, v))| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    x - lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps)
                })
                .collect();
            Tensor::new(data, p.shape())
        })
        .collect()
}

/// Relative improvement needed to reset the plateau counter.
pub const PLATEAU_REL_IMPROVEMENT: f64 = 1e-6;

/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub lr: f64,
    best: f64,
    bad: usize,
    patience: usize,
    factor: f64,
    lr_min: f64,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Plateau {
            lr: cfg.lr_init,
            best: f64::INFINITY,
            bad: 0,
            patience: cfg.plateau_patience,
            factor: cfg.plateau_factor,
            lr_min: cfg.lr_min,
        }
    }

    /// Records a validation loss and returns the rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - PLATEAU_REL_IMPROVEMENT) || self.best == f64::INFINITY {
            self.best = self.best.min(loss);
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr = (self.lr * self.factor).max(self.lr_min);
                self.bad = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a validation history.
pub fn plateau_scheduler(history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut p = Plateau::new(cfg);
    history.iter().fold(cfg.lr_init, |_, &l| p.observe(l))
}

/// Global L2 rescaling to at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    /// Absent on the initial validation row.
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_cd: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,loss,lr,val_cd\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{}", r.iter, opt(r.loss), r.lr, opt(r.val_cd));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub best_val_cd: f64,
    pub initial_val_cd: f64,
    pub log: Vec<LogRow>,
}

/// Noisy inputs for validation, fixed for the whole run.
pub fn validation_pairs(val: &[PointCloud], sigma: f64, seed: u64) -> Result<Vec<(PointCloud, PointCloud)>> {
    val.iter()
        .enumerate()
        .map(|(i, clean)| {
            let noisy = add_noise(clean, &NoiseSpec::gaussian(sigma, stream_seed(seed, u64::MAX, i as u64)))?;
            Ok((noisy, clean.clone()))
        })
        .collect()
}

/// Mean CD between denoised validation inputs and their clean versions.
pub fn validation_cd(pairs: &[(PointCloud, PointCloud)], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let cds = pairs
        .par_iter()
        .map(|(noisy, clean)| chamfer(&forward(noisy, params, cfg)?, clean))
        .collect::<Result<Vec<f64>>>()?;
    Ok(cds.iter().sum::<f64>() / cds.len() as f64)
}

/// Independent seed for (iteration, item), derived from the master seed.
fn stream_seed(seed: u64, iter: u64, item: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter.wrapping_mul(1 << 20).wrapping_add(item));
    rng.random()
}

/// Clean and noisy patch for one batch item.
fn sample_item(data: &[PointCloud], tcfg: &TrainConfig, iter: usize, item: usize) -> Result<(PointCloud, PointCloud, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(tcfg.seed, iter as u64, item as u64));
    let cloud = &data[rng.random_range(0..data.len())];
    let [lo, hi] = tcfg.sigma_range;
    let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let noisy = add_noise(cloud, &NoiseSpec::gaussian(sigma, rng.random()))?;
    let std = sigma * cloud.bbox_diagonal();
    if cloud.len() <= tcfg.patch_size {
        return Ok((cloud.clone(), noisy, std));
    }
    let idx = patch_indices(cloud, rng.random_range(0..cloud.len()), tcfg.patch_size)?;
    Ok((cloud.select(&idx)?, noisy.select(&idx)?, std))
}

fn item_loss(params: &ModelParams, cfg: &ModelConfig, tcfg: &TrainConfig, clean: &PointCloud, noisy: &PointCloud, std: f64) -> Result<Tensor> {
    let out = forward_tensor(params, cfg, cfg.variant, &noisy.to_tensor())?;
    match tcfg.loss_mode {
        LossMode::Supervised => supervised_loss(&out, &clean.to_tensor()),
        // a noise-free sample still needs a positive prior width
        LossMode::Unsupervised => unsupervised_loss(&out, &noisy.to_tensor(), std.max(1e-12), REPULSION_WEIGHT, cfg.k),
    }
}

/// Trains from `init`. With `out` set, writes `out/` (final), `out/best/`
/// and `out/train_log.csv`.
pub fn train(
    cfg: &ModelConfig,
    init: &ModelParams,
    data: &[PointCloud],
    val: &[PointCloud],
    tcfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must be nonempty".into()));
    }
    let adam = AdamConfig {
        beta1: tcfg.adam_beta1,
        beta2: tcfg.adam_beta2,
        eps: tcfg.adam_eps,
    };
    let pairs = validation_pairs(val, tcfg.val_sigma, tcfg.seed)?;
    let mut params = init.clone();
    let mut sched = Plateau::new(tcfg);
    let mut state = AdamState::default();
    let initial_val_cd = validation_cd(&pairs, &params, cfg)?;
    let mut best_val_cd = initial_val_cd;
    let mut best_params = params.clone();
    let mut log = vec![LogRow {
        iter: 0,
        loss: None,
        lr: sched.lr,
        val_cd: Some(initial_val_cd),
    }];
    sched.observe(initial_val_cd);
    if let Some(dir) = out {
        save_checkpoint(&dir.join("best"), &best_params, cfg)?;
    }

    for iter in 1..=tcfg.iterations {
        let trainable = params.trainable();
        let leaves = trainable.named();
        let items = (0..tcfg.batch_size)
            .into_par_iter()
            .map(|item| {
                let (clean, noisy, std) = sample_item(data, tcfg, iter, item)?;
                let loss = item_loss(&trainable, cfg, tcfg, &clean, &noisy, std)?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::Training { iteration: iter, msg: format!("non-finite loss {value}") });
                }
                let g = loss.backward()?;
                Ok((value, leaves.iter().map(|(_, t)| g.get_or_zeros(t)).collect::<Vec<_>>()))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Training { .. } => e,
                other => Error::Training { iteration: iter, msg: other.to_string() },
            })?;
        let b = items.len() as f64;
        let loss = items.iter().map(|(v, _)| v).sum::<f64>() / b;
        let mut grads: Vec<Vec<f64>> = leaves.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for (_, g) in &items {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x / b);
            }
        }
        clip_grad_norm(&mut grads, tcfg.grad_clip);
        let lr = sched.lr;
        let updated = adam_step(&leaves, &grads, &mut state, lr, &adam).map_err(|e| match e {
            Error::Training { msg, .. } => Error::Training { iteration: iter, msg },
            other => other,
        })?;
        params = params.with_tensors(updated).map_err(|e| Error::Training { iteration: iter, msg: e.to_string() })?;

        let mut row = LogRow { iter, loss: Some(loss), lr, val_cd: None };
        if iter % tcfg.val_every == 0 || iter == tcfg.iterations {
            let v = validation_cd(&pairs, &params, cfg)?;
            row.val_cd = Some(v);
            if v < best_val_cd {
                best_val_cd = v;
                best_params = params.clone();
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best"), &best_params, cfg)?;
                }
            }
            sched.observe(v);
        }
        log.push(row);
    }

    if let Some(dir) = out {
        save_checkpoint(dir, &params, cfg)?;
        let path = dir.join("train_log.csv");
        fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_val_cd,
        initial_val_cd,
        log,
    })
}
