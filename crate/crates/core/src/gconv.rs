//! Micro-step temporal graph convolution: the feature ODE
//! `dZ/dt = σ(B_K(Â(t))·Z·W1 − Z·W2)` integrated with fixed-step RK4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{euclidean_adjacency, geometric_adjacency, MetricParams, SparseOp};
use crate::spectral::{apply_filter, ChannelMixer, FilterSpec};
use crate::tensor::{Tensor, DEFAULT_LEAKY_SLOPE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphRefresh {
    /// Rebuild once per accepted step, from the state at the step start.
    #[default]
    PerStep,
    /// Rebuild at every stage evaluation.
    PerStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub graph_refresh: GraphRefresh,
    /// Apply leaky ReLU to the right-hand side.
    pub activation: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt: 0.1,
            t_end: 1.0,
            graph_refresh: GraphRefresh::PerStep,
            activation: true,
        }
    }
}

const GRID_TOL: f64 = 1e-9;

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("integrator.dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("integrator.T must be >= 0, got {}", self.t_end)));
        }
        let ratio = self.t_end / self.dt;
        if (ratio - ratio.round()).abs() > GRID_TOL * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "integrator.T = {} is not a multiple of dt = {}",
                self.t_end, self.dt
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Step index for a fraction of `T`; errors when it falls between steps.
    pub fn step_of_fraction(&self, fraction: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Argument(format!("snapshot fraction {fraction} outside [0,1]")));
        }
        let pos = fraction * self.t_end / self.dt;
        if (pos - pos.round()).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "snapshot fraction {fraction} is not on the step grid (dt = {}, T = {})",
                self.dt, self.t_end
            )));
        }
        Ok(pos.round() as usize)
    }
}

/// Node features at time `t`; `p` is held fixed during integration.
#[derive(Clone, Debug)]
pub struct OdeState {
    pub t: f64,
    pub z: Tensor,
    pub p: Tensor,
}

/// Vector field evaluated by the integrator.
pub trait Dynamics {
    /// Called with the accepted state at the start of every step.
    fn begin_step(&mut self, _t: f64, _z: &Tensor) -> Result<()> {
        Ok(())
    }

    fn eval(&self, t: f64, z: &Tensor) -> Result<Tensor>;
}

/// Wraps a plain closure `f(t, z)`.
pub struct FnDynamics<F>(pub F);

impl<F> Dynamics for FnDynamics<F>
where
    F: Fn(f64, &Tensor) -> Result<Tensor>,
{
    fn eval(&self, t: f64, z: &Tensor) -> Result<Tensor> {
        (self.0)(t, z)
    }
}

fn ensure_finite(t: &Tensor, step: usize, stage: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, stage })
    }
}

/// Classical four-stage Runge–Kutta update from `(t, z)`.
/// `step` is only used to label divergence errors.
pub fn rk4_step<D: Dynamics + ?Sized>(f: &mut D, t: f64, z: &Tensor, dt: f64, step: usize) -> Result<Tensor> {
    f.begin_step(t, z)?;
    let half = 0.5 * dt;
    let k1 = f.eval(t, z)?;
    ensure_finite(&k1, step, 1)?;
    let k2 = f.eval(t + half, &z.add(&k1.scale(half)?)?)?;
    ensure_finite(&k2, step, 2)?;
    let k3 = f.eval(t + half, &z.add(&k2.scale(half)?)?)?;
    ensure_finite(&k3, step, 3)?;
    let k4 = f.eval(t + dt, &z.add(&k3.scale(dt)?)?)?;
    ensure_finite(&k4, step, 4)?;
    let incr = k1.add(&k2.add(&k3)?.scale(2.0)?)?.add(&k4)?.scale(dt / 6.0)?;
    let next = z.add(&incr)?;
    ensure_finite(&next, step, 4)?;
    Ok(next)
}

/// Integrates to `T`, returning the states at the requested step indices
/// (ascending, duplicates allowed).
pub fn integrate_steps<D: Dynamics + ?Sized>(f: &mut D, z0: &Tensor, cfg: &IntegratorConfig, at: &[usize]) -> Result<Vec<(f64, Tensor)>> {
    cfg.validate()?;
    let steps = cfg.steps();
    if let Some(bad) = at.iter().find(|&&s| s > steps) {
        return Err(Error::Argument(format!("snapshot step {bad} beyond {steps} steps")));
    }
    let mut out = Vec::with_capacity(at.len());
    let mut z = z0.clone();
    let mut wanted = at.iter().peekable();
    for n in 0..=steps {
        let t = n as f64 * cfg.dt;
        while wanted.peek().is_some_and(|&&s| s == n) {
            out.push((t, z.clone()));
            wanted.next();
        }
        if n == steps {
            break;
        }
        z = rk4_step(f, t, &z, cfg.dt, n)?;
    }
    Ok(out)
}

/// How the propagation graph is obtained at each refresh.
#[derive(Clone, Debug)]
pub enum GraphSource {
    /// Learned-metric graph on `(P, Z)`.
    Geometric,
    /// Euclidean kernel on `[P, αZ]`.
    Euclidean,
    /// A frozen operator, independent of the state.
    Fixed(SparseOp),
}

/// Everything the right-hand side needs besides the state.
#[derive(Clone, Debug)]
pub struct GConvParams {
    pub metric: MetricParams,
    pub filter: FilterSpec,
    /// `None` means `W1 = I`, `W2 = 0`.
    pub mixer: Option<ChannelMixer>,
    pub k: usize,
    pub graph: GraphSource,
    /// `false` replaces `B_K(Â)` with `Â`.
    pub spectral: bool,
}

impl GConvParams {
    pub fn build_graph(&self, p: &Tensor, z: &Tensor) -> Result<SparseOp> {
        match &self.graph {
            GraphSource::Geometric => Ok(geometric_adjacency(p, z, &self.metric, self.k)?.op),
            GraphSource::Euclidean => {
                let x = Tensor::concat(&[p, &z.mul(&self.metric.alpha()?)?], 1)?;
                Ok(euclidean_adjacency(&x, self.k)?.op)
            }
            GraphSource::Fixed(op) => Ok(op.clone()),
        }
    }

    /// `B_K(Â)·Z·W1 − Z·W2` (or its ablated forms), before activation.
    pub fn linear_rhs(&self, op: &SparseOp, z: &Tensor) -> Result<Tensor> {
        let filtered = if self.spectral {
            apply_filter(&self.filter, op, z)?
        } else {
            op.apply(z)?
        };
        match &self.mixer {
            Some(m) => filtered.matmul(&m.w1()?)?.sub(&z.matmul(&m.w2()?)?),
            None => Ok(filtered),
        }
    }

    pub fn rhs_with(&self, op: &SparseOp, z: &Tensor, activation: bool) -> Result<Tensor> {
        let r = self.linear_rhs(op, z)?;
        if activation {
            r.leaky_relu(DEFAULT_LEAKY_SLOPE)
        } else {
            Ok(r)
        }
    }

    /// Right-hand side at `state`, building the graph from it.
    pub fn rhs(&self, state: &OdeState, activation: bool) -> Result<Tensor> {
        let op = self.build_graph(&state.p, &state.z)?;
        self.rhs_with(&op, &state.z, activation)
    }
}

/// Graph-convolution dynamics honouring the refresh policy.
pub struct GConvDynamics<'a> {
    params: &'a GConvParams,
    p: Tensor,
    cfg: IntegratorConfig,
    current: Option<SparseOp>,
    pub graph_builds: usize,
}

impl<'a> GConvDynamics<'a> {
    pub fn new(params: &'a GConvParams, p: Tensor, cfg: IntegratorConfig) -> Self {
        GConvDynamics {
            params,
            p,
            cfg,
            current: None,
            graph_builds: 0,
        }
    }
}

impl Dynamics for GConvDynamics<'_> {
    fn begin_step(&mut self, _t: f64, z: &Tensor) -> Result<()> {
        if self.cfg.graph_refresh == GraphRefresh::PerStep {
            self.current = Some(self.params.build_graph(&self.p, z)?);
            self.graph_builds += 1;
        }
        Ok(())
    }

    fn eval(&self, _t: f64, z: &Tensor) -> Result<Tensor> {
        match (&self.current, self.cfg.graph_refresh) {
            (Some(op), GraphRefresh::PerStep) => self.params.rhs_with(op, z, self.cfg.activation),
            _ => {
                let op = self.params.build_graph(&self.p, z)?;
                self.params.rhs_with(&op, z, self.cfg.activation)
            }
        }
    }
}

pub fn integrate(state0: &OdeState, params: &GConvParams, cfg: &IntegratorConfig) -> Result<OdeState> {
    let steps = {
        cfg.validate()?;
        cfg.steps()
    };
    let mut snaps = integrate_states(state0, params, cfg, &[steps])?;
    Ok(snaps.pop().expect("one snapshot"))
}

/// States at the given fractions of `T` (each a multiple of `dt/T`).
pub fn integrate_with_snapshots(state0: &OdeState, params: &GConvParams, cfg: &IntegratorConfig, fractions: &[f64]) -> Result<Vec<OdeState>> {
    cfg.validate()?;
    let mut order: Vec<(usize, usize)> = fractions
        .iter()
        .enumerate()
        .map(|(i, f)| Ok((cfg.step_of_fraction(*f)?, i)))
        .collect::<Result<_>>()?;
    order.sort_unstable();
    let steps: Vec<usize> = order.iter().map(|o| o.0).collect();
    let states = integrate_states(state0, params, cfg, &steps)?;
    let mut out: Vec<Option<OdeState>> = vec![None; fractions.len()];
    for ((_, slot), st) in order.into_iter().zip(states) {
        out[slot] = Some(st);
    }
    Ok(out.into_iter().map(|s| s.expect("filled")).collect())
}

fn integrate_states(state0: &OdeState, params: &GConvParams, cfg: &IntegratorConfig, steps: &[usize]) -> Result<Vec<OdeState>> {
    let mut dynamics = GConvDynamics::new(params, state0.p.clone(), *cfg);
    let t0 = state0.t;
    Ok(integrate_steps(&mut dynamics, &state0.z, cfg, steps)?
        .into_iter()
        .map(|(t, z)| OdeState {
            t: t0 + t,
            z,
            p: state0.p.clone(),
        })
        .collect())
}

pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Per-column zero mean, unit variance over the node axis.
pub fn standardize_columns(z: &Tensor) -> Result<Tensor> {
    let centered = z.sub(&z.mean(0, true)?)?;
    let std = centered.square()?.mean(0, true)?.add_scalar(STANDARDIZE_EPS)?.sqrt()?;
    centered.div(&std)
}

/// Discrete baseline: per layer `Z ← σ(norm(Â(Z)·Z·Θ_l))` with the graph
/// rebuilt from the current features.
pub fn integer_step_baseline_with<G>(z0: &Tensor, thetas: &[Tensor], standardize: bool, mut graph: G) -> Result<Tensor>
where
    G: FnMut(&Tensor) -> Result<SparseOp>,
{
    let mut z = z0.clone();
    for theta in thetas {
        let op = graph(&z)?;
        let mut next = op.apply(&z)?.matmul(theta)?;
        if standardize {
            next = standardize_columns(&next)?;
        }
        z = next.leaky_relu(DEFAULT_LEAKY_SLOPE)?;
    }
    Ok(z)
}

pub fn integer_step_baseline(z0: &Tensor, p: &Tensor, params: &GConvParams, thetas: &[Tensor]) -> Result<Tensor> {
    integer_step_baseline_with(z0, thetas, true, |z| params.build_graph(p, z))
}
