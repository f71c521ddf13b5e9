//! Python bindings for gdflow.

use gdflow::cli::exit_code;
use gdflow::config::RunConfig;
use gdflow::metrics::{self, Metric};
use gdflow::model::{self, ModelConfig, ModelParams, Variant};
use gdflow::pointcloud::{self, CloudFormat, NoiseSpec, Shape};
use gdflow::spectral::{self, ClosedForm, FilterSpec};
use gdflow::{selftest, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn to_py(e: Error) -> PyErr {
    if exit_code(&e) == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type PyRes<T> = PyResult<T>;

/// An unordered set of 3-D points.
#[pyclass(name = "PointCloud", module = "gdflow_py", from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: pointcloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<[f64; 3]>) -> PyRes<Self> {
        Ok(Self {
            inner: pointcloud::PointCloud::new(points).map_err(to_py)?,
        })
    }

    /// Uniform surface samples of `sphere`, `torus`, `cube` or `plane`.
    #[staticmethod]
    #[pyo3(signature = (shape, n, seed=0))]
    fn synth(shape: &str, n: usize, seed: u64) -> PyRes<Self> {
        let shape: Shape = shape.parse().map_err(to_py)?;
        Ok(Self {
            inner: pointcloud::synth(shape, n, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyRes<Self> {
        let fmt = CloudFormat::from_path(&path).map_err(to_py)?;
        Ok(Self {
            inner: pointcloud::load(&path, fmt).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyRes<()> {
        let fmt = CloudFormat::from_path(&path).map_err(to_py)?;
        pointcloud::save(&self.inner, &path, fmt).map_err(to_py)
    }

    /// Gaussian noise with std `sigma` times the bounding-box diagonal.
    #[pyo3(signature = (sigma, seed=0))]
    fn add_noise(&self, sigma: f64, seed: u64) -> PyRes<Self> {
        Ok(Self {
            inner: pointcloud::add_noise(&self.inner, &NoiseSpec::gaussian(sigma, seed)).map_err(to_py)?,
        })
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points().to_vec()
    }

    fn bbox_diagonal(&self) -> f64 {
        self.inner.bbox_diagonal()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(n={})", self.inner.len())
    }
}

/// Dense f64 tensor with reverse-mode gradients.
#[pyclass(name = "Tensor", module = "gdflow_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: gdflow::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad=false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyRes<Self> {
        let t = gdflow::Tensor::new(data, &shape).map_err(to_py)?;
        Ok(Self {
            inner: if requires_grad { t.requires_grad() } else { t },
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn add(&self, other: &PyTensor) -> PyRes<Self> {
        Ok(Self { inner: self.inner.add(&other.inner).map_err(to_py)? })
    }

    fn sub(&self, other: &PyTensor) -> PyRes<Self> {
        Ok(Self { inner: self.inner.sub(&other.inner).map_err(to_py)? })
    }

    fn mul(&self, other: &PyTensor) -> PyRes<Self> {
        Ok(Self { inner: self.inner.mul(&other.inner).map_err(to_py)? })
    }

    fn matmul(&self, other: &PyTensor) -> PyRes<Self> {
        Ok(Self { inner: self.inner.matmul(&other.inner).map_err(to_py)? })
    }

    fn square(&self) -> PyRes<Self> {
        Ok(Self { inner: self.inner.square().map_err(to_py)? })
    }

    fn exp(&self) -> PyRes<Self> {
        Ok(Self { inner: self.inner.exp().map_err(to_py)? })
    }

    fn sum(&self) -> PyRes<Self> {
        Ok(Self { inner: self.inner.sum_all().map_err(to_py)? })
    }

    /// Gradients of this scalar with respect to each tensor in `wrt`.
    fn grad(&self, wrt: Vec<PyTensor>) -> PyRes<Vec<Vec<f64>>> {
        let store = self.inner.backward().map_err(to_py)?;
        Ok(wrt.iter().map(|t| store.get_or_zeros(&t.inner)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// A trained (or freshly initialised) denoiser.
#[pyclass(name = "Model", module = "gdflow_py")]
struct PyModel {
    params: ModelParams,
    cfg: ModelConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters from a JSON model config (the `model` section).
    #[staticmethod]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn init(config_json: Option<&str>, seed: u64) -> PyRes<Self> {
        let cfg: ModelConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        cfg.validate().map_err(to_py)?;
        Ok(Self {
            params: ModelParams::init(&cfg, seed).map_err(to_py)?,
            cfg,
        })
    }

    #[staticmethod]
    fn load(ckpt: PathBuf) -> PyRes<Self> {
        let (params, cfg) = model::load_checkpoint(&ckpt, None).map_err(to_py)?;
        Ok(Self { params, cfg })
    }

    fn save(&self, ckpt: PathBuf) -> PyRes<()> {
        model::save_checkpoint(&ckpt, &self.params, &self.cfg).map_err(to_py)
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serializes")
    }

    /// Denoised cloud, or one cloud per snapshot fraction.
    #[pyo3(signature = (cloud, variant=None, snapshots=None))]
    fn denoise(&self, py: Python<'_>, cloud: &PyPointCloud, variant: Option<&str>, snapshots: Option<Vec<f64>>) -> PyRes<Py<PyAny>> {
        let variant = match variant {
            Some(v) => v.parse::<Variant>().map_err(to_py)?,
            None => self.cfg.variant,
        };
        let fractions = snapshots.clone().unwrap_or_else(|| vec![1.0]);
        let outs = model::forward_snapshots(&self.params, &self.cfg, variant, &cloud.inner.to_tensor(), &fractions)
            .map_err(to_py)?;
        let clouds = outs
            .iter()
            .map(|t| pointcloud::PointCloud::from_tensor(t).map(|inner| PyPointCloud { inner }))
            .collect::<gdflow::Result<Vec<_>>>()
            .map_err(to_py)?;
        match snapshots {
            Some(_) => Ok(clouds.into_pyobject(py)?.into_any().unbind()),
            None => Ok(Py::new(py, clouds.into_iter().next().expect("one output"))?.into_any()),
        }
    }
}

#[pyfunction]
fn chamfer(a: &PyPointCloud, b: &PyPointCloud) -> PyRes<f64> {
    metrics::chamfer(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn emd(a: &PyPointCloud, b: &PyPointCloud) -> PyRes<f64> {
    metrics::emd(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn hausdorff(a: &PyPointCloud, b: &PyPointCloud) -> PyRes<f64> {
    metrics::hausdorff(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn rmsd(a: &PyPointCloud, b: &PyPointCloud) -> PyRes<f64> {
    metrics::rmsd(&a.inner, &b.inner).map_err(to_py)
}

/// Metric report as a dict with keys cd, emd, hd, rmsd, n_ref, n_test, emd_exact.
#[pyfunction]
#[pyo3(signature = (reference, test, metrics="cd,emd,hd,rmsd"))]
fn evaluate<'py>(py: Python<'py>, reference: &PyPointCloud, test: &PyPointCloud, metrics: &str) -> PyRes<Bound<'py, PyDict>> {
    let list = Metric::parse_list(metrics).map_err(to_py)?;
    let r = metrics::evaluate(&reference.inner, &test.inner, &list).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cd", r.cd)?;
    d.set_item("emd", r.emd)?;
    d.set_item("hd", r.hd)?;
    d.set_item("rmsd", r.rmsd)?;
    d.set_item("n_ref", r.n_ref)?;
    d.set_item("n_test", r.n_test)?;
    d.set_item("emd_exact", r.emd_exact)?;
    Ok(d)
}

/// Normalized Bernstein filter response at each λ in `grid`.
#[pyfunction]
fn bernstein_response(theta_raw: Vec<f64>, grid: Vec<f64>) -> PyRes<Vec<f64>> {
    let n = theta_raw.len();
    let spec = FilterSpec::new(gdflow::Tensor::new(theta_raw, &[n]).map_err(to_py)?).map_err(to_py)?;
    grid.iter().map(|l| spec.response(*l).map_err(to_py)).collect()
}

/// Closed-form filter response: ppr, gnn-lf, gnn-hf, chebyshev or vanilla.
#[pyfunction]
fn filter_response(filter: &str, params: Vec<f64>, grid: Vec<f64>) -> PyRes<Vec<f64>> {
    let f: ClosedForm = filter.parse().map_err(to_py)?;
    spectral::closed_form_response(f, &params, &grid).map_err(to_py)
}

/// Trains from a full run config (JSON text). Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config_json, data, val, out=None))]
fn train<'py>(
    py: Python<'py>,
    config_json: &str,
    data: Vec<PyPointCloud>,
    val: Vec<PyPointCloud>,
    out: Option<PathBuf>,
) -> PyRes<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
    let data: Vec<_> = data.into_iter().map(|c| c.inner).collect();
    let val: Vec<_> = val.into_iter().map(|c| c.inner).collect();
    let init = ModelParams::init(&cfg.model, cfg.train.seed).map_err(to_py)?;
    let outcome = py
        .detach(|| gdflow::train::train(&cfg.model, &init, &data, &val, &cfg.train, out.as_deref()))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("initial_val_cd", outcome.initial_val_cd)?;
    d.set_item("best_val_cd", outcome.best_val_cd)?;
    d.set_item("model", Py::new(py, PyModel { params: outcome.best_params, cfg: cfg.model })?)?;
    Ok(d)
}

/// Default run config as JSON text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Runs the built-in checks; returns (passed, report JSON).
#[pyfunction]
#[pyo3(signature = (inject_fault=None))]
fn run_selftest(inject_fault: Option<&str>) -> PyRes<(bool, String)> {
    let r = selftest::run(inject_fault).map_err(to_py)?;
    Ok((r.passed, serde_json::to_string(&r).expect("report serializes")))
}

#[pymodule]
fn gdflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(rmsd, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bernstein_response, m)?)?;
    m.add_function(wrap_pyfunction!(filter_response, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}
