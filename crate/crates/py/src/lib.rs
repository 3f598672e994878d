//! Python bindings: networks, tangent kernels, covariance utilities and the
//! experiment drivers. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use rnf_core::covariance::{self, CovarianceSpec};
use rnf_core::data::{load_split, write_record, ExperimentRecord};
use rnf_core::experiments::{
    grid, grid_record, layered, ntk_check, ntk_check_record, regress_record, regress_sweep, run_sample, stability,
    stability_record, GridConfig, NtkCheckConfig, RegressConfig, SampleConfig, StabilityConfig,
};
use rnf_core::fields::{self, ReceptiveFieldSpec};
use rnf_core::perturb;
use rnf_core::seed::{derive_seed as core_derive_seed, rng_from_seed};
use rnf_core::tangent::empirical_ntk;
use rnf_core::{ErrorKind, KernelMode, Mat, ModelConfig, NetworkModel, RnfError};
use serde_json::Value;

fn py_err(e: RnfError) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(msg),
        ErrorKind::Numeric => PyArithmeticError::new_err(msg),
        ErrorKind::Io => PyOSError::new_err(msg),
    }
}

fn to_mat(rows: &[Vec<f64>]) -> PyResult<Mat<f64>> {
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Mat::from_fn(rows.len(), n_cols, |i, j| rows[i][j]))
}

fn from_mat(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn parse_mode(mode: &str) -> PyResult<KernelMode> {
    match mode {
        "full" => Ok(KernelMode::Full),
        "block_diagonal" | "block-diagonal" => Ok(KernelMode::BlockDiagonal),
        "scalar" => Ok(KernelMode::Scalar),
        other => Err(PyValueError::new_err(format!("unknown kernel mode {other:?}"))),
    }
}

fn covariance_spec(family: &str, sigma_s: f64, nu: f64, wrap_terms: u32) -> PyResult<CovarianceSpec> {
    let spec = match family {
        "gaussian" => CovarianceSpec::gaussian(sigma_s),
        "matern" => CovarianceSpec::matern(sigma_s, nu),
        "independent" => CovarianceSpec::independent(),
        other => return Err(PyValueError::new_err(format!("unknown covariance family {other:?}"))),
    };
    Ok(spec.with_wrap_terms(wrap_terms))
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (v.to_string(),))?.unbind())
}

fn from_py(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A discretized network drawn from its initialization distribution.
#[pyclass(name = "Network", module = "pyrnf")]
struct Network {
    inner: NetworkModel,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (model_id, input_dim=784, width=2048, seed=0, sigma_r=None, sigma_s=None, sigma_w=1.0, sigma_b=0.1, nu=0.5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model_id: u8,
        input_dim: usize,
        width: usize,
        seed: u64,
        sigma_r: Option<f64>,
        sigma_s: Option<f64>,
        sigma_w: f64,
        sigma_b: f64,
        nu: f64,
    ) -> PyResult<Self> {
        let mut cfg = ModelConfig::new(model_id).with_width(width);
        cfg.input_dim = input_dim;
        cfg.sigma.sigma_r = sigma_r;
        cfg.sigma.sigma_s = sigma_s;
        cfg.sigma.sigma_w = sigma_w;
        cfg.sigma.sigma_b = sigma_b;
        cfg.sigma.nu = nu;
        Ok(Self { inner: NetworkModel::build(&cfg, seed).map_err(py_err)? })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    /// Outputs for the rows of `x`.
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_mat(&x)?;
        let f = py.detach(|| self.inner.predict(x.as_ref())).map_err(py_err)?;
        Ok(from_mat(&f))
    }

    /// Empirical tangent kernel between the rows of `x` and of `y` (or `x`).
    /// `mode` is "full", "block_diagonal" or "scalar".
    #[pyo3(signature = (x, y=None, mode="full"))]
    fn ntk(&self, py: Python<'_>, x: Vec<Vec<f64>>, y: Option<Vec<Vec<f64>>>, mode: &str) -> PyResult<Vec<Vec<f64>>> {
        let mode = parse_mode(mode)?;
        let x = to_mat(&x)?;
        let y = y.map(|y| to_mat(&y)).transpose()?;
        let k = py
            .detach(|| empirical_ntk(&self.inner, x.as_ref(), y.as_ref().map(|y| y.as_ref()), mode))
            .map_err(py_err)?;
        Ok(from_mat(&k.entries))
    }

    /// Mean relative kernel distance of the rows of `s` from `x`, and the
    /// number of clamped radicands.
    fn relative_distance(&self, py: Python<'_>, x: Vec<f64>, s: Vec<Vec<f64>>) -> PyResult<(f64, usize)> {
        let s = to_mat(&s)?;
        let d = py.detach(|| perturb::average_relative_distance(&self.inner, &x, s.as_ref())).map_err(py_err)?;
        Ok((d.mean, d.clamped))
    }

    /// Effective weights `W` of the first trainable layer, one row per neuron.
    fn first_layer_weights(&self) -> PyResult<Vec<Vec<f64>>> {
        let p = (0..self.inner.n_layers())
            .find_map(|l| self.inner.params(l))
            .ok_or_else(|| PyValueError::new_err("network has no trainable layer"))?;
        Ok(from_mat(&p.w().transpose().to_owned()))
    }

    fn __repr__(&self) -> String {
        match self.inner.config() {
            Some(c) => format!(
                "Network(model_id={}, input_dim={}, width={}, seed={})",
                c.model_id,
                c.input_dim,
                c.width,
                self.inner.seed()
            ),
            None => format!("Network(layers={}, seed={})", self.inner.n_layers(), self.inner.seed()),
        }
    }
}

/// Kernel value at torus distance `dist`.
#[pyfunction]
#[pyo3(signature = (dist, family="gaussian", sigma_s=0.01, nu=0.5, wrap_terms=3))]
fn covariance_value(dist: f64, family: &str, sigma_s: f64, nu: f64, wrap_terms: u32) -> PyResult<f64> {
    covariance::covariance_value(dist, &covariance_spec(family, sigma_s, nu, wrap_terms)?).map_err(py_err)
}

/// `n × n` lattice covariance on the torus.
#[pyfunction]
#[pyo3(signature = (n, family="gaussian", sigma_s=0.01, nu=0.5, wrap_terms=3))]
fn discrete_covariance(n: usize, family: &str, sigma_s: f64, nu: f64, wrap_terms: u32) -> PyResult<Vec<Vec<f64>>> {
    let m = covariance::discrete_covariance(n, &covariance_spec(family, sigma_s, nu, wrap_terms)?).map_err(py_err)?;
    Ok(from_mat(&m))
}

/// Closed-form square-root factor `A` with `A·Aᵀ ≈ Σ`.
#[pyfunction]
#[pyo3(signature = (n, family="gaussian", sigma_s=0.01, nu=0.5))]
fn factor_matrix(n: usize, family: &str, sigma_s: f64, nu: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = covariance::factor_matrix(n, &covariance_spec(family, sigma_s, nu, 0)?).map_err(py_err)?;
    Ok(from_mat(&m))
}

/// `‖Σ − A·Aᵀ‖_F / ‖Σ‖_F`.
#[pyfunction]
fn relative_residual(sigma: Vec<Vec<f64>>, a: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(covariance::relative_residual(&to_mat(&sigma)?, &to_mat(&a)?))
}

/// Receptive-field mask, one row per output neuron (`n_out × n_in`);
/// `family` is "gaussian", "mexican_hat" or "none".
#[pyfunction]
#[pyo3(signature = (n_out, n_in, family="gaussian", sigma_r=0.5))]
fn receptive_mask(n_out: usize, n_in: usize, family: &str, sigma_r: f64) -> PyResult<Vec<Vec<f64>>> {
    let spec = match family {
        "gaussian" => ReceptiveFieldSpec::gaussian(sigma_r),
        "mexican_hat" => ReceptiveFieldSpec::mexican_hat(sigma_r),
        "none" => ReceptiveFieldSpec::none(),
        other => return Err(PyValueError::new_err(format!("unknown receptive field {other:?}"))),
    };
    let r = fields::receptive_mask(n_out, n_in, &spec).map_err(py_err)?;
    Ok(from_mat(&r.transpose().to_owned()))
}

/// Child seed for a named stream.
#[pyfunction]
fn derive_seed(root: u64, path: &str) -> u64 {
    core_derive_seed(root, path)
}

/// Elastically deformed copy of a `rows × cols` image (row-major).
#[pyfunction]
#[pyo3(signature = (image, rows, cols, alpha, sigma_def=4.0, seed=0))]
fn elastic_deform(image: Vec<f64>, rows: usize, cols: usize, alpha: f64, sigma_def: f64, seed: u64) -> PyResult<Vec<f64>> {
    perturb::elastic_deform(&image, rows, cols, alpha, sigma_def, &mut rng_from_seed(seed)).map_err(py_err)
}

/// Image plus clamped Gaussian pixel noise.
#[pyfunction]
#[pyo3(signature = (image, sigma, seed=0))]
fn apply_noise(image: Vec<f64>, sigma: f64, seed: u64) -> PyResult<Vec<f64>> {
    perturb::apply_noise(&image, sigma, &mut rng_from_seed(seed)).map_err(py_err)
}

/// `(images, labels)` of the training (or test) split, optionally the first `limit`.
#[pyfunction]
#[pyo3(signature = (data_dir, train=true, limit=None))]
fn load_mnist(data_dir: PathBuf, train: bool, limit: Option<usize>) -> PyResult<(Vec<Vec<f64>>, Vec<u8>)> {
    let ds = load_split(&data_dir, train).map_err(py_err)?;
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let images = (0..n).map(|i| (0..ds.dim()).map(|j| ds.images[(i, j)]).collect()).collect();
    Ok((images, ds.labels[..n].to_vec()))
}

fn record_json(rec: &ExperimentRecord) -> PyResult<Value> {
    let mut tables = serde_json::Map::new();
    for t in &rec.tables {
        tables.insert(t.name.clone(), serde_json::json!({ "header": t.header, "rows": t.rows }));
    }
    let manifest = serde_json::to_value(&rec.manifest).map_err(|e| py_err(e.into()))?;
    Ok(serde_json::json!({ "manifest": manifest, "tables": tables }))
}

fn run_command(command: &str, patch: Option<Value>, seed: u64, data_dir: &std::path::Path) -> Result<ExperimentRecord, RnfError> {
    let load = || load_split(data_dir, true);
    Ok(match command {
        "sample" => run_sample(&layered(SampleConfig::default(), patch)?, seed)?,
        "ntk-check" => {
            let cfg = layered(NtkCheckConfig::default(), patch)?;
            let (split, runs) = ntk_check(&load()?, &cfg, seed)?;
            ntk_check_record(&cfg, seed, &split, &runs)?
        }
        "regress" | "noise" => {
            let defaults = if command == "noise" { RegressConfig::noise_default() } else { RegressConfig::default() };
            let cfg = layered(defaults, patch)?;
            let cells = regress_sweep(&load()?, &cfg, seed, |_| {})?;
            regress_record(command, &cfg, seed, &cells)?
        }
        "stability" => {
            let cfg = layered(StabilityConfig::default(), patch)?;
            stability_record(&cfg, seed, &stability(&load()?, &cfg, seed)?)?
        }
        "grid" => {
            let cfg = layered(GridConfig::default(), patch)?;
            grid_record(&cfg, seed, &grid(&load()?, &cfg, seed)?)?
        }
        other => return Err(RnfError::Config(format!("unknown command {other:?}"))),
    })
}

/// Run an experiment driver, as the `rnf` CLI does, and return
/// `{"manifest": ..., "tables": {name: {"header", "rows"}}}`.
///
/// `config` is a partial configuration overlaid on the command defaults.
/// With `out_dir` the CSVs and manifest are also written there.
#[pyfunction]
#[pyo3(signature = (command, config=None, seed=0, data_dir=PathBuf::from("data/mnist"), out_dir=None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: Option<&Bound<'_, PyAny>>,
    seed: u64,
    data_dir: PathBuf,
    out_dir: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let patch = config.map(|c| from_py(py, c)).transpose()?;
    let rec = py.detach(|| run_command(command, patch, seed, &data_dir)).map_err(py_err)?;
    if let Some(dir) = out_dir {
        write_record(&rec, &dir).map_err(py_err)?;
    }
    to_py(py, &record_json(&rec)?)
}

#[pymodule]
fn pyrnf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(covariance_value, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(factor_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(relative_residual, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_mask, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(elastic_deform, m)?)?;
    m.add_function(wrap_pyfunction!(apply_noise, m)?)?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
