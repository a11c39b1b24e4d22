//! Python bindings: model building and inference, cost accounting, the
//! channel permutations and gradient checks.

use std::path::PathBuf;

use augshuffle::analytics::{self, CostModel as CoreCostModel};
use augshuffle::params::Parameters;
use augshuffle::train::gradcheck as checks;
use augshuffle::{checkpoint, ArchConfig, Error, Family, SplitRatio, Width};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Hand serde values to Python through the `json` module.
fn to_object<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn width_of(w: f64) -> PyResult<Width> {
    Width::ALL
        .into_iter()
        .find(|x| x.multiplier() == w)
        .ok_or_else(|| PyValueError::new_err(format!("width must be 0.5, 1.0 or 1.5, got {w}")))
}

fn config(family: &str, width: f64, classes: usize, ratio: Option<f64>) -> PyResult<ArchConfig> {
    let family: Family = family.parse().map_err(to_py)?;
    let ratio = ratio.map(SplitRatio::new).transpose().map_err(to_py)?;
    ArchConfig::new(family, width_of(width)?, classes, ratio).map_err(to_py)
}

/// Dense `(N, C, H, W)` float32 tensor.
#[pyclass(module = "augshuffle", skip_from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: augshuffle::Tensor<f32>,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: augshuffle::Tensor::new(shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: [usize; 4]) -> Self {
        Self {
            inner: augshuffle::Tensor::zeros(shape),
        }
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.inner.shape()
    }

    /// Flat values in `N, C, H, W` order.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn channel(&self, n: usize, c: usize) -> PyResult<Vec<f32>> {
        let [bn, bc, _, _] = self.inner.shape();
        if n >= bn || c >= bc {
            return Err(PyValueError::new_err(format!(
                "index ({n}, {c}) out of range"
            )));
        }
        Ok(self.inner.channel(n, c).to_vec())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(inner: augshuffle::Tensor<f32>) -> Tensor {
    Tensor { inner }
}

/// `(bank, branch)`.
#[pyfunction]
#[pyo3(signature = (x, r = 0.375))]
fn channel_split(x: &Tensor, r: f64) -> PyResult<(Tensor, Tensor)> {
    let r = SplitRatio::new(r).map_err(to_py)?;
    let (bank, branch) = augshuffle::channel_split(&x.inner, r).map_err(to_py)?;
    Ok((wrap(bank), wrap(branch)))
}

#[pyfunction]
fn channel_shuffle(x: &Tensor) -> PyResult<Tensor> {
    augshuffle::channel_shuffle(&x.inner)
        .map(wrap)
        .map_err(to_py)
}

/// `(branch2, bank2)`.
#[pyfunction]
fn channel_crossover(branch: &Tensor, bank: &Tensor) -> PyResult<(Tensor, Tensor)> {
    let (b, k) = augshuffle::channel_crossover(&branch.inner, &bank.inner).map_err(to_py)?;
    Ok((wrap(b), wrap(k)))
}

/// Closed-form cost of one augmented block.
#[pyclass(module = "augshuffle")]
struct CostModel {
    inner: CoreCostModel,
}

#[pymethods]
impl CostModel {
    #[new]
    #[pyo3(signature = (m, df, dk = 3, r = 0.375))]
    fn new(m: usize, df: usize, dk: usize, r: f64) -> PyResult<Self> {
        let r = SplitRatio::new(r).map_err(to_py)?;
        Ok(Self {
            inner: CoreCostModel::new(m, df, dk, r).map_err(to_py)?,
        })
    }

    fn block_cost(&self) -> u64 {
        self.inner.block_cost()
    }

    fn block_params(&self) -> u64 {
        self.inner.block_params()
    }

    /// `(exact, approx)`.
    fn cost_ratio(&self) -> (f64, f64) {
        self.inner.cost_ratio()
    }

    fn params_ratio(&self) -> (f64, f64) {
        self.inner.params_ratio()
    }
}

#[pyclass(module = "augshuffle")]
struct Model {
    inner: augshuffle::Model<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (family = "aug", width = 1.0, classes = 10, ratio = None, seed = 0))]
    fn new(
        family: &str,
        width: f64,
        classes: usize,
        ratio: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = config(family, width, classes, ratio)?;
        Ok(Self {
            inner: augshuffle::Model::build(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, None).map_err(to_py)
    }

    #[getter]
    fn tag(&self) -> String {
        self.inner.config.tag()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.learnable_count()
    }

    /// Inference-mode logits, `(N, classes, 1, 1)`.
    fn forward(&self, x: &Tensor) -> PyResult<Tensor> {
        self.inner.forward(&x.inner).map(wrap).map_err(to_py)
    }

    fn predict(&self, x: &Tensor) -> PyResult<Vec<usize>> {
        self.inner.predict(&x.inner).map_err(to_py)
    }

    /// Layer rows with output size, kernel, stride, repeat and channels.
    fn architecture<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.architecture().map_err(to_py)?)
    }

    /// Per-layer and per-block multiply-adds and parameters.
    fn count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &analytics::count_network(&self.inner).map_err(to_py)?)
    }
}

/// Count a model without keeping it.
#[pyfunction]
#[pyo3(signature = (family = "aug", width = 1.0, classes = 10, ratio = None))]
fn count<'py>(
    py: Python<'py>,
    family: &str,
    width: f64,
    classes: usize,
    ratio: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = analytics::count_config(&config(family, width, classes, ratio)?).map_err(to_py)?;
    to_object(py, &report)
}

/// One row per split ratio for the augmented network.
#[pyfunction]
#[pyo3(signature = (width = 1.5, classes = 10, ratios = vec![0.125, 0.25, 0.375]))]
fn sweep<'py>(
    py: Python<'py>,
    width: f64,
    classes: usize,
    ratios: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config("aug", width, classes, None)?;
    let ratios = ratios
        .into_iter()
        .map(SplitRatio::new)
        .collect::<augshuffle::Result<Vec<_>>>()
        .map_err(to_py)?;
    to_object(py, &analytics::sweep_ratio(&cfg, &ratios).map_err(to_py)?)
}

/// Finite-difference checks of every differentiable op.
#[pyfunction]
#[pyo3(signature = (seed = 0, network = false))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, network: bool) -> PyResult<Bound<'py, PyAny>> {
    let report = checks::run(checks::GradcheckOptions {
        seed,
        network,
        ..Default::default()
    })
    .map_err(to_py)?;
    to_object(py, &report)
}

#[pymodule(name = "augshuffle")]
fn augshuffle_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<CostModel>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(channel_split, m)?)?;
    m.add_function(wrap_pyfunction!(channel_shuffle, m)?)?;
    m.add_function(wrap_pyfunction!(channel_crossover, m)?)?;
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
