//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kantize::cost::Tabulation;
use kantize::data::{load_mnist, resolve_data_dir, synthetic_dataset, Split, SyntheticKind};
use kantize::explore::{pareto_front as front, run_sweep, SweepMode, SweepSpec};
use kantize::model::{load_model, save_model};
use kantize::tabulation::build_bspline_lut;
use kantize::{
    ActRangePolicy, ArchDescriptor, CostReport, EvalMode, KanError, Matrix, PreparedModel, QuantConfig,
    SplineTableSet, TrainConfig,
};

fn err(e: KanError) -> PyErr {
    match e.root() {
        KanError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[pyclass(name = "GridSpec", module = "kantize", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid(kantize::GridSpec);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (intervals, degree, lo = -1.0, hi = 1.0))]
    fn new(intervals: usize, degree: usize, lo: f64, hi: f64) -> PyResult<Self> {
        kantize::GridSpec::new(intervals, degree, lo, hi).map(Self).map_err(err)
    }

    #[getter]
    fn intervals(&self) -> usize {
        self.0.intervals()
    }

    #[getter]
    fn degree(&self) -> usize {
        self.0.degree()
    }

    #[getter]
    fn domain(&self) -> (f64, f64) {
        self.0.domain()
    }

    #[getter]
    fn num_basis(&self) -> usize {
        self.0.num_basis()
    }

    fn knots(&self) -> Vec<f64> {
        self.0.knots().to_vec()
    }

    /// All basis values at `x` (Cox-de Boor).
    fn basis(&self, x: f64) -> Vec<f64> {
        self.0.cox_de_boor(x).values
    }

    fn basis_derivative(&self, x: f64) -> PyResult<Vec<f64>> {
        self.0.basis_derivative(x).map_err(err)
    }

    fn __repr__(&self) -> String {
        let (lo, hi) = self.0.domain();
        format!("GridSpec(intervals={}, degree={}, lo={lo}, hi={hi})", self.0.intervals(), self.0.degree())
    }
}

#[pyclass(name = "QuantParams", module = "kantize", frozen)]
struct PyQuantParams(kantize::QuantParams);

#[pymethods]
impl PyQuantParams {
    /// Affine parameters covering `[alpha, beta]` with `bw` bits.
    #[staticmethod]
    fn covering(alpha: f64, beta: f64, bw: u32) -> PyResult<Self> {
        kantize::QuantParams::covering(alpha, beta, bw).map(Self).map_err(err)
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale
    }

    #[getter]
    fn zero_point(&self) -> i64 {
        self.0.zero_point
    }

    fn quantize(&self, x: f64) -> i64 {
        self.0.quantize(x)
    }

    fn dequantize(&self, q: i64) -> f64 {
        self.0.dequantize(q)
    }

    fn fake_quant(&self, x: f64) -> f64 {
        self.0.fake_quant(x)
    }
}

#[pyclass(name = "BsplineLut", module = "kantize", frozen)]
struct PyLut(kantize::BsplineLut);

#[pymethods]
impl PyLut {
    #[new]
    fn new(degree: usize, k: u32, h: u32) -> PyResult<Self> {
        build_bspline_lut(degree, k, h).map(Self).map_err(err)
    }

    fn entries(&self) -> Vec<u8> {
        self.0.entries().to_vec()
    }

    #[getter]
    fn memory_bits(&self) -> u64 {
        self.0.accounted_memory_bits()
    }

    /// Integer basis levels for activation level `a_level`, as
    /// `(support_start, levels)`.
    fn lookup(&self, a_level: i64, grid: &PyGrid) -> PyResult<(usize, Vec<i64>)> {
        let b = self.0.lookup(a_level, &grid.0).map_err(err)?;
        Ok((b.support_start, b.levels))
    }
}

#[pyclass(name = "Model", module = "kantize")]
struct PyModel(kantize::Model);

#[pymethods]
impl PyModel {
    /// `kanmlp1`, `kanmlp2` or `lekan` with fresh coefficients.
    #[staticmethod]
    #[pyo3(signature = (name, intervals = 3, degree = 3, seed = 0))]
    fn builtin(name: &str, intervals: usize, degree: usize, seed: u64) -> PyResult<Self> {
        let g = kantize::GridSpec::new(intervals, degree, -1.0, 1.0).map_err(err)?;
        kantize::Model::builtin(name, g, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (dims, grid, seed = 0))]
    fn kan_mlp(dims: Vec<usize>, grid: &PyGrid, seed: u64) -> PyResult<Self> {
        kantize::Model::kan_mlp(&dims, grid.0.clone(), seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_model(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.0, path).map_err(err)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(self.0.grid().clone())
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.0.forward(&matrix(x)?).map_err(err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.0.predict(&matrix(x)?).map_err(err)
    }
}

#[pyclass(name = "Dataset", module = "kantize", frozen)]
struct PyDataset(kantize::Dataset);

#[pymethods]
impl PyDataset {
    /// MNIST split from `dir` (or `$KANTIZE_DATA_DIR`), pixels scaled to
    /// `[lo, hi]`.
    #[staticmethod]
    #[pyo3(signature = (dir = None, split = "test", lo = -1.0, hi = 1.0))]
    fn mnist(dir: Option<PathBuf>, split: &str, lo: f64, hi: f64) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        };
        let dir = resolve_data_dir(dir.as_deref()).map_err(err)?;
        load_mnist(dir, split, (lo, hi)).map(Self).map_err(err)
    }

    /// `two-moons`, `linear` or `blobs`.
    #[staticmethod]
    #[pyo3(signature = (kind, n, seed = 0))]
    fn synthetic(kind: &str, n: usize, seed: u64) -> PyResult<Self> {
        let kind: SyntheticKind = kind.parse().map_err(err)?;
        synthetic_dataset(kind, n, seed).map(Self).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.0.n_classes()
    }

    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        rows(self.0.inputs())
    }

    #[pyo3(signature = (n, seed = 0))]
    fn subset(&self, n: usize, seed: u64) -> PyResult<Self> {
        self.0.random_subset(n, seed).map(Self).map_err(err)
    }
}

/// Trains `model` in place and returns the loss report.
#[pyfunction]
#[pyo3(signature = (model, data, lr = 0.005, epochs = 15, batch = 32, momentum = 0.9, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    data: &PyDataset,
    lr: f64,
    epochs: usize,
    batch: usize,
    momentum: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig {
        lr,
        epochs,
        batch,
        momentum,
        seed,
    };
    let r = kantize::train::train(&mut model.0, &data.0, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("initial_loss", r.initial_loss)?;
    d.set_item("final_loss", r.final_loss)?;
    d.set_item("epoch_losses", r.epoch_losses)?;
    d.set_item("train_accuracy", r.train_accuracy)?;
    Ok(d)
}

/// Accuracy of `model` on `data` under `mode` (`fp32`, `fake-quant`,
/// `bspline-lut`, `spline-table`).
#[pyfunction]
#[pyo3(signature = (model, data, mode = "fp32", bw_w = 32, bw_a = 32, bw_b = 32, act_policy = "grid-bounds"))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &PyModel,
    data: &PyDataset,
    mode: &str,
    bw_w: u32,
    bw_a: u32,
    bw_b: u32,
    act_policy: &str,
) -> PyResult<f64> {
    let policy: ActRangePolicy = act_policy.parse().map_err(err)?;
    let m = &model.0;
    let mode = match mode {
        "fp32" => EvalMode::Fp32,
        "fake-quant" => EvalMode::FakeQuant(QuantConfig::new(bw_w, bw_a, bw_b).with_policy(policy)),
        "bspline-lut" => EvalMode::BsplineLut {
            lut: build_bspline_lut(m.grid().degree(), bw_a, bw_b).map_err(err)?,
            bw_w,
        },
        "spline-table" => EvalMode::SplineTable(SplineTableSet::build(m, bw_a, bw_b).map_err(err)?),
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    PreparedModel::new(m, &mode, Some(data.0.inputs()))
        .and_then(|p| p.accuracy(&data.0))
        .map_err(err)
}

fn arch_of(arch: &str) -> PyResult<ArchDescriptor> {
    if std::path::Path::new(arch).is_file() {
        ArchDescriptor::load(arch).map_err(err)
    } else {
        ArchDescriptor::builtin(arch).map_err(err)
    }
}

/// Analytic costs of a built-in architecture or descriptor file.
#[pyfunction]
#[pyo3(signature = (arch, bw_w = 32, bw_a = 32, bw_b = 32, mode = "fake-quant", batch = 1))]
fn cost<'py>(
    py: Python<'py>,
    arch: &str,
    bw_w: u32,
    bw_a: u32,
    bw_b: u32,
    mode: &str,
    batch: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = arch_of(arch)?.with_batch(batch);
    let tab = match mode {
        "fp32" | "fake-quant" => Tabulation::None,
        "bspline-lut" => Tabulation::Lut { k: bw_a, h: bw_b },
        "spline-table" => Tabulation::SplineTable { bw_a, h: bw_b },
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    let r = CostReport::compute(&a, bw_w, bw_a, bw_b, tab);
    let d = PyDict::new(py);
    d.set_item("muls_matmul", r.muls_matmul)?;
    d.set_item("muls_bspline", r.muls_bspline)?;
    d.set_item("bitops", r.bitops)?;
    d.set_item("lut_memory_bits", r.lut_memory_bits)?;
    d.set_item("spline_table_bits", r.spline_table_bits)?;
    d.set_item("fp32_coeff_bits", r.fp32_coeff_bits)?;
    d.set_item("param_count", r.param_count)?;
    d.set_item("fpga_lut_estimate", r.fpga_lut_estimate)?;
    Ok(d)
}

/// Indices of the non-dominated `(accuracy, cost)` pairs.
#[pyfunction]
fn pareto_front(points: Vec<(f64, f64)>) -> PyResult<Vec<usize>> {
    front(&points).map_err(err)
}

/// Runs a bit-width sweep and returns one dict per configuration.
#[pyfunction]
#[pyo3(signature = (model, data, bw_w, bw_a, bw_b, modes = vec!["fake-quant".to_string()], subset = Some(2000), seed = 0, name = "model"))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    model: &PyModel,
    data: &PyDataset,
    bw_w: Vec<u32>,
    bw_a: Vec<u32>,
    bw_b: Vec<u32>,
    modes: Vec<String>,
    subset: Option<usize>,
    seed: u64,
    name: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let modes = modes.iter().map(|m| m.parse::<SweepMode>()).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let mut spec = SweepSpec::new(bw_w, bw_a, bw_b, modes);
    spec.subset = subset;
    spec.seed = seed;
    let report = run_sweep(&model.0, name, &data.0, &spec).map_err(err)?;
    report
        .points
        .iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("model", &p.model)?;
            d.set_item("mode", p.mode.name())?;
            d.set_item("bw_W", p.bw_w)?;
            d.set_item("bw_A", p.bw_a)?;
            d.set_item("bw_B", p.bw_b)?;
            d.set_item("accuracy", p.accuracy)?;
            d.set_item("bitops", p.bitops)?;
            d.set_item("lut_mem_bits", p.lut_mem_bits)?;
            d.set_item("spline_mem_bits", p.spline_mem_bits)?;
            d.set_item("fp32_coeff_bits", p.fp32_coeff_bits)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "kantize")]
fn kantize_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", kantize::VERSION)?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyQuantParams>()?;
    m.add_class::<PyLut>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_front, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
