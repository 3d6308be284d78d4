//! Python bindings: datasets, run configuration, training, tickets,
//! evaluation, diversity and FLOPs.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use engine::config::RunConfig;
use engine::data::{gen_synthetic, load_csv};
use engine::diversity::ensemble_diversity;
use engine::evaluation::{MetricReport, PredictionSet};
use engine::sparsity::erk_densities;
use engine::ticket_file::{load_ticket, save_ticket};
use engine::training::{
    schedule_flops, train_dst_ensemble, train_edst_ensemble, train_static_baseline, EnsembleRun, Method,
};
use engine::{LayerShape, Matrix};

fn err(e: engine::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Train/test split with its class count.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(engine::data::Dataset);

#[pymethods]
impl PyDataset {
    /// Synthetic two-dimensional problem: `two_moons`, `gaussians` or `spirals`.
    #[staticmethod]
    #[pyo3(signature = (kind, n = 2000, noise = 0.1, seed = 0))]
    fn synthetic(kind: &str, n: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let kind = kind.parse().map_err(err)?;
        gen_synthetic(kind, n, noise, seed).map(Self).map_err(err)
    }

    /// CSV files with the label in the last column.
    #[staticmethod]
    #[pyo3(signature = (train_path, test_path, num_classes = None))]
    fn csv(train_path: &str, test_path: &str, num_classes: Option<usize>) -> PyResult<Self> {
        load_csv(train_path, test_path, num_classes).map(Self).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.0.train.labels.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.0.test.labels.len()
    }

    fn test_inputs(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.test.inputs)
    }

    fn test_labels(&self) -> Vec<usize> {
        self.0.test.labels.clone()
    }
}

/// Run configuration addressed by the same keys as the config file.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(RunConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        match text {
            Some(t) => RunConfig::parse(t).map(Self).map_err(err),
            None => Ok(Self(RunConfig::default())),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        RunConfig::load(path).map(Self).map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> Option<String> {
        self.0.get(key)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }

    /// Builds the dataset the configuration names.
    fn load_dataset(&self) -> PyResult<PyDataset> {
        self.0.load_dataset().map(PyDataset).map_err(err)
    }
}

/// One trained sparse subnetwork with its provenance.
#[pyclass(name = "Ticket", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTicket(engine::Ticket);

#[pymethods]
impl PyTicket {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_ticket(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_ticket(&self.0, path).map_err(err)
    }

    /// Class probabilities for each input row.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(inputs)?;
        self.0.network.predict(&x).map(|p| to_rows(&p)).map_err(err)
    }

    #[getter]
    fn sparsity(&self) -> f64 {
        self.0.sparsity()
    }

    #[getter]
    fn densities(&self) -> Vec<f64> {
        self.0.network.masks.densities()
    }

    #[getter]
    fn method(&self) -> String {
        self.0.provenance.method.to_string()
    }

    #[getter]
    fn member(&self) -> usize {
        self.0.provenance.member
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.provenance.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Ticket(method={}, member={}, sparsity={:.4})",
            self.0.provenance.method,
            self.0.provenance.member,
            self.0.sparsity()
        )
    }
}

fn tickets_of(run: EnsembleRun) -> PyResult<Vec<PyTicket>> {
    if run.tickets.is_empty() {
        let why = run
            .failures
            .first()
            .map(|f| format!("member {}: {}", f.member, f.error))
            .unwrap_or_default();
        return Err(PyValueError::new_err(format!("every member failed: {why}")));
    }
    Ok(run.tickets.into_iter().map(PyTicket).collect())
}

fn inner_tickets(tickets: &[PyRef<'_, PyTicket>]) -> Vec<engine::Ticket> {
    tickets.iter().map(|t| t.0.clone()).collect()
}

/// Trains an ensemble: `dst` (one run per member), `edst` (one run, several
/// refinement phases) or `static` (fixed masks). Releases the GIL.
#[pyfunction]
fn train(py: Python<'_>, method: &str, dataset: &PyDataset, config: &PyConfig) -> PyResult<Vec<PyTicket>> {
    let method: Method = method.parse().map_err(err)?;
    let cfg = config.0.schedule.clone();
    let data = &dataset.0;
    let run = py
        .detach(|| match method {
            Method::Dst => train_dst_ensemble(data, &cfg),
            Method::Edst => train_edst_ensemble(data, &cfg),
            Method::Static => train_static_baseline(data, &cfg),
        })
        .map_err(err)?;
    tickets_of(run)
}

/// Ensemble accuracy, NLL and ECE on the test split, plus member accuracies.
#[pyfunction]
#[pyo3(signature = (tickets, dataset, ece_bins = 15))]
fn evaluate<'py>(
    py: Python<'py>,
    tickets: Vec<PyRef<'py, PyTicket>>,
    dataset: &PyDataset,
    ece_bins: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = MetricReport::clean(&inner_tickets(&tickets), &dataset.0.test, ece_bins).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("acc", r.acc)?;
    out.set_item("nll", r.nll)?;
    out.set_item("ece", r.ece)?;
    out.set_item("member_acc", r.member_acc)?;
    Ok(out)
}

/// Prediction disagreement and KL divergence between members on the test split.
#[pyfunction]
fn diversity<'py>(
    py: Python<'py>,
    tickets: Vec<PyRef<'py, PyTicket>>,
    dataset: &PyDataset,
) -> PyResult<Bound<'py, PyDict>> {
    let preds = PredictionSet::from_tickets(&inner_tickets(&tickets), &dataset.0.test).map_err(err)?;
    let r = ensemble_diversity(&preds).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("d_dis", r.d_dis)?;
    out.set_item("d_kl", r.d_kl)?;
    out.set_item("pairwise_dis", to_rows(&r.pairwise_dis))?;
    out.set_item("pairwise_kl", to_rows(&r.pairwise_kl))?;
    Ok(out)
}

/// Analytic training and inference FLOPs of a schedule.
#[pyfunction]
#[pyo3(signature = (method, config, n_train, input_dim, classes, dense_overhead = true))]
fn flops(
    method: &str,
    config: &PyConfig,
    n_train: usize,
    input_dim: usize,
    classes: usize,
    dense_overhead: bool,
) -> PyResult<HashMap<String, f64>> {
    let method: Method = method.parse().map_err(err)?;
    let r = schedule_flops(&config.0.schedule, method, n_train, input_dim, classes, dense_overhead).map_err(err)?;
    Ok(HashMap::from([
        ("train_flops".to_string(), r.train_flops),
        ("inference_flops".to_string(), r.inference_flops_per_sample),
        ("train_flops_ratio".to_string(), r.ratio_to_dense),
    ]))
}

/// Layer densities for `(n_in, n_out)` shapes at global sparsity `sparsity`.
/// Returns `(epsilon, densities)`.
#[pyfunction]
fn erk(shapes: Vec<(usize, usize)>, sparsity: f64) -> PyResult<(f64, Vec<f64>)> {
    let shapes: Vec<LayerShape> = shapes.into_iter().map(|(i, o)| LayerShape::dense(i, o)).collect();
    let a = erk_densities(&shapes, sparsity).map_err(err)?;
    Ok((a.epsilon, a.densities))
}

#[pymodule]
#[pyo3(name = "sparse_ensemble")]
fn sparse_ensemble_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTicket>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(erk, m)?)?;
    Ok(())
}
