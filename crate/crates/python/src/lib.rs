//! Python bindings: corpus generation, baselines, policy decoding,
//! training and route scoring.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hexcover::dataset::{generate_corpus, GenerationConfig};
use hexcover::evaluation::score_route;
use hexcover::heuristics::{self, Method};
use hexcover::inference::{self, InferenceConfig, Mode};
use hexcover::instance::{AoiInstance, Split};
use hexcover::policy::{Checkpoint, PolicyDims, PolicyParams};
use hexcover::training::{TrainConfig, Trainer as CoreTrainer};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One audited coverage instance.
#[pyclass(frozen, from_py_object, module = "hexcover_py")]
#[derive(Clone)]
struct Instance {
    inner: AoiInstance,
}

#[pymethods]
impl Instance {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family().as_str()
    }

    #[getter]
    fn split(&self) -> Option<&'static str> {
        self.inner.split.map(Split::as_str)
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.graph.num_cells()
    }

    #[getter]
    fn hamiltonian(&self) -> bool {
        self.inner.audit.hamiltonian
    }

    /// Node ids adjacent to `node` (cells are `0..n`, base `n`, terminal `n + 1`).
    fn neighbors(&self, node: usize) -> PyResult<Vec<usize>> {
        let g = &self.inner.graph;
        if node >= g.num_nodes() {
            return Err(PyValueError::new_err(format!("node {node} out of range")));
        }
        Ok(g.neighbors(node).to_vec())
    }

    fn to_json(&self) -> String {
        self.inner.to_json_line()
    }

    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Self> {
        AoiInstance::from_json_line(line).map(|inner| Self { inner }).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Instance(id={:?}, cells={})", self.inner.id, self.inner.graph.num_cells())
    }
}

/// A base-to-terminal node sequence with its coverage counters.
#[pyclass(frozen, get_all, skip_from_py_object, module = "hexcover_py")]
#[derive(Clone)]
struct Route {
    nodes: Vec<usize>,
    revisits: usize,
    complete: bool,
    hamiltonian: bool,
}

impl From<heuristics::Route> for Route {
    fn from(r: heuristics::Route) -> Self {
        Self { nodes: r.nodes, revisits: r.revisits, complete: r.complete, hamiltonian: r.hamiltonian }
    }
}

#[pymethods]
impl Route {
    fn __len__(&self) -> usize {
        self.nodes.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Route(steps={}, revisits={}, hamiltonian={})",
            self.nodes.len().saturating_sub(1),
            self.revisits,
            self.hamiltonian
        )
    }
}

/// Generates `count` audited instances split 8:1:1.
#[pyfunction]
#[pyo3(signature = (count, seed=0, tiny=false))]
fn generate(py: Python<'_>, count: usize, seed: u64, tiny: bool) -> PyResult<Vec<Instance>> {
    let base = if tiny { GenerationConfig::tiny() } else { GenerationConfig::default() };
    let cfg = GenerationConfig { counts: hexcover::dataset::split_sizes(count), master_seed: seed, ..base };
    let corpus = py.detach(|| generate_corpus(&cfg)).map_err(value_err)?;
    Ok(corpus.into_iter().map(|inner| Instance { inner }).collect())
}

/// Names accepted by :func:`solve_heuristic`.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.as_str()).collect()
}

#[pyfunction]
fn solve_heuristic(instance: &Instance, method: &str) -> PyResult<Route> {
    let m: Method = method.parse().map_err(PyValueError::new_err)?;
    Ok(heuristics::run(m, &instance.inner.graph).into())
}

/// Scores a route and returns the metrics row as a dict.
#[pyfunction]
#[pyo3(signature = (instance, route, method="route"))]
fn score<'py>(py: Python<'py>, instance: &Instance, route: &Route, method: &str) -> PyResult<Bound<'py, PyDict>> {
    let g = &instance.inner.graph;
    let r = heuristics::Route::from_nodes(g, route.nodes.clone());
    let row = score_route(method, &instance.inner.id, g, &r, None).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("method", row.method)?;
    d.set_item("instance_id", row.instance_id)?;
    d.set_item("hamiltonian", row.hamiltonian)?;
    d.set_item("complete", row.complete)?;
    d.set_item("revisits", row.revisits)?;
    d.set_item("distance_norm", row.distance_norm)?;
    d.set_item("distance_per_cell", row.distance_per_cell)?;
    d.set_item("turns", row.turns)?;
    d.set_item("steps", row.steps)?;
    Ok(d)
}

/// Pointer-network policy parameters.
#[pyclass(skip_from_py_object, module = "hexcover_py")]
#[derive(Clone)]
struct Policy {
    params: PolicyParams,
    seed: u64,
    epoch: usize,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (d=32, layers=2, heads=4, seed=0))]
    fn new(d: usize, layers: usize, heads: usize, seed: u64) -> PyResult<Self> {
        let dims = PolicyDims { d, layers, heads, ..PolicyDims::default() };
        let params = PolicyParams::init(dims, seed).map_err(value_err)?;
        Ok(Self { params, seed, epoch: 0 })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let params = ck.to_params().map_err(value_err)?;
        Ok(Self { params, seed: ck.header.seed, epoch: ck.header.epoch })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(&self.params, self.seed, self.epoch)
            .save(&path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Decodes a route with `mode` in {"greedy", "bok", "bok_2opt"}.
    #[pyo3(signature = (instance, mode="bok_2opt", k=16, temperature=1.0, seed=0))]
    fn solve(&self, py: Python<'_>, instance: &Instance, mode: &str, k: usize, temperature: f64, seed: u64) -> PyResult<Route> {
        let mode: Mode = mode.parse().map_err(PyValueError::new_err)?;
        let cfg = InferenceConfig { mode, k, temperature, seed, ..InferenceConfig::default() };
        cfg.validate().map_err(PyValueError::new_err)?;
        let g = &instance.inner.graph;
        let route = py.detach(|| inference::solve(g, &self.params, &cfg)).map_err(value_err)?;
        Ok(route.into())
    }
}

/// Epoch-by-epoch GRPO training.
#[pyclass(module = "hexcover_py")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (d=32, layers=2, heads=4, seed=0, max_epochs=300, group_size=16, batch_size=32, lr=3e-5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d: usize,
        layers: usize,
        heads: usize,
        seed: u64,
        max_epochs: usize,
        group_size: usize,
        batch_size: usize,
        lr: f64,
    ) -> PyResult<Self> {
        let cfg = TrainConfig {
            dims: PolicyDims { d, layers, heads, ..PolicyDims::default() },
            seed,
            max_epochs,
            group_size,
            batch_size,
            lr,
            ..TrainConfig::default()
        };
        CoreTrainer::new(cfg).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.finished()
    }

    /// Runs one epoch and returns its log row as a dict.
    fn run_epoch<'py>(
        &mut self,
        py: Python<'py>,
        train: Vec<Instance>,
        val: Vec<Instance>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let train: Vec<AoiInstance> = train.into_iter().map(|i| i.inner).collect();
        let val: Vec<AoiInstance> = val.into_iter().map(|i| i.inner).collect();
        let inner = &mut self.inner;
        let log = py
            .detach(|| inner.run_epoch(&train, &val))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let d = PyDict::new(py);
        d.set_item("epoch", log.epoch)?;
        d.set_item("train_sr", log.train_sr)?;
        d.set_item("val_sr", log.val_sr)?;
        d.set_item("mean_return", log.mean_return)?;
        d.set_item("entropy", log.entropy)?;
        d.set_item("lr", log.lr)?;
        d.set_item("temperature", log.temperature)?;
        Ok(d)
    }

    /// Best parameters by validation success rate.
    fn best_policy(&self) -> Policy {
        Policy {
            params: self.inner.best_params.clone(),
            seed: self.inner.cfg.seed,
            epoch: self.inner.best_epoch.unwrap_or(0),
        }
    }
}

#[pymodule]
fn hexcover_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Instance>()?;
    m.add_class::<Route>()?;
    m.add_class::<Policy>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(solve_heuristic, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
