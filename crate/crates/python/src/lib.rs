//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use graft::gnn::micro_macro_f1;
use graft::graph::{load_graph, sample_ego, save_graph, synth_shift, Graph, GraphFormat, ShiftConfig};
use graft::grpo::{grpo_advantages, median_bandwidth, mmd2, reward_align};
use graft::pipeline::{pca_2d, run_pipeline, run_stage, PipelineConfig, RunMode, Stage, Store};
use graft::tokenizer::{make_schedule, quantize, Codebook};

type Rows = Vec<Vec<f64>>;

fn err(e: graft::Error) -> PyErr {
    match e {
        graft::Error::Io(_) | graft::Error::StageDependency { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: &Rows) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Array2::from_shape_vec((r, c), rows.iter().flatten().copied().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(m: &Array2<f64>) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Undirected graph with node features and optional labels.
#[pyclass(name = "Graph", module = "graft", from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (n, edges, features, num_classes, labels=None))]
    fn new(n: usize, edges: Vec<(usize, usize)>, features: Rows, num_classes: usize, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let inner = Graph::new(n, edges, to_mat(&features)?, labels, num_classes).map_err(err)?;
        Ok(PyGraph { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let fmt = if path.is_dir() { GraphFormat::Directory } else { GraphFormat::Container };
        Ok(PyGraph { inner: load_graph(&path, fmt).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_graph(&self.inner, &path, GraphFormat::Container).map_err(err)
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn features(&self) -> Rows {
        to_rows(self.inner.features())
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// `(nodes, adjacency rows)` of the ego network of `center`.
    #[pyo3(signature = (center, hops=2, max_nodes=16, seed=0))]
    fn ego(&self, center: usize, hops: usize, max_nodes: usize, seed: u64) -> PyResult<(Vec<usize>, Rows)> {
        let sub = sample_ego(&self.inner, center, hops, max_nodes, seed).map_err(err)?;
        Ok((sub.nodes().to_vec(), to_rows(sub.adjacency())))
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={}, features={}, classes={})",
            self.inner.node_count(),
            self.inner.edge_count(),
            self.inner.feature_dim(),
            self.inner.num_classes()
        )
    }
}

/// Synthetic source/target pair; keyword arguments override generator fields.
#[pyfunction]
#[pyo3(signature = (seed=0, source_nodes=300, target_nodes=300, num_classes=2, feature_shift=1.5))]
fn synthetic_pair(seed: u64, source_nodes: usize, target_nodes: usize, num_classes: usize, feature_shift: f64) -> PyResult<(PyGraph, PyGraph)> {
    let cfg = ShiftConfig { seed, source_nodes, target_nodes, num_classes, feature_shift, ..Default::default() };
    let pair = synth_shift(&cfg).map_err(err)?;
    Ok((PyGraph { inner: pair.source }, PyGraph { inner: pair.target }))
}

/// Unbiased squared MMD with a Gaussian kernel; bandwidth by the median heuristic when omitted.
#[pyfunction]
#[pyo3(name = "mmd2", signature = (xa, xb, sigma=None))]
fn py_mmd2(xa: Rows, xb: Rows, sigma: Option<f64>) -> PyResult<f64> {
    let (a, b) = (to_mat(&xa)?, to_mat(&xb)?);
    let s = sigma.unwrap_or_else(|| median_bandwidth(&a, &b));
    mmd2(&a, &b, s).map_err(err)
}

#[pyfunction]
#[pyo3(name = "reward_align", signature = (d2, gamma=1.0))]
fn py_reward_align(d2: f64, gamma: f64) -> f64 {
    reward_align(d2, gamma)
}

#[pyfunction]
#[pyo3(name = "grpo_advantages", signature = (rewards, eps_std=1e-8))]
fn py_grpo_advantages(rewards: Vec<f64>, eps_std: f64) -> PyResult<Vec<f64>> {
    grpo_advantages(&rewards, eps_std).map_err(err)
}

/// Cumulative products `ᾱ_1..ᾱ_T` of a linear schedule.
#[pyfunction]
fn alpha_bars(steps: usize, beta_min: f64, beta_max: f64) -> PyResult<Vec<f64>> {
    let s = make_schedule(steps, beta_min, beta_max).map_err(err)?;
    Ok((1..=steps).map(|t| s.alpha_bar(t)).collect())
}

/// Nearest-codebook index of every row of `z`.
#[pyfunction]
#[pyo3(name = "quantize")]
fn py_quantize(z: Rows, codebook: Rows) -> PyResult<Vec<usize>> {
    let cb = Codebook::new(to_mat(&codebook)?).map_err(err)?;
    Ok(quantize(&to_mat(&z)?, &cb).map_err(err)?.tokens)
}

#[pyfunction]
#[pyo3(name = "micro_macro_f1")]
fn py_micro_macro_f1(pred: Vec<usize>, truth: Vec<usize>, num_classes: usize) -> PyResult<(f64, f64)> {
    micro_macro_f1(&pred, &truth, num_classes).map_err(err)
}

#[pyfunction]
#[pyo3(name = "pca_2d")]
fn py_pca_2d(x: Rows) -> PyResult<Rows> {
    Ok(to_rows(&pca_2d(&to_mat(&x)?).map_err(err)?))
}

/// Pipeline configuration as JSON: `preset` is "large" or "desk", then
/// `dotted.key=value` overrides.
#[pyfunction]
#[pyo3(signature = (preset="desk", overrides=Vec::new()))]
fn config(preset: &str, overrides: Vec<String>) -> PyResult<String> {
    let base = match preset {
        "large" => PipelineConfig::default(),
        "desk" => PipelineConfig::desk(),
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    let cfg = base.with_overrides(&overrides).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg.to_json())
}

fn parse_config(json: &str) -> PyResult<PipelineConfig> {
    let cfg = PipelineConfig::from_json(json).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Runs one named stage in `workdir`.
#[pyfunction]
#[pyo3(name = "run_stage")]
fn py_run_stage(py: Python<'_>, stage: &str, config_json: &str, workdir: PathBuf) -> PyResult<()> {
    let stage: Stage = stage.parse().map_err(err)?;
    let cfg = parse_config(config_json)?;
    py.detach(|| {
        let store = Store::new(workdir)?;
        run_stage(stage, &cfg, &store)
    })
    .map_err(err)
}

/// Runs all stages and returns the report as JSON. `mode` is "fresh" or "resume".
#[pyfunction]
#[pyo3(signature = (config_json, workdir, mode="fresh"))]
fn run_all(py: Python<'_>, config_json: &str, workdir: PathBuf, mode: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let mode = match mode {
        "fresh" => RunMode::Fresh,
        "resume" => RunMode::Resume,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let report = py
        .detach(|| {
            let store = Store::new(workdir)?;
            run_pipeline(&cfg, &store, mode)
        })
        .map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "graft")]
fn graft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(py_mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(py_reward_align, m)?)?;
    m.add_function(wrap_pyfunction!(py_grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(py_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(py_micro_macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(py_pca_2d, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}
