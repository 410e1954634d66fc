//! Python module `domino`: cost-model simulation, equivalence checks, ring
//! AllReduce and experiment configs from `domino-core`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use domino_core::collectives::TPGroup;
use domino_core::config::ExperimentConfig;
use domino_core::cost::{self, ClusterSpec};
use domino_core::experiment::{self, write_records, OutputFormat};
use domino_core::schedule::{BlockLayout, BlockShape, Mode, PartitionPlan, Scheme};
use domino_core::tensor::Tensor;
use domino_core::verify::{run_point, GridPoint, GridSpec, Tolerances};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (_, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn records<'py, T: Serialize>(py: Python<'py>, rows: &[T]) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty(py);
    for r in rows {
        list.append(to_py(py, &serde_json::to_value(r).map_err(runtime_err)?)?)?;
    }
    Ok(list)
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    s.parse().map_err(value_err)
}

fn parse_layout(s: &str) -> PyResult<BlockLayout> {
    match s {
        "pre_norm" => Ok(BlockLayout::PreNorm),
        "post_norm" => Ok(BlockLayout::PostNorm),
        other => Err(value_err(format!("unknown layout `{other}` (pre_norm or post_norm)"))),
    }
}

fn plan_for(mode: Mode, p1: usize, p2: usize) -> PartitionPlan {
    match mode.scheme() {
        Scheme::Baseline => PartitionPlan::baseline(),
        Scheme::RowInput => PartitionPlan::row(p1),
        Scheme::ColWeight => PartitionPlan::col(p2),
        Scheme::Hybrid => PartitionPlan::hybrid(p1, p2),
    }
}

/// Hardware model; defaults to DGX-H100 nodes.
#[pyclass(name = "Cluster", from_py_object)]
#[derive(Clone)]
struct PyCluster {
    inner: ClusterSpec,
}

#[pymethods]
impl PyCluster {
    #[new]
    #[pyo3(signature = (nodes = 1))]
    fn new(nodes: usize) -> Self {
        Self { inner: ClusterSpec::dgx_h100(nodes) }
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.nodes
    }
    #[setter]
    fn set_nodes(&mut self, v: usize) {
        self.inner.nodes = v;
    }
    #[getter]
    fn devices_per_node(&self) -> usize {
        self.inner.devices_per_node
    }
    #[setter]
    fn set_devices_per_node(&mut self, v: usize) {
        self.inner.devices_per_node = v;
    }
    #[getter]
    fn intra_bw(&self) -> f64 {
        self.inner.intra_bw
    }
    #[setter]
    fn set_intra_bw(&mut self, v: f64) {
        self.inner.intra_bw = v;
    }
    #[getter]
    fn inter_bw(&self) -> f64 {
        self.inner.inter_bw
    }
    #[setter]
    fn set_inter_bw(&mut self, v: f64) {
        self.inner.inter_bw = v;
    }
    #[getter]
    fn link_latency(&self) -> f64 {
        self.inner.link_latency
    }
    #[setter]
    fn set_link_latency(&mut self, v: f64) {
        self.inner.link_latency = v;
    }
    #[getter]
    fn cuda_graph(&self) -> bool {
        self.inner.cuda_graph
    }
    #[setter]
    fn set_cuda_graph(&mut self, v: bool) {
        self.inner.cuda_graph = v;
    }

    fn tp_degree(&self) -> usize {
        self.inner.tp_degree()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &serde_json::to_value(&self.inner).map_err(runtime_err)?)
    }

    fn __repr__(&self) -> String {
        format!("Cluster(nodes={}, devices_per_node={}, cuda_graph={})", self.inner.nodes, self.inner.devices_per_node, self.inner.cuda_graph)
    }
}

/// `12 l h^2 + 13 l h + (vocab + seq_len) h`.
#[pyfunction]
#[pyo3(signature = (hidden, layers, vocab = 50257, seq_len = 2048))]
fn model_size(hidden: u64, layers: u64, vocab: u64, seq_len: u64) -> PyResult<u128> {
    cost::model_size(hidden, layers, vocab, seq_len).map_err(value_err)
}

/// Simulated iteration of one mode; the group spans every device of `cluster`.
#[pyfunction]
#[pyo3(signature = (mode, hidden, layers, heads, seq, micro_batch, cluster = None, p1 = 2, p2 = 2, ffn_mult = 4, dtype_bytes = 2, layout = "pre_norm"))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    mode: &str,
    hidden: usize,
    layers: usize,
    heads: usize,
    seq: usize,
    micro_batch: usize,
    cluster: Option<PyCluster>,
    p1: usize,
    p2: usize,
    ffn_mult: usize,
    dtype_bytes: usize,
    layout: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = parse_mode(mode)?;
    let c = cluster.map_or_else(|| ClusterSpec::dgx_h100(1), |c| c.inner);
    c.validate().map_err(value_err)?;
    let shape = BlockShape {
        layers,
        batch: micro_batch,
        seq,
        hidden,
        heads,
        ffn: ffn_mult * hidden,
        n: c.tp_degree(),
        dtype_bytes,
        layout: parse_layout(layout)?,
    };
    let plan = plan_for(mode, p1, p2);
    let dag = cost::mode_schedule(&shape, &plan, mode).map_err(value_err)?;
    let r = cost::simulate(&dag, &c).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("mode", mode.name())?;
    d.set_item("p1", plan.p1)?;
    d.set_item("p2", plan.p2)?;
    d.set_item("iteration_time", r.iteration_time)?;
    d.set_item("compute_total", r.compute_total)?;
    d.set_item("comm_total", r.comm_total)?;
    d.set_item("comm_exposed", r.comm_exposed)?;
    d.set_item("comm_ratio", cost::comm_ratio(&r))?;
    d.set_item("hidden_fraction", r.hidden_fraction)?;
    d.set_item("events", dag.len())?;
    Ok(d)
}

/// Ring AllReduce over simulated workers. Returns the reduced buffers and
/// the bytes each worker sent.
#[pyfunction]
#[pyo3(signature = (buffers, seed = 0, dtype_bytes = 8))]
fn allreduce(buffers: Vec<Vec<f64>>, seed: u64, dtype_bytes: usize) -> PyResult<(Vec<Vec<f64>>, Vec<u64>)> {
    if buffers.is_empty() {
        return Err(value_err("need at least one buffer"));
    }
    let mut g = TPGroup::with_dtype_bytes(buffers.len(), seed, dtype_bytes);
    let tensors = buffers
        .into_iter()
        .map(|b| {
            let n = b.len();
            Tensor::new(vec![n], b)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let out = g.allreduce_sum_sync(tensors).map_err(value_err)?;
    let sent = g.records()[0].bytes_sent.clone();
    Ok((out.into_iter().map(|t| t.data().to_vec()).collect(), sent))
}

/// Run one equivalence point against the single-device reference.
#[pyfunction]
#[pyo3(signature = (mode, n, batch, seq, hidden, p1 = 2, p2 = 2, layers = 1, heads = 4, layout = "pre_norm", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn verify_point<'py>(
    py: Python<'py>,
    mode: &str,
    n: usize,
    batch: usize,
    seq: usize,
    hidden: usize,
    p1: usize,
    p2: usize,
    layers: usize,
    heads: usize,
    layout: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = parse_mode(mode)?;
    let spec = GridSpec { heads, layers, ..GridSpec::default() };
    let shape = BlockShape {
        layers,
        batch,
        seq,
        hidden,
        heads,
        ffn: spec.ffn_mult * hidden,
        n,
        dtype_bytes: 8,
        layout: parse_layout(layout)?,
    };
    let point = GridPoint { mode, plan: plan_for(mode, p1, p2), shape };
    let report = run_point(&point, &spec, &Tolerances::default(), seed).map_err(value_err)?;
    to_py(py, &serde_json::to_value(&report).map_err(runtime_err)?)
}

/// Parsed and validated experiment config.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { cfg: ExperimentConfig::from_toml(text).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { cfg: ExperimentConfig::load(&path).map_err(value_err)? })
    }

    #[getter]
    fn hash(&self) -> String {
        self.cfg.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn simulate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        records(py, &experiment::simulate_records(&self.cfg).map_err(runtime_err)?)
    }

    fn sweep<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        records(py, &experiment::sweep_records(&self.cfg).map_err(runtime_err)?)
    }

    fn verify<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        records(py, &experiment::verify_records(&self.cfg).map_err(runtime_err)?)
    }

    /// CSV text of `command` ("simulate", "sweep" or "verify").
    fn csv(&self, command: &str) -> PyResult<String> {
        let mut buf = Vec::new();
        let r = match command {
            "simulate" => write_records(&experiment::simulate_records(&self.cfg).map_err(runtime_err)?, OutputFormat::Csv, &mut buf),
            "sweep" => write_records(&experiment::sweep_records(&self.cfg).map_err(runtime_err)?, OutputFormat::Csv, &mut buf),
            "verify" => write_records(&experiment::verify_records(&self.cfg).map_err(runtime_err)?, OutputFormat::Csv, &mut buf),
            other => return Err(value_err(format!("unknown command `{other}`"))),
        };
        r.map_err(runtime_err)?;
        String::from_utf8(buf).map_err(runtime_err)
    }
}

#[pymodule]
fn domino(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCluster>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(model_size, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(allreduce, m)?)?;
    m.add_function(wrap_pyfunction!(verify_point, m)?)?;
    m.add("MODES", Mode::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}
