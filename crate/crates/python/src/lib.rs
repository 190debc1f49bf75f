//! Python bindings.

use std::path::PathBuf;

use mixlink::config::RunConfig;
use mixlink::data;
use mixlink::evaluation::{self, Bandwidth, EvalContext, Shots};
use mixlink::grad::Mat;
use mixlink::pipeline;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: mixlink::Error) -> PyErr {
    match e {
        mixlink::Error::Config(_) | mixlink::Error::Argument(_) | mixlink::Error::Range { .. } | mixlink::Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        e if e.is_data_error() => PyIOError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Mat::from_shape_vec((n, width), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Run configuration.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// Points the data section at a directory written by `synth`.
    fn use_corpus_dir(&mut self, dir: PathBuf) {
        self.inner.data.source = Some(dir.join("source.csv"));
        self.inner.data.graph_dir = Some(dir.clone());
        self.inner.data.pairs = Some(dir.join("pairs.csv"));
    }
}

/// Trained subgraph encoder and frozen transfer model.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    cfg: RunConfig,
    inner: pipeline::Pipeline,
}

#[pymethods]
impl PyPipeline {
    /// Pretrains on the configured corpus. Returns the pipeline and the
    /// per-epoch target discrepancy.
    #[staticmethod]
    fn pretrain(py: Python<'_>, config: &PyRunConfig) -> PyResult<(Self, Vec<f64>)> {
        let cfg = config.inner.clone();
        let trained = py
            .detach(|| {
                let corpus = pipeline::load_corpus(&cfg)?;
                pipeline::pretrain(&cfg, &corpus)
            })
            .map_err(to_py)?;
        let disc = trained.log.records.iter().map(|e| e.target_discrepancy).collect();
        Ok((
            Self {
                cfg,
                inner: trained.pipeline,
            },
            disc,
        ))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (cfg, inner) = pipeline::load_checkpoint(&dir).map_err(to_py)?;
        Ok(Self { cfg, inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::save_checkpoint(&dir, &self.cfg, &self.inner).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.cfg.clone() }
    }

    fn generator_digest(&self) -> String {
        self.inner.model.generator_digest()
    }

    /// Generator output for fused target rows of width `d_P`.
    fn generate(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_mat(rows)?;
        Ok(from_mat(&self.inner.model.generate(&x).map_err(to_py)?))
    }

    /// Mean and sample standard deviation of F1 over few-shot trials;
    /// `shots = 0` uses the full labeled set.
    #[pyo3(signature = (shots, trials, seed = None))]
    fn few_shot_f1(&self, py: Python<'_>, shots: usize, trials: usize, seed: Option<u64>) -> PyResult<(f64, f64)> {
        let seed = seed.unwrap_or_else(|| pipeline::sub_seed(&self.cfg, pipeline::streams::EVALUATION));
        let shots = if shots == 0 { Shots::All } else { Shots::N(shots) };
        py.detach(|| {
            let corpus = pipeline::load_corpus(&self.cfg)?;
            let embeddings = self.inner.fusion.embed_all(&corpus.graph)?;
            let digest = self.cfg.digest();
            let ctx = EvalContext {
                graph: &corpus.graph,
                embeddings: &embeddings,
                model: &self.inner.model,
                assoc: &self.cfg.association,
                config_digest: &digest,
            };
            let report = evaluation::run_few_shot(&ctx, &corpus.pairs, shots, trials, seed)?;
            Ok(report.summary().f1)
        })
        .map_err(to_py)
    }
}

/// Writes a synthetic corpus and returns (source rows, accounts, edges, pairs).
#[pyfunction]
fn synth(config: &PyRunConfig, out: PathBuf) -> PyResult<(usize, usize, usize, usize)> {
    let cfg = &config.inner;
    let corpus = data::generate_synthetic_corpus(&cfg.synth, cfg.seed).map_err(to_py)?;
    std::fs::create_dir_all(&out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    data::write_corpus(&out, &corpus.source, &corpus.graph, &corpus.pairs).map_err(to_py)?;
    Ok((corpus.source.len(), corpus.graph.len(), corpus.graph.edges().len(), corpus.pairs.len()))
}

/// RBF-kernel maximum mean discrepancy; median bandwidth when omitted.
#[pyfunction]
#[pyo3(signature = (x, y, bandwidth = None))]
fn mmd(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<f64> {
    let bw = bandwidth.map_or(Bandwidth::Median, Bandwidth::Value);
    evaluation::mmd(&to_mat(x)?, &to_mat(y)?, bw).map_err(to_py)
}

#[pyfunction]
fn degradation_rate(f1_clean: f64, f1_eta: f64) -> PyResult<f64> {
    evaluation::degradation_rate(f1_clean, f1_eta).map_err(to_py)
}

/// Returns (accuracy, precision, recall, f1).
#[pyfunction]
fn metrics(predictions: Vec<u8>, labels: Vec<u8>) -> PyResult<(f64, f64, f64, f64)> {
    let m = evaluation::compute_metrics(&predictions, &labels).map_err(to_py)?;
    Ok((m.accuracy, m.precision, m.recall, m.f1))
}

#[pymodule]
fn mixlink_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(degradation_rate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
