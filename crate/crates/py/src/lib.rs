//! Python bindings. Models run in f64 here; the CLI is the place for
//! long f32 training runs.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dna_core::analytics::export_bundle;
use dna_core::checkpoint;
use dna_core::config::RunConfig;
use dna_core::model::{Batch, DnaModel, Task};
use dna_core::train::{evaluate, train};
use dna_core::{verify, DnaError};

fn py_err(e: DnaError) -> PyErr {
    match e {
        DnaError::Config { .. } | DnaError::Parse { .. } | DnaError::TaskMismatch(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A routed model plus the run config it came from, if any.
#[pyclass(module = "dna")]
struct Model {
    inner: DnaModel<f64>,
    run: Option<RunConfig>,
}

impl Model {
    fn run_config(&self) -> PyResult<&RunConfig> {
        self.run
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("this model has no run config; pass one to Model.load"))
    }

    fn batch(&self, inputs: Vec<Vec<f64>>) -> PyResult<Batch> {
        let n = inputs.len();
        match self.inner.config.task {
            Task::CausalLm { vocab, context } => {
                let mut ids = Vec::with_capacity(n * context);
                for row in &inputs {
                    if row.len() != context {
                        return Err(PyValueError::new_err(format!("each sequence needs {context} tokens, got {}", row.len())));
                    }
                    for &t in row {
                        if t < 0.0 || t.fract() != 0.0 || t as usize >= vocab {
                            return Err(PyValueError::new_err(format!("token {t} is not in 0..{vocab}")));
                        }
                        ids.push(t as usize);
                    }
                }
                Ok(Batch::Tokens {
                    targets: vec![0; ids.len()],
                    ids,
                    batch: n,
                })
            }
            Task::VisionClassify {
                image_size, channels, ..
            } => {
                let size = channels * image_size * image_size;
                if let Some(row) = inputs.iter().find(|r| r.len() != size) {
                    return Err(PyValueError::new_err(format!("each image needs {size} values, got {}", row.len())));
                }
                Ok(Batch::Images {
                    pixels: inputs.concat(),
                    labels: vec![0; n],
                    batch: n,
                })
            }
        }
    }
}

#[pymethods]
impl Model {
    /// Builds a freshly initialized model from run-config TOML text.
    #[new]
    #[pyo3(signature = (config, overrides = Vec::new()))]
    fn new(config: &str, overrides: Vec<String>) -> PyResult<Self> {
        let run = RunConfig::parse(config, Path::new("<string>"), &overrides).map_err(py_err)?.config;
        let inner = DnaModel::new(run.model.clone(), run.model_seed()).map_err(py_err)?;
        Ok(Self { inner, run: Some(run) })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn from_file(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let run = RunConfig::load(&path, &overrides).map_err(py_err)?.config;
        let inner = DnaModel::new(run.model.clone(), run.model_seed()).map_err(py_err)?;
        Ok(Self { inner, run: Some(run) })
    }

    /// Loads a checkpoint directory. `config` is an optional run-config
    /// file whose model section must match the checkpoint.
    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let inner: DnaModel<f64> = checkpoint::load(&path).map_err(py_err)?;
        let run = match config {
            Some(c) => {
                let run = RunConfig::load(&c, &[]).map_err(py_err)?.config;
                if run.model != inner.config {
                    return Err(PyValueError::new_err("checkpoint and config describe different models"));
                }
                Some(run)
            }
            None => None,
        };
        Ok(Self { inner, run })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.total_count()
    }

    #[getter]
    fn n_modules(&self) -> usize {
        self.inner.config.n_modules()
    }

    #[getter]
    fn routed_steps(&self) -> usize {
        self.inner.config.n_routers()
    }

    /// Per-step router biases, `[step][module]`.
    #[getter]
    fn biases(&self) -> Vec<Vec<f64>> {
        self.inner.bias.all_biases().to_vec()
    }

    /// Trains for the run config's steps; returns the per-step losses.
    #[pyo3(signature = (steps = None))]
    fn train(&mut self, py: Python<'_>, steps: Option<usize>) -> PyResult<Vec<f64>> {
        let run = self.run_config()?.clone();
        let mut cfg = run.train_config();
        if let Some(s) = steps {
            cfg.steps = s;
            cfg.schedule = cfg.schedule.with_total(s);
        }
        let mut losses = Vec::with_capacity(cfg.steps);
        let model = &mut self.inner;
        py.detach(|| {
            let data = run.dataset()?;
            train(model, data.as_ref(), &cfg, |m| losses.push(m.loss))
        })
        .map_err(py_err)?;
        Ok(losses)
    }

    /// Mean loss and accuracy over the first `count` training examples.
    #[pyo3(signature = (count = 256))]
    fn evaluate(&self, count: usize) -> PyResult<(f64, f64)> {
        let run = self.run_config()?;
        let data = run.dataset().map_err(py_err)?;
        evaluate(&self.inner, data.as_ref(), count.min(data.len()), run.train.batch_size.max(1)).map_err(py_err)
    }

    /// Logits as rows: one per image, or one per token position.
    fn logits(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = self.batch(inputs)?;
        let (logits, _) = self.inner.forward(&batch).map_err(py_err)?;
        let cols = *logits.shape().last().unwrap_or(&1);
        Ok(logits.data().chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
    }

    /// Ribbons of each input: `[input][token][step]` lists of selected
    /// module indices.
    fn route(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<Vec<Vec<usize>>>>> {
        let batch = self.batch(inputs)?;
        let (_, trace) = self.inner.forward(&batch).map_err(py_err)?;
        Ok(trace.sequences.into_iter().map(|s| s.ribbons).collect())
    }

    /// Writes the routing trace of the config's trace data as JSON lines.
    fn trace(&self, path: PathBuf) -> PyResult<usize> {
        let run = self.run_config()?;
        let data = run.trace_dataset().map_err(py_err)?;
        let trace = self
            .inner
            .trace_dataset(data.as_ref(), run.trace.sequences, run.trace.batch_size)
            .map_err(py_err)?;
        trace.write_jsonl(&path).map_err(py_err)?;
        Ok(trace.sequences.len())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(modules={}, routed_steps={}, k={}, params={})",
            self.inner.config.n_modules(),
            self.inner.config.n_routers(),
            self.inner.config.k,
            self.inner.params.total_count()
        )
    }
}

/// Analyzes a trace file; writes the exports into `out` when given and
/// returns the summary as JSON text.
#[pyfunction]
#[pyo3(signature = (trace, out = None))]
fn analyze(trace: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let trace = dna_core::model::RoutingTrace::read_jsonl(&trace).map_err(py_err)?;
    let (_, files) = export_bundle(&trace, &Default::default(), None).map_err(py_err)?;
    let mut summary = String::new();
    for (name, text) in files {
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir).map_err(|e| py_err(DnaError::io(dir, e)))?;
            let p = dir.join(name);
            std::fs::write(&p, &text).map_err(|e| py_err(DnaError::io(&p, e)))?;
        }
        if name == "summary.json" {
            summary = text;
        }
    }
    Ok(summary)
}

/// Runs acceptance criteria; returns `(id, name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (filter = None))]
fn run_verify(py: Python<'_>, filter: Option<String>) -> PyResult<Vec<(usize, String, bool, String)>> {
    let reports = py.detach(|| verify::run(filter.as_deref(), |_| {})).map_err(py_err)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.id, r.name.to_string(), r.passed, r.detail))
        .collect())
}

/// The fully resolved config, as TOML.
#[pyfunction]
#[pyo3(signature = (path, overrides = Vec::new()))]
fn resolve_config(path: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    Ok(RunConfig::load(&path, &overrides).map_err(py_err)?.config.to_toml())
}

#[pymodule]
fn dna(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add("verify", wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
