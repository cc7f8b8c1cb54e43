//! Python bindings: configs, schedules, the regularizer and the train/evaluate commands.

use std::path::PathBuf;

use attndb::attention::{pooled_stats_with, AttentionMapSet, AttentionRecord, Pooling, TokenRole};
use attndb::cli::{self, Command, EXIT_ARTIFACTS, EXIT_CONFIG};
use attndb::concept::ConceptSpec;
use attndb::config::RunConfig;
use attndb::evaluation;
use attndb::objectives::{AttentionRegularizer, RegWeights};
use attndb::trainer::{self, RunSummary, StagePlan, FINAL_DIR};
use attndb::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match cli::exit_code(&err) {
        EXIT_CONFIG => PyValueError::new_err(msg),
        EXIT_ARTIFACTS => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Serializes through JSON so Python gets plain dicts and lists.
fn to_object<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn plans_to_object(py: Python<'_>, plans: &[StagePlan]) -> PyResult<Py<PyAny>> {
    to_object(py, &plans)
}

/// A run configuration. Mutate it through `set_stage` and `set`, then `save` it for `train`.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    #[pyo3(signature = (concept_id, image_dir, super_category, output_dir, placeholder = None))]
    fn toy(concept_id: &str, image_dir: PathBuf, super_category: &str, output_dir: PathBuf, placeholder: Option<String>) -> Self {
        let mut concept = ConceptSpec::new(concept_id, image_dir, super_category);
        if let Some(p) = placeholder {
            concept.placeholder = p;
        }
        Self { inner: RunConfig::toy(concept, output_dir) }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.to_toml()?).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Override one stage (`"1"`, `"stage2"`, `"baseline"`, ...).
    #[pyo3(signature = (stage, *, steps = None, learning_rate = None, lambda_mu = None, lambda_sigma = None, batch_size = None))]
    fn set_stage(
        &mut self,
        stage: &str,
        steps: Option<usize>,
        learning_rate: Option<f64>,
        lambda_mu: Option<f64>,
        lambda_sigma: Option<f64>,
        batch_size: Option<usize>,
    ) -> PyResult<()> {
        let id: trainer::StageId = stage.parse().map_err(to_py)?;
        let o = self.inner.stage_override_mut(id);
        o.steps = steps.or(o.steps);
        o.learning_rate = learning_rate.or(o.learning_rate);
        o.lambda_mu = lambda_mu.or(o.lambda_mu);
        o.lambda_sigma = lambda_sigma.or(o.lambda_sigma);
        o.batch_size = batch_size.or(o.batch_size);
        Ok(())
    }

    #[pyo3(signature = (*, seed = None, pretrain_steps = None, images_per_prompt = None, sampling_steps = None))]
    fn set(
        &mut self,
        seed: Option<u64>,
        pretrain_steps: Option<usize>,
        images_per_prompt: Option<usize>,
        sampling_steps: Option<usize>,
    ) {
        let c = &mut self.inner;
        c.seed = seed.unwrap_or(c.seed);
        c.backend.toy.pretrain_steps = pretrain_steps.unwrap_or(c.backend.toy.pretrain_steps);
        c.evaluation.images_per_prompt = images_per_prompt.unwrap_or(c.evaluation.images_per_prompt);
        c.evaluation.sampling_steps = sampling_steps.unwrap_or(c.evaluation.sampling_steps);
    }

    fn schedule(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        plans_to_object(py, &self.inner.schedule())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(concept={:?}, output_dir={:?})", self.inner.concept.concept_id, self.inner.output_dir)
    }
}

#[pyfunction]
fn default_schedule(py: Python<'_>) -> PyResult<Py<PyAny>> {
    plans_to_object(py, &trainer::default_schedule())
}

#[pyfunction]
fn baseline_plan(py: Python<'_>) -> PyResult<Py<PyAny>> {
    plans_to_object(py, &[trainer::baseline_plan()])
}

#[pyfunction]
fn load_prompt_suite() -> Vec<String> {
    evaluation::load_prompt_suite().templates
}

#[pyfunction]
fn render_prompt(template: &str, placeholder: &str, category: &str) -> String {
    evaluation::render_prompt(template, placeholder, category)
}

/// `layers` is a list of `(height, width, num_tokens, values)` with values laid out location-major.
fn mapset(layers: Vec<(usize, usize, usize, Vec<f64>)>, concept: usize, category: usize) -> PyResult<AttentionMapSet> {
    let layers = layers
        .into_iter()
        .enumerate()
        .map(|(i, (h, w, n, v))| AttentionRecord::new(i, h, w, n, v))
        .collect::<attndb::Result<Vec<_>>>()
        .map_err(to_py)?;
    Ok(AttentionMapSet {
        layers,
        token_index: vec![(TokenRole::Concept, concept), (TokenRole::Category, category)],
        tokens: Vec::new(),
    })
}

fn pooling(name: &str) -> PyResult<Pooling> {
    match name {
        "concat" => Ok(Pooling::Concat),
        "per_layer_mean" => Ok(Pooling::PerLayerMean),
        other => Err(PyValueError::new_err(format!("pooling must be concat or per_layer_mean, got {other:?}"))),
    }
}

/// Regularizer loss and its gradient with respect to every attention value.
#[pyfunction]
#[pyo3(signature = (layers, concept, category, lambda_mu, lambda_sigma, pooling = "concat", detach_category = false))]
fn attention_reg_loss(
    layers: Vec<(usize, usize, usize, Vec<f64>)>,
    concept: usize,
    category: usize,
    lambda_mu: f64,
    lambda_sigma: f64,
    pooling: &str,
    detach_category: bool,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let set = mapset(layers, concept, category)?;
    let reg = AttentionRegularizer {
        weights: RegWeights::new(lambda_mu, lambda_sigma).map_err(to_py)?,
        pooling: self::pooling(pooling)?,
        detach_category,
    };
    let out = reg.loss_and_grad(&set).map_err(to_py)?;
    Ok((out.loss, out.grads))
}

/// `(mean, variance)` of one token position pooled over layers.
#[pyfunction]
#[pyo3(signature = (layers, token, pooling = "concat"))]
fn pooled_stats(layers: Vec<(usize, usize, usize, Vec<f64>)>, token: usize, pooling: &str) -> PyResult<(f64, f64)> {
    let set = mapset(layers, token, token)?;
    let s = pooled_stats_with(&set, &TokenRole::Concept, self::pooling(pooling)?).map_err(to_py)?;
    Ok((s.mean, s.variance))
}

#[pyfunction]
#[pyo3(signature = (out, count = 4, size = 32, seed = 1))]
fn synth_concept(out: PathBuf, count: usize, size: u32, seed: u64) -> PyResult<()> {
    cli::execute(Command::SynthConcept { out, count, size, seed }).map_err(to_py)
}

/// Trains from a config file and returns the run summary.
#[pyfunction]
#[pyo3(signature = (config, baseline = false, seed = None))]
fn train(py: Python<'_>, config: PathBuf, baseline: bool, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let mut effective = RunConfig::load(&config).map_err(to_py)?;
    effective.seed = seed.unwrap_or(effective.seed);
    let run_dir = effective.effective_run_dir();
    py.detach(|| cli::execute(Command::Train { config, baseline, seed, backend: None })).map_err(to_py)?;
    to_object(py, &RunSummary::load(&run_dir).map_err(to_py)?)
}

/// Scores a trained run on the prompt suite and returns the metric report.
#[pyfunction]
#[pyo3(signature = (run_dir, images_per_prompt = None))]
fn evaluate(py: Python<'_>, run_dir: PathBuf, images_per_prompt: Option<usize>) -> PyResult<Py<PyAny>> {
    let cmd = Command::Evaluate { run_dir: run_dir.clone(), suite: "default".into(), images_per_prompt };
    py.detach(|| cli::execute(cmd)).map_err(to_py)?;
    let path = run_dir.join(FINAL_DIR).join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pymodule]
fn attndb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(default_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_plan, m)?)?;
    m.add_function(wrap_pyfunction!(load_prompt_suite, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(attention_reg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_stats, m)?)?;
    m.add_function(wrap_pyfunction!(synth_concept, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
