//! Python bindings: the ES kernel, tau extraction, prompt rendering, trials,
//! grid sweeps and scripted or HTTP tuning sessions.
#![allow(clippy::too_many_arguments)] // keyword-argument entry points

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tautune::llm::LlmBackendConfig;
use tautune::store::{SessionPaths, SessionWriter};
use tautune::{
    EsConfig, EsError, EsRunResult, EsTemplate, GridSpec, LlmExchange, ObjectiveSpec, PromptPair, ReportError,
    SessionConfig, SessionStatus, StoreError, Trial, TuningError, TuningSession,
};

fn es_err(e: EsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tuning_err(e: TuningError) -> PyErr {
    match e {
        TuningError::Es(e) => es_err(e),
        TuningError::Config(_) => PyValueError::new_err(e.to_string()),
        TuningError::Store(e) => store_err(e),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn report_err(e: ReportError) -> PyErr {
    match e {
        ReportError::Tuning(e) => tuning_err(e),
        ReportError::Grid(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

#[pyclass(name = "EsRunResult", module = "tautune", frozen, skip_from_py_object, get_all)]
#[derive(Clone)]
pub struct PyEsRunResult {
    pub best_f: f64,
    pub score: f64,
    pub final_sigma: f64,
    pub generations_run: u64,
    pub seed: u64,
}

impl From<EsRunResult> for PyEsRunResult {
    fn from(r: EsRunResult) -> Self {
        Self {
            best_f: r.best_f,
            score: r.score,
            final_sigma: r.final_sigma,
            generations_run: r.generations_run,
            seed: r.seed,
        }
    }
}

#[pymethods]
impl PyEsRunResult {
    fn __repr__(&self) -> String {
        format!(
            "EsRunResult(best_f={}, score={}, final_sigma={}, generations_run={}, seed={})",
            self.best_f, self.score, self.final_sigma, self.generations_run, self.seed
        )
    }
}

#[pyclass(name = "Trial", module = "tautune", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrial(Trial);

#[pymethods]
impl PyTrial {
    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    #[getter]
    fn mean_score(&self) -> f64 {
        self.0.mean_score
    }

    #[getter]
    fn std_score(&self) -> f64 {
        self.0.std_score
    }

    #[getter]
    fn results(&self) -> Vec<PyEsRunResult> {
        self.0.results.iter().copied().map(Into::into).collect()
    }

    fn log_line(&self, with_std: bool) -> String {
        tautune::append_log_line(&self.0, "", with_std).trim_end().to_string()
    }

    fn __repr__(&self) -> String {
        format!("Trial(tau={}, mean_score={}, std_score={})", self.0.tau, self.0.mean_score, self.0.std_score)
    }
}

#[pyclass(name = "Exchange", module = "tautune", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyExchange(LlmExchange);

#[pymethods]
impl PyExchange {
    #[getter]
    fn prompt(&self) -> &str {
        &self.0.prompt
    }

    #[getter]
    fn response(&self) -> &str {
        &self.0.response
    }

    #[getter]
    fn latency_ms(&self) -> f64 {
        self.0.latency_ms
    }

    /// RFC 3339 timestamp in UTC.
    #[getter]
    fn timestamp(&self) -> String {
        self.0.timestamp.to_rfc3339()
    }

    #[getter]
    fn attempt(&self) -> u32 {
        self.0.attempt
    }
}

#[pyclass(name = "TuningSession", module = "tautune", frozen, skip_from_py_object)]
pub struct PySession(TuningSession);

#[pymethods]
impl PySession {
    /// `"running"`, `"completed"` or `"aborted"`.
    #[getter]
    fn status(&self) -> &'static str {
        match self.0.status {
            SessionStatus::Running => "running",
            SessionStatus::Completed => "completed",
            SessionStatus::Aborted => "aborted",
        }
    }

    #[getter]
    fn best_tau(&self) -> Option<f64> {
        self.0.best_tau
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.0.error.clone()
    }

    #[getter]
    fn budget(&self) -> u32 {
        self.0.config.budget
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.0.config.master_seed
    }

    #[getter]
    fn trials(&self) -> Vec<PyTrial> {
        self.0.trials.iter().cloned().map(PyTrial).collect()
    }

    #[getter]
    fn exchanges(&self) -> Vec<PyExchange> {
        self.0.exchanges.iter().cloned().map(PyExchange).collect()
    }

    fn log_text(&self) -> String {
        self.0.log_text()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        tautune::write_session(&self.0, &path).map_err(store_err)
    }

    fn __len__(&self) -> usize {
        self.0.trials.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "TuningSession(status={:?}, trials={}, best_tau={:?})",
            self.status(),
            self.0.trials.len(),
            self.0.best_tau
        )
    }
}

/// Session settings shared by the trial, grid and session entry points.
#[derive(Debug, Clone, Copy)]
struct Settings {
    replicates: u32,
    dimension: usize,
    generations: u64,
    master_seed: u64,
    sigma0: f64,
}

impl Settings {
    fn session_config(self, budget: u32) -> SessionConfig {
        SessionConfig {
            objective: ObjectiveSpec::sphere(self.dimension),
            es: EsTemplate { sigma0: self.sigma0, max_generations: self.generations, ..EsTemplate::default() },
            replicates: self.replicates,
            budget,
            master_seed: self.master_seed,
            ..SessionConfig::default()
        }
    }
}

#[pyfunction]
fn sphere_eval(x: Vec<f64>) -> PyResult<f64> {
    tautune::sphere_eval(&x).map_err(es_err)
}

#[pyfunction]
fn score_of(f_value: f64) -> PyResult<f64> {
    tautune::score_of(f_value).map_err(es_err)
}

#[pyfunction]
fn update_sigma(sigma: f64, tau: f64, success: bool) -> f64 {
    tautune::update_sigma(sigma, tau, success)
}

#[pyfunction]
fn replicate_seed(master_seed: u64, trial_index: u64, replicate: u64) -> u64 {
    tautune::replicate_seed(master_seed, trial_index, replicate)
}

#[pyfunction]
#[pyo3(signature = (tau, dimension=5, seed=0, sigma0=1.0, generations=1000, init_low=-5.0, init_high=5.0))]
fn run_es(
    py: Python<'_>,
    tau: f64,
    dimension: usize,
    seed: u64,
    sigma0: f64,
    generations: u64,
    init_low: f64,
    init_high: f64,
) -> PyResult<PyEsRunResult> {
    let cfg =
        EsConfig { sigma0, max_generations: generations, init_low, init_high, ..EsConfig::new(tau, dimension, seed) };
    py.detach(|| tautune::run_es(&cfg, &ObjectiveSpec::sphere(dimension))).map(Into::into).map_err(es_err)
}

#[pyfunction]
fn extract_tau(response: &str) -> PyResult<f64> {
    tautune::extract_tau(response).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (instruction=None, parse_directive=true))]
fn render_tune_prompt(instruction: Option<String>, parse_directive: bool) -> PyResult<String> {
    let mut pair = PromptPair { parse_directive, ..PromptPair::default() };
    if let Some(text) = instruction {
        pair.tune_instruction = text;
    }
    tautune::render_tune_prompt(&pair).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
#[pyo3(signature = (log, instruction=None))]
fn render_analysis_prompt(log: &str, instruction: Option<String>) -> PyResult<String> {
    let mut pair = PromptPair::default();
    if let Some(text) = instruction {
        pair.analysis_instruction = text;
    }
    tautune::render_analysis_prompt(&pair, log).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Returns `(mean, sample_std)`.
#[pyfunction]
fn trial_stats(scores: Vec<f64>) -> PyResult<(f64, f64)> {
    tautune::trial_stats(&scores).map_err(store_err)
}

#[pyfunction]
#[pyo3(signature = (tau, trial_index=0, replicates=10, dimension=5, generations=1000, master_seed=42, sigma0=1.0))]
fn run_trial(
    py: Python<'_>,
    tau: f64,
    trial_index: u64,
    replicates: u32,
    dimension: usize,
    generations: u64,
    master_seed: u64,
    sigma0: f64,
) -> PyResult<PyTrial> {
    let cfg = Settings { replicates, dimension, generations, master_seed, sigma0 }.session_config(1);
    cfg.validate().map_err(tuning_err)?;
    py.detach(|| tautune::run_trial(tau, &cfg, trial_index)).map(PyTrial).map_err(tuning_err)
}

/// Evaluates evenly spaced tau values; returns `(trials, best_tau)`.
#[pyfunction]
#[pyo3(signature = (tau_min=0.6, tau_max=1.5, steps=10, replicates=10, dimension=5, generations=1000, master_seed=42, sigma0=1.0))]
fn run_grid(
    py: Python<'_>,
    tau_min: f64,
    tau_max: f64,
    steps: usize,
    replicates: u32,
    dimension: usize,
    generations: u64,
    master_seed: u64,
    sigma0: f64,
) -> PyResult<(Vec<PyTrial>, Option<f64>)> {
    let spec = GridSpec::new(tau_min, tau_max, steps).map_err(report_err)?;
    let cfg = Settings { replicates, dimension, generations, master_seed, sigma0 }.session_config(1);
    let grid = py.detach(|| tautune::run_grid(&spec, &cfg)).map_err(report_err)?;
    Ok((grid.trials.into_iter().map(PyTrial).collect(), grid.best_tau))
}

/// Runs a tuning session against scripted `responses` or, when `endpoint` is
/// given, an OpenAI-compatible chat server. With `out`, writes
/// `<out>.log` and `<out>.session.jsonl` as the session progresses.
#[pyfunction]
#[pyo3(signature = (
    responses=None, *, endpoint=None, model=None, budget=12, replicates=10, dimension=5,
    generations=1000, master_seed=42, sigma0=1.0, out=None,
))]
fn run_session(
    py: Python<'_>,
    responses: Option<Vec<String>>,
    endpoint: Option<String>,
    model: Option<String>,
    budget: u32,
    replicates: u32,
    dimension: usize,
    generations: u64,
    master_seed: u64,
    sigma0: f64,
    out: Option<PathBuf>,
) -> PyResult<PySession> {
    let llm = match (responses, endpoint) {
        (Some(r), None) => LlmBackendConfig::scripted(r),
        (None, Some(url)) => {
            let mut c = LlmBackendConfig::http(url);
            if let Some(m) = model {
                c.model = m;
            }
            c
        }
        _ => return Err(PyValueError::new_err("pass exactly one of `responses` or `endpoint`")),
    };
    let cfg = Settings { replicates, dimension, generations, master_seed, sigma0 }.session_config(budget);
    llm.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut writer = out.map(|p| SessionWriter::new(SessionPaths::from_prefix(&p)));
    let session = py.detach(|| {
        // The backend is not `Send`, so it lives entirely on the detached side.
        let mut backend = llm.build().map_err(TuningError::from)?;
        tautune::run_session(cfg, backend.as_mut(), writer.as_mut())
    });
    session.map(PySession).map_err(tuning_err)
}

#[pyfunction]
fn read_session(path: PathBuf) -> PyResult<PySession> {
    tautune::read_session(&path).map(PySession).map_err(store_err)
}

#[pymodule(name = "tautune")]
fn tautune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEsRunResult>()?;
    m.add_class::<PyTrial>()?;
    m.add_class::<PyExchange>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(sphere_eval, m)?)?;
    m.add_function(wrap_pyfunction!(score_of, m)?)?;
    m.add_function(wrap_pyfunction!(update_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(replicate_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_es, m)?)?;
    m.add_function(wrap_pyfunction!(extract_tau, m)?)?;
    m.add_function(wrap_pyfunction!(render_tune_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_analysis_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(trial_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(run_session, m)?)?;
    m.add_function(wrap_pyfunction!(read_session, m)?)?;
    m.add("DUPLICATE_REMINDER", tautune::llm::DUPLICATE_REMINDER)?;
    m.add("PARSE_DIRECTIVE", tautune::llm::PARSE_DIRECTIVE)?;
    Ok(())
}
