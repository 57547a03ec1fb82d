//! The propose -> execute -> log -> analyze loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::es::{run_es, EsConfig, EsError, EsRunResult, ObjectiveSpec};
use crate::llm::{
    extract_tau, render_analysis_prompt, render_tune_prompt, LlmBackend, LlmError, LlmExchange, PromptPair,
    DUPLICATE_REMINDER,
};
use crate::store::{self, Extensions, SessionWriter, StoreError};

/// Multiplier applied to a duplicate proposal once re-prompting gives up.
pub const FALLBACK_FACTOR: f64 = 1.05;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error("session has no trials")]
    EmptySession,
    #[error("session is not running (status: {0:?})")]
    NotRunning(SessionStatus),
}

/// ES parameters shared by every trial of a session; tau and seed vary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsTemplate {
    pub sigma0: f64,
    pub max_generations: u64,
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for EsTemplate {
    fn default() -> Self {
        Self { sigma0: 1.0, max_generations: 1000, init_low: -5.0, init_high: 5.0 }
    }
}

impl EsTemplate {
    pub fn config(&self, tau: f64, dimension: usize, seed: u64) -> EsConfig {
        EsConfig {
            tau,
            sigma0: self.sigma0,
            dimension,
            max_generations: self.max_generations,
            init_low: self.init_low,
            init_high: self.init_high,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub objective: ObjectiveSpec,
    pub es: EsTemplate,
    pub replicates: u32,
    pub budget: u32,
    pub master_seed: u64,
    pub duplicate_tolerance: f64,
    pub max_propose_retries: u32,
    pub prompts: PromptPair,
    /// Append `, Std: <std>` to each log line.
    pub log_std: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveSpec::sphere(5),
            es: EsTemplate::default(),
            replicates: 10,
            budget: 12,
            master_seed: 42,
            duplicate_tolerance: 1e-9,
            max_propose_retries: 2,
            prompts: PromptPair::default(),
            log_std: true,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), TuningError> {
        if self.budget == 0 {
            return Err(TuningError::Config("budget must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(TuningError::Config("replicates must be at least 1".into()));
        }
        if !(self.duplicate_tolerance.is_finite() && self.duplicate_tolerance > 0.0) {
            return Err(TuningError::Config("duplicate_tolerance must be positive".into()));
        }
        if self.objective.dimension == 0 {
            return Err(TuningError::Config("dimension must be at least 1".into()));
        }
        // Validate the ES part with a placeholder tau.
        self.es.config(1.0, self.objective.dimension, 0).validate()?;
        Ok(())
    }
}

/// One tau value evaluated over `replicates` seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub tau: f64,
    pub results: Vec<EsRunResult>,
    pub mean_score: f64,
    pub std_score: f64,
}

impl Trial {
    pub fn from_results(tau: f64, results: Vec<EsRunResult>) -> Result<Self, TuningError> {
        let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
        let (mean_score, std_score) = store::trial_stats(&scores)?;
        Ok(Self { tau, results, mean_score, std_score })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningSession {
    pub config: SessionConfig,
    pub trials: Vec<Trial>,
    pub exchanges: Vec<LlmExchange>,
    pub status: SessionStatus,
    pub best_tau: Option<f64>,
    /// Diagnostics for an aborted session.
    pub error: Option<String>,
    /// Record fields written by newer versions, kept on rewrite.
    pub extensions: Extensions,
}

impl TuningSession {
    pub fn new(config: SessionConfig) -> Self {
        Self {
            config,
            trials: Vec::new(),
            exchanges: Vec::new(),
            status: SessionStatus::Running,
            best_tau: None,
            error: None,
            extensions: Extensions::default(),
        }
    }

    pub fn push_trial(&mut self, trial: Trial) {
        self.trials.push(trial);
        self.best_tau = best_index(&self.trials).map(|i| self.trials[i].tau);
    }

    pub fn log_text(&self) -> String {
        store::render_log(&self.trials, self.config.log_std)
    }

    pub fn tried_taus(&self) -> impl Iterator<Item = f64> + '_ {
        self.trials.iter().map(|t| t.tau)
    }

    pub fn best_trial(&self) -> Result<&Trial, TuningError> {
        best_trial(self)
    }
}

fn best_index(trials: &[Trial]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &trials[b];
                if t.mean_score > cur.mean_score || (t.mean_score == cur.mean_score && t.tau < cur.tau) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Trial with the highest mean score; ties go to the smaller tau.
pub fn best_trial(session: &TuningSession) -> Result<&Trial, TuningError> {
    best_of(&session.trials)
}

pub fn best_of(trials: &[Trial]) -> Result<&Trial, TuningError> {
    best_index(trials).map(|i| &trials[i]).ok_or(TuningError::EmptySession)
}

pub fn is_duplicate(tau: f64, session: &TuningSession, tol: f64) -> bool {
    is_duplicate_of(tau, session.tried_taus(), tol)
}

pub fn is_duplicate_of(tau: f64, tried: impl IntoIterator<Item = f64>, tol: f64) -> bool {
    tried.into_iter().any(|t| (tau - t).abs() <= tol)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `replicate` in trial `trial_index`:
/// `splitmix64(splitmix64(splitmix64(master) ^ trial_index) ^ replicate)`.
pub fn replicate_seed(master_seed: u64, trial_index: u64, replicate: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ trial_index) ^ replicate)
}

/// Runs all replicates for one tau. Replicates execute in parallel and are
/// collected in replicate order.
pub fn run_trial(tau: f64, cfg: &SessionConfig, trial_index: u64) -> Result<Trial, TuningError> {
    let results = (0..u64::from(cfg.replicates))
        .into_par_iter()
        .map(|i| {
            let seed = replicate_seed(cfg.master_seed, trial_index, i);
            run_es(&cfg.es.config(tau, cfg.objective.dimension, seed), &cfg.objective)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Trial::from_results(tau, results)
}

/// Asks the backend for an untried tau, recording every exchange on the session.
pub fn propose_next_tau(session: &mut TuningSession, backend: &mut dyn LlmBackend) -> Result<f64, TuningError> {
    if session.status != SessionStatus::Running {
        return Err(TuningError::NotRunning(session.status));
    }
    let log = session.log_text();
    let base_prompt = if log.is_empty() {
        render_tune_prompt(&session.config.prompts)?
    } else {
        render_analysis_prompt(&session.config.prompts, &log)?
    };
    let tol = session.config.duplicate_tolerance;

    let mut last_duplicate: Option<f64> = None;
    let mut last_error: Option<LlmError> = None;
    let mut reminder = false;
    for attempt in 0..=session.config.max_propose_retries {
        let prompt = if reminder { format!("{base_prompt}\n\n{DUPLICATE_REMINDER}") } else { base_prompt.clone() };
        let exchange = backend.send(&prompt, attempt)?;
        let extracted = extract_tau(&exchange.response);
        session.exchanges.push(exchange);
        match extracted {
            Ok(tau) if is_duplicate(tau, session, tol) => {
                last_duplicate = Some(tau);
                reminder = true;
            }
            Ok(tau) => return Ok(tau),
            Err(e) => {
                last_error = Some(e);
                reminder = false;
            }
        }
    }

    match last_duplicate {
        Some(dup) => {
            let mut tau = dup * FALLBACK_FACTOR;
            while is_duplicate(tau, session, tol) {
                tau *= FALLBACK_FACTOR;
            }
            Ok(tau)
        }
        None => Err(last_error
            .map(TuningError::from)
            .unwrap_or_else(|| TuningError::Config("no proposal attempts were made".into()))),
    }
}

/// Runs the full loop for `cfg.budget` trials, persisting through `writer`
/// when given. Runtime failures abort the session instead of returning an
/// error; only an invalid configuration is reported as `Err`.
pub fn run_session(
    cfg: SessionConfig,
    backend: &mut dyn LlmBackend,
    mut writer: Option<&mut SessionWriter>,
) -> Result<TuningSession, TuningError> {
    cfg.validate()?;
    let mut session = TuningSession::new(cfg);
    if let Some(w) = writer.as_deref_mut() {
        w.begin(&session)?;
    }

    let outcome = drive(&mut session, backend, &mut writer);
    match outcome {
        Ok(()) => session.status = SessionStatus::Completed,
        Err(e) => {
            session.status = SessionStatus::Aborted;
            session.error = Some(e.to_string());
        }
    }
    if let Some(w) = writer {
        if let Err(e) = w.finish(&session) {
            session.status = SessionStatus::Aborted;
            session.error = Some(match session.error.take() {
                Some(prev) => format!("{prev}; additionally failed to finalize session file: {e}"),
                None => format!("failed to finalize session file: {e}"),
            });
        }
    }
    Ok(session)
}

fn drive(
    session: &mut TuningSession,
    backend: &mut dyn LlmBackend,
    writer: &mut Option<&mut SessionWriter>,
) -> Result<(), TuningError> {
    for index in 0..session.config.budget {
        let seen = session.exchanges.len();
        let proposal = propose_next_tau(session, backend);
        if let Some(w) = writer.as_deref_mut() {
            for exchange in &session.exchanges[seen..] {
                w.append_exchange(exchange)?;
            }
        }
        let tau = proposal?;
        let trial = run_trial(tau, &session.config, u64::from(index))?;
        if let Some(w) = writer.as_deref_mut() {
            w.append_trial(&trial, session.trials.len(), session.config.log_std)?;
        }
        session.push_trial(trial);
    }
    Ok(())
}
