//! LLM-in-the-loop tuning of the step-size adaptation rate `tau` of a
//! (1+1)-Evolution Strategy.
//!
//! The loop asks a chat model for a `tau`, evaluates it with replicated ES
//! runs on a benchmark, appends the mean fitness to a plain-text log, feeds
//! that log back to the model for analysis and repeats until the trial budget
//! is spent.

pub mod cli;
pub mod es;
pub mod llm;
pub mod report;
pub mod store;
pub mod tuning;

pub use es::{
    mutate, run_es, score_of, sphere_eval, update_sigma, EsConfig, EsError, EsRng, EsRunResult, Objective,
    ObjectiveSpec, SolutionVector,
};
pub use llm::{
    extract_tau, render_analysis_prompt, render_tune_prompt, HttpBackend, LlmBackend, LlmBackendConfig, LlmError,
    LlmExchange, PromptPair, ScriptedBackend,
};
pub use report::{emit_csv, emit_plot, run_grid, GridResult, GridSpec, ReportError};
pub use store::{
    append_log_line, read_session, read_session_partial, trial_stats, write_session, SessionPaths, SessionWriter,
    StoreError,
};
pub use tuning::{
    best_trial, is_duplicate, propose_next_tau, replicate_seed, run_session, run_trial, EsTemplate, SessionConfig,
    SessionStatus, Trial, TuningError, TuningSession,
};
