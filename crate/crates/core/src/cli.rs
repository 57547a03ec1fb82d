//! Command-line interface.
//!
//! Settings resolve in the order flags > environment > config file > defaults.
//! Exit codes: 0 completed, 1 runtime failure (partial artifacts may exist),
//! 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::es::{Objective, ObjectiveSpec};
use crate::llm::{BackendKind, LlmBackendConfig, PromptPair, DEFAULT_CHAT_PATH};
use crate::report::{emit_csv, emit_plot, run_grid, GridSpec};
use crate::store::{self, SessionPaths, SessionWriter};
use crate::tuning::{run_session, run_trial, EsTemplate, SessionConfig, SessionStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tautune",
    version,
    about = "Tune the step-size adaptation rate tau of a (1+1)-ES with an LLM in the loop",
    after_help = "Settings are resolved as: command-line flags, then environment variables \
                  (TAUTUNE_ENDPOINT, TAUTUNE_MODEL, TAUTUNE_CONFIG), then the TOML config file, \
                  then built-in defaults. A bearer token is read from TAUTUNE_API_KEY only."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the LLM feedback loop
    Tune(TuneArgs),
    /// Evaluate an evenly spaced tau grid without an LLM
    Grid(GridArgs),
    /// Evaluate a single tau and print its log line
    RunEs(RunEsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EsArgs {
    /// Objective function
    #[arg(long = "function")]
    pub function: Option<String>,
    /// Problem dimension
    #[arg(long)]
    pub dim: Option<usize>,
    /// Generations per run
    #[arg(long)]
    pub generations: Option<u64>,
    /// Independent runs per tau
    #[arg(long)]
    pub replicates: Option<u32>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial step size
    #[arg(long, allow_negative_numbers = true)]
    pub sigma0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub init_low: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub init_high: Option<f64>,
    /// Omit the `, Std: ...` suffix from log lines
    #[arg(long)]
    pub no_std: bool,
    /// TOML config file
    #[arg(long, env = "TAUTUNE_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Http,
    Scripted,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub es: EsArgs,
    /// Number of trials
    #[arg(long)]
    pub budget: Option<u32>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Base URL of the chat-completion server
    #[arg(long, env = "TAUTUNE_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Request path appended to the endpoint
    #[arg(long)]
    pub path: Option<String>,
    #[arg(long, env = "TAUTUNE_MODEL")]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Request timeout in seconds
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Transport retries per request
    #[arg(long)]
    pub retries: Option<u32>,
    /// Re-prompts after a duplicate or unparseable proposal
    #[arg(long)]
    pub max_propose_retries: Option<u32>,
    #[arg(long)]
    pub duplicate_tolerance: Option<f64>,
    /// JSON file with an array of canned responses (scripted backend)
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Canned response (scripted backend); repeatable
    #[arg(long = "response")]
    pub responses: Vec<String>,
    /// Do not append the reply-format directive to the tuning prompt
    #[arg(long)]
    pub no_parse_directive: bool,
    /// Output path prefix
    #[arg(long, default_value = "tautune-session")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub es: EsArgs,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_max: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output path prefix
    #[arg(long, default_value = "tautune-grid")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunEsArgs {
    #[command(flatten)]
    pub es: EsArgs,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: f64,
}

/// Contents of the `--config` TOML file; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub function: Option<String>,
    pub dim: Option<usize>,
    pub generations: Option<u64>,
    pub replicates: Option<u32>,
    pub seed: Option<u64>,
    pub sigma0: Option<f64>,
    pub init_low: Option<f64>,
    pub init_high: Option<f64>,
    pub log_std: Option<bool>,
    pub budget: Option<u32>,
    pub max_propose_retries: Option<u32>,
    pub duplicate_tolerance: Option<f64>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub steps: Option<usize>,
    #[serde(default)]
    pub llm: FileLlmConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileLlmConfig {
    pub backend: Option<BackendArg>,
    pub endpoint: Option<String>,
    pub path: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub timeout: Option<f64>,
    pub retries: Option<u32>,
    pub responses: Option<Vec<String>>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let result = match cli.command {
        Command::Tune(args) => cmd_tune(args, stdout),
        Command::Grid(args) => cmd_grid(args, stdout),
        Command::RunEs(args) => cmd_run_es(args, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Runtime(msg)) = &e;
            let prefix = if matches!(e, CliError::Usage(_)) { "usage error" } else { "error" };
            let _ = writeln!(stderr, "{prefix}: {msg}");
            e.code()
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn session_config(es: &EsArgs, file: &FileConfig) -> Result<SessionConfig, CliError> {
    let defaults = SessionConfig::default();
    let function = es.function.clone().or_else(|| file.function.clone()).unwrap_or_else(|| "sphere".into());
    let objective_name = Objective::from_name(&function).map_err(|e| usage(e.to_string()))?;
    let dimension = es.dim.or(file.dim).unwrap_or(defaults.objective.dimension);
    let objective = ObjectiveSpec::new(objective_name.name(), dimension).map_err(|e| usage(e.to_string()))?;
    let template = EsTemplate {
        sigma0: es.sigma0.or(file.sigma0).unwrap_or(defaults.es.sigma0),
        max_generations: es.generations.or(file.generations).unwrap_or(defaults.es.max_generations),
        init_low: es.init_low.or(file.init_low).unwrap_or(defaults.es.init_low),
        init_high: es.init_high.or(file.init_high).unwrap_or(defaults.es.init_high),
    };
    let cfg = SessionConfig {
        objective,
        es: template,
        replicates: es.replicates.or(file.replicates).unwrap_or(defaults.replicates),
        budget: file.budget.unwrap_or(defaults.budget),
        master_seed: es.seed.or(file.seed).unwrap_or(defaults.master_seed),
        duplicate_tolerance: file.duplicate_tolerance.unwrap_or(defaults.duplicate_tolerance),
        max_propose_retries: file.max_propose_retries.unwrap_or(defaults.max_propose_retries),
        prompts: PromptPair::default(),
        log_std: if es.no_std { false } else { file.log_std.unwrap_or(defaults.log_std) },
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn backend_config(args: &TuneArgs, file: &FileLlmConfig) -> Result<LlmBackendConfig, CliError> {
    let defaults = LlmBackendConfig::default();
    let kind = match args.backend.or(file.backend).unwrap_or(BackendArg::Http) {
        BackendArg::Http => BackendKind::Http,
        BackendArg::Scripted => BackendKind::Scripted,
    };
    let mut responses = Vec::new();
    if let Some(script) = &args.script {
        let text =
            fs::read_to_string(script).map_err(|e| usage(format!("cannot read script {}: {e}", script.display())))?;
        let parsed: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| usage(format!("script {} must be a JSON array of strings: {e}", script.display())))?;
        responses.extend(parsed);
    }
    responses.extend(args.responses.iter().cloned());
    if responses.is_empty() {
        responses = file.llm_responses();
    }
    let cfg = LlmBackendConfig {
        kind,
        base_url: args.endpoint.clone().or_else(|| file.endpoint.clone()),
        path: args.path.clone().or_else(|| file.path.clone()).unwrap_or_else(|| DEFAULT_CHAT_PATH.into()),
        model: args.model.clone().or_else(|| file.model.clone()).unwrap_or(defaults.model),
        temperature: args.temperature.or(file.temperature).unwrap_or(defaults.temperature),
        timeout_seconds: args.timeout.or(file.timeout).unwrap_or(defaults.timeout_seconds),
        transport_retries: args.retries.or(file.retries).unwrap_or(defaults.transport_retries),
        backoff_base_ms: defaults.backoff_base_ms,
        scripted_responses: responses,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

impl FileLlmConfig {
    fn llm_responses(&self) -> Vec<String> {
        self.responses.clone().unwrap_or_default()
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_tune(args: TuneArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let file = load_file_config(args.es.config.as_deref())?;
    let mut cfg = session_config(&args.es, &file)?;
    if let Some(budget) = args.budget {
        cfg.budget = budget;
    }
    if let Some(retries) = args.max_propose_retries {
        cfg.max_propose_retries = retries;
    }
    if let Some(tol) = args.duplicate_tolerance {
        cfg.duplicate_tolerance = tol;
    }
    if args.no_parse_directive {
        cfg.prompts.parse_directive = false;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let llm = backend_config(&args, &file.llm)?;
    let mut backend = llm.build().map_err(|e| usage(e.to_string()))?;

    let mut writer = SessionWriter::new(SessionPaths::from_prefix(&args.out));
    let session = run_session(cfg, backend.as_mut(), Some(&mut writer)).map_err(runtime)?;

    if !session.trials.is_empty() {
        emit_csv(&session.trials, &with_suffix(&args.out, ".csv")).map_err(runtime)?;
    }
    if session.trials.len() >= 2 {
        emit_plot(&session.trials, session.best_tau, &with_suffix(&args.out, ".svg")).map_err(runtime)?;
    }

    match session.status {
        SessionStatus::Completed => {
            let best = session.best_trial().map_err(runtime)?;
            let _ = writeln!(stdout, "best tau = {} (mean fitness {})", best.tau, best.mean_score);
            Ok(EXIT_OK)
        }
        _ => Err(runtime(format!(
            "session aborted after {} trial(s): {}",
            session.trials.len(),
            session.error.as_deref().unwrap_or("unknown error")
        ))),
    }
}

fn cmd_grid(args: GridArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let file = load_file_config(args.es.config.as_deref())?;
    let cfg = session_config(&args.es, &file)?;
    let defaults = GridSpec::default();
    let spec = GridSpec {
        tau_min: args.tau_min.or(file.tau_min).unwrap_or(defaults.tau_min),
        tau_max: args.tau_max.or(file.tau_max).unwrap_or(defaults.tau_max),
        steps: args.steps.or(file.steps).unwrap_or(defaults.steps),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let grid = run_grid(&spec, &cfg).map_err(runtime)?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    store::write_log(&grid.trials, cfg.log_std, &with_suffix(&args.out, ".log")).map_err(runtime)?;
    emit_csv(&grid.trials, &with_suffix(&args.out, ".csv")).map_err(runtime)?;
    emit_plot(&grid.trials, grid.best_tau, &with_suffix(&args.out, ".svg")).map_err(runtime)?;

    let _ = write!(stdout, "{}", store::render_log(&grid.trials, cfg.log_std));
    if let Ok(best) = crate::tuning::best_of(&grid.trials) {
        let _ = writeln!(stdout, "best tau = {} (mean fitness {})", best.tau, best.mean_score);
    }
    Ok(EXIT_OK)
}

fn cmd_run_es(args: RunEsArgs, stdout: &mut dyn Write) -> Result<i32, CliError> {
    if !(args.tau.is_finite() && args.tau > 0.0) {
        return Err(usage(format!("--tau must be a positive number, got {}", args.tau)));
    }
    let file = load_file_config(args.es.config.as_deref())?;
    let cfg = session_config(&args.es, &file)?;
    let trial = run_trial(args.tau, &cfg, 0).map_err(runtime)?;
    let _ = write!(stdout, "{}", store::append_log_line(&trial, "", cfg.log_std));
    Ok(EXIT_OK)
}
