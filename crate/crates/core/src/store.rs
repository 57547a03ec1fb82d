//! Results log and session persistence.
//!
//! A session is stored as two files:
//!
//! * `<name>.log`: one `tau = <tau>, Fitness: <mean>[, Std: <std>]` line per
//!   trial. These are the exact bytes placed in analysis prompts.
//! * `<name>.session.jsonl`: one JSON object per line, discriminated by its
//!   `record` field:
//!   - `header`: `schema_version` and the `config` snapshot (always first)
//!   - `exchange`: `index`, `prompt`, `response`, `latency_ms`, `timestamp`, `attempt`
//!   - `trial`: `index`, `tau`, `results`, `mean_score`, `std_score`
//!   - `end`: `status`, `best_tau`, `error`
//!
//! Records are appended as the loop progresses, so an interrupted session
//! leaves every completed trial readable. Fields and record kinds this
//! version does not know about are kept and written back on rewrite.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::llm::LlmExchange;
use crate::tuning::{SessionConfig, SessionStatus, Trial, TuningSession};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot compute statistics of an empty score list")]
    EmptyScores,
    #[error("session file {0} is empty")]
    EmptySession(PathBuf),
    #[error("unsupported session schema version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("line {line}: {message}")]
    CorruptLine { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for one score).
pub fn trial_stats(scores: &[f64]) -> Result<(f64, f64), StoreError> {
    if scores.is_empty() {
        return Err(StoreError::EmptyScores);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// One line of the results log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub tau: f64,
    pub fitness: f64,
    pub std: Option<f64>,
}

impl LogLine {
    pub fn from_trial(trial: &Trial, with_std: bool) -> Self {
        Self { tau: trial.tau, fitness: trial.mean_score, std: with_std.then_some(trial.std_score) }
    }
}

// `Display` for f64 prints the shortest digits that round-trip.
impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tau = {}, Fitness: {}", self.tau, self.fitness)?;
        if let Some(std) = self.std {
            write!(f, ", Std: {std}")?;
        }
        Ok(())
    }
}

pub fn append_log_line(trial: &Trial, log: &str, with_std: bool) -> String {
    format!("{log}{}\n", LogLine::from_trial(trial, with_std))
}

pub fn render_log(trials: &[Trial], with_std: bool) -> String {
    trials.iter().fold(String::new(), |log, t| append_log_line(t, &log, with_std))
}

pub fn write_log(trials: &[Trial], with_std: bool, path: &Path) -> Result<(), StoreError> {
    fs::write(path, render_log(trials, with_std)).map_err(io_err(path))
}

/// Unknown record content carried through a read/rewrite cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extensions {
    pub header: Map<String, Value>,
    pub trials: BTreeMap<usize, Map<String, Value>>,
    pub exchanges: BTreeMap<usize, Map<String, Value>>,
    pub end: Map<String, Value>,
    /// Whole records of unknown kind, in file order.
    pub records: Vec<Value>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    schema_version: u64,
    config: SessionConfig,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ExchangeRecord {
    index: usize,
    #[serde(flatten)]
    exchange: LlmExchange,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct TrialRecord {
    index: usize,
    #[serde(flatten)]
    trial: Trial,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct EndRecord {
    status: SessionStatus,
    best_tau: Option<f64>,
    error: Option<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn tagged<T: Serialize>(kind: &str, record: &T) -> Result<String, StoreError> {
    let mut value = serde_json::to_value(record)?;
    if let Value::Object(map) = &mut value {
        // Put the discriminator first for readability.
        let mut ordered = Map::new();
        ordered.insert("record".into(), Value::String(kind.into()));
        ordered.extend(std::mem::take(map));
        *map = ordered;
    }
    Ok(serde_json::to_string(&value)?)
}

fn header_line(session: &TuningSession) -> Result<String, StoreError> {
    tagged(
        "header",
        &HeaderRecord {
            schema_version: u64::from(SCHEMA_VERSION),
            config: session.config.clone(),
            extra: session.extensions.header.clone(),
        },
    )
}

fn exchange_line(
    exchange: &LlmExchange,
    index: usize,
    extra: Option<&Map<String, Value>>,
) -> Result<String, StoreError> {
    tagged("exchange", &ExchangeRecord { index, exchange: exchange.clone(), extra: extra.cloned().unwrap_or_default() })
}

fn trial_line(trial: &Trial, index: usize, extra: Option<&Map<String, Value>>) -> Result<String, StoreError> {
    tagged("trial", &TrialRecord { index, trial: trial.clone(), extra: extra.cloned().unwrap_or_default() })
}

fn end_line(session: &TuningSession) -> Result<String, StoreError> {
    tagged(
        "end",
        &EndRecord {
            status: session.status,
            best_tau: session.best_tau,
            error: session.error.clone(),
            extra: session.extensions.end.clone(),
        },
    )
}

/// Writes the whole session as JSON lines, replacing `path`.
///
/// Exchanges come before trials; the loop's interleaving is not preserved by
/// a rewrite, but the record indices are.
pub fn write_session(session: &TuningSession, path: &Path) -> Result<(), StoreError> {
    let mut out = String::new();
    out.push_str(&header_line(session)?);
    out.push('\n');
    for (i, exchange) in session.exchanges.iter().enumerate() {
        out.push_str(&exchange_line(exchange, i, session.extensions.exchanges.get(&i))?);
        out.push('\n');
    }
    for (i, trial) in session.trials.iter().enumerate() {
        out.push_str(&trial_line(trial, i, session.extensions.trials.get(&i))?);
        out.push('\n');
    }
    for record in &session.extensions.records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    if session.status != SessionStatus::Running {
        out.push_str(&end_line(session)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_session(path: &Path) -> Result<TuningSession, StoreError> {
    let (session, error) = read_session_partial(path)?;
    match error {
        Some(e) => Err(e),
        None => Ok(session),
    }
}

/// Reads as much of a session file as possible.
///
/// Returns the session built from every line before the first bad one,
/// together with the error for that line. A missing or unreadable header is
/// a hard error.
pub fn read_session_partial(path: &Path) -> Result<(TuningSession, Option<StoreError>), StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(StoreError::EmptySession(path.to_path_buf()));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, first) = lines.next().ok_or_else(|| StoreError::EmptySession(path.to_path_buf()))?;
    let header = parse_header(first)?;
    let mut session = TuningSession::new(header.config);
    session.extensions.header = header.extra;

    let mut ended = false;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if let Err(message) = apply_line(&mut session, line, &mut ended) {
            finalize(&mut session);
            return Ok((session, Some(StoreError::CorruptLine { line: line_no, message })));
        }
    }
    finalize(&mut session);
    Ok((session, None))
}

fn parse_header(line: &str) -> Result<HeaderRecord, StoreError> {
    let corrupt = |message: String| StoreError::CorruptLine { line: 1, message };
    let mut value: Value = serde_json::from_str(line).map_err(|e| corrupt(format!("invalid JSON: {e}")))?;
    let obj = value.as_object_mut().ok_or_else(|| corrupt("header is not a JSON object".into()))?;
    match obj.remove("record") {
        Some(Value::String(kind)) if kind == "header" => {}
        _ => return Err(corrupt("first record must be a header".into())),
    }
    let version = obj
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| corrupt("header lacks schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(StoreError::Version { found: version, expected: SCHEMA_VERSION });
    }
    serde_json::from_value(value).map_err(|e| corrupt(format!("invalid header: {e}")))
}

fn apply_line(session: &mut TuningSession, line: &str, ended: &mut bool) -> Result<(), String> {
    let mut value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    if *ended {
        return Err("record after end of session".into());
    }
    let obj = value.as_object_mut().ok_or("record is not a JSON object")?;
    let kind = match obj.get("record") {
        Some(Value::String(kind)) => kind.clone(),
        _ => return Err("record lacks a `record` discriminator".into()),
    };
    match kind.as_str() {
        "exchange" => {
            obj.remove("record");
            let rec: ExchangeRecord = serde_json::from_value(value).map_err(|e| format!("invalid exchange: {e}"))?;
            if rec.index != session.exchanges.len() {
                return Err(format!("exchange index {} out of order", rec.index));
            }
            if !rec.extra.is_empty() {
                session.extensions.exchanges.insert(rec.index, rec.extra);
            }
            session.exchanges.push(rec.exchange);
        }
        "trial" => {
            obj.remove("record");
            let rec: TrialRecord = serde_json::from_value(value).map_err(|e| format!("invalid trial: {e}"))?;
            if rec.index != session.trials.len() {
                return Err(format!("trial index {} out of order", rec.index));
            }
            if !rec.extra.is_empty() {
                session.extensions.trials.insert(rec.index, rec.extra);
            }
            session.push_trial(rec.trial);
        }
        "end" => {
            obj.remove("record");
            let rec: EndRecord = serde_json::from_value(value).map_err(|e| format!("invalid end record: {e}"))?;
            session.status = rec.status;
            session.error = rec.error;
            session.extensions.end = rec.extra;
            *ended = true;
        }
        "header" => return Err("duplicate header".into()),
        _ => session.extensions.records.push(value),
    }
    Ok(())
}

fn finalize(session: &mut TuningSession) {
    session.best_tau = crate::tuning::best_of(&session.trials).ok().map(|t| t.tau);
}

/// Paths of the two files that make up a persisted session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPaths {
    pub log: PathBuf,
    pub session: PathBuf,
}

impl SessionPaths {
    /// `<prefix>.log` and `<prefix>.session.jsonl`.
    pub fn from_prefix(prefix: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self { log: with(".log"), session: with(".session.jsonl") }
    }
}

/// Append-only writer used while a session runs.
#[derive(Debug)]
pub struct SessionWriter {
    paths: SessionPaths,
    log: Option<File>,
    records: Option<File>,
    exchanges_written: usize,
}

impl SessionWriter {
    pub fn new(paths: SessionPaths) -> Self {
        Self { paths, log: None, records: None, exchanges_written: 0 }
    }

    pub fn paths(&self) -> &SessionPaths {
        &self.paths
    }

    /// Truncates both files and writes the header record.
    pub fn begin(&mut self, session: &TuningSession) -> Result<(), StoreError> {
        for path in [&self.paths.log, &self.paths.session] {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
        }
        let open =
            |path: &Path| OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(io_err(path));
        self.log = Some(open(&self.paths.log)?);
        self.records = Some(open(&self.paths.session)?);
        self.exchanges_written = 0;
        self.write_record(header_line(session)?)
    }

    pub fn append_exchange(&mut self, exchange: &LlmExchange) -> Result<(), StoreError> {
        let line = exchange_line(exchange, self.exchanges_written, None)?;
        self.write_record(line)?;
        self.exchanges_written += 1;
        Ok(())
    }

    pub fn append_trial(&mut self, trial: &Trial, index: usize, with_std: bool) -> Result<(), StoreError> {
        self.write_record(trial_line(trial, index, None)?)?;
        let path = &self.paths.log;
        let file = self.log.as_mut().ok_or_else(|| not_started(path))?;
        writeln!(file, "{}", LogLine::from_trial(trial, with_std)).map_err(io_err(path))?;
        file.flush().map_err(io_err(path))
    }

    pub fn finish(&mut self, session: &TuningSession) -> Result<(), StoreError> {
        self.write_record(end_line(session)?)?;
        self.log = None;
        self.records = None;
        Ok(())
    }

    fn write_record(&mut self, line: String) -> Result<(), StoreError> {
        let path = &self.paths.session;
        let file = self.records.as_mut().ok_or_else(|| not_started(path))?;
        file.write_all(line.as_bytes()).map_err(io_err(path))?;
        file.write_all(b"\n").map_err(io_err(path))?;
        file.flush().map_err(io_err(path))
    }
}

fn not_started(path: &Path) -> StoreError {
    StoreError::Io { path: path.to_path_buf(), source: std::io::Error::other("session writer used before begin()") }
}
