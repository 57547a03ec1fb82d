//! Prompt rendering, chat-completion transport and tau extraction.

use std::collections::VecDeque;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeDelta, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_TUNE_INSTRUCTION: &str = "Tune the hyperparameter tau of an Evolution Stratety.
The algorithm is a (1+1)-ES with Rechenberg rule and parameter tau.
The objective is to maximize the fitness.
Return the full Python code, but only change tau.";

pub const DEFAULT_ANALYSIS_INSTRUCTION: &str =
    "Analyze the following results concerning the influence of tau on the fitness.
Summarize your analysis in one sentence and propose a new value for tau you have not tried.";

/// Appended to the tuning prompt so that a plain reply can be parsed.
pub const PARSE_DIRECTIVE: &str = "Reply with the single line `tau = <value>`.";

/// Appended when the model proposed a value that was already evaluated.
pub const DUPLICATE_REMINDER: &str = "That value was already tried; propose a different one.";

pub const DEFAULT_CHAT_PATH: &str = "/v1/chat/completions";

/// Environment variable holding an optional bearer token.
pub const API_KEY_ENV: &str = "TAUTUNE_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32, payload: Option<String> },
    #[error("scripted backend exhausted after {served} response(s)")]
    ExhaustedScript { served: usize },
    #[error("could not extract tau: {0}")]
    Extraction(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub tune_instruction: String,
    pub analysis_instruction: String,
    /// Whether the tuning prompt ends with [`PARSE_DIRECTIVE`].
    #[serde(default = "default_true")]
    pub parse_directive: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PromptPair {
    fn default() -> Self {
        Self {
            tune_instruction: DEFAULT_TUNE_INSTRUCTION.to_string(),
            analysis_instruction: DEFAULT_ANALYSIS_INSTRUCTION.to_string(),
            parse_directive: true,
        }
    }
}

pub fn render_tune_prompt(pair: &PromptPair) -> Result<String, LlmError> {
    if pair.tune_instruction.trim().is_empty() {
        return Err(LlmError::Prompt("tuning instruction is empty".into()));
    }
    if pair.parse_directive {
        Ok(format!("{}\n\n{}", pair.tune_instruction, PARSE_DIRECTIVE))
    } else {
        Ok(pair.tune_instruction.clone())
    }
}

pub fn render_analysis_prompt(pair: &PromptPair, log_text: &str) -> Result<String, LlmError> {
    if log_text.is_empty() {
        return Err(LlmError::Prompt("analysis prompt needs a non-empty log".into()));
    }
    if pair.analysis_instruction.trim().is_empty() {
        return Err(LlmError::Prompt("analysis instruction is empty".into()));
    }
    Ok(format!("{}\n\n{}", pair.analysis_instruction, log_text))
}

/// One request/response pair, kept verbatim for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub prompt: String,
    pub response: String,
    pub latency_ms: f64,
    pub timestamp: DateTime<Utc>,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmBackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub path: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_seconds: f64,
    pub transport_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_base_ms: u64,
    pub scripted_responses: Vec<String>,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: None,
            path: DEFAULT_CHAT_PATH.to_string(),
            model: "llama3".to_string(),
            temperature: 0.7,
            timeout_seconds: 60.0,
            transport_retries: 2,
            backoff_base_ms: 1000,
            scripted_responses: Vec::new(),
        }
    }
}

impl LlmBackendConfig {
    pub fn http(base_url: impl Into<String>) -> Self {
        Self { kind: BackendKind::Http, base_url: Some(base_url.into()), ..Self::default() }
    }

    pub fn scripted<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            kind: BackendKind::Scripted,
            scripted_responses: responses.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            BackendKind::Http => {
                let url = self.base_url.as_deref().unwrap_or("");
                if url.trim().is_empty() {
                    return Err(LlmError::Config("http backend requires a base_url".into()));
                }
            }
            BackendKind::Scripted => {
                if self.scripted_responses.is_empty() {
                    return Err(LlmError::Config("scripted backend requires at least one response".into()));
                }
            }
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(LlmError::Config("timeout_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        let base = self.base_url.as_deref().unwrap_or("").trim_end_matches('/');
        if self.path.is_empty() {
            base.to_string()
        } else if self.path.starts_with('/') {
            format!("{base}{}", self.path)
        } else {
            format!("{base}/{}", self.path)
        }
    }

    /// Builds the backend this configuration describes.
    pub fn build(&self) -> Result<Box<dyn LlmBackend>, LlmError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => Box::new(HttpBackend::new(self.clone())?),
            BackendKind::Scripted => Box::new(ScriptedBackend::new(self.scripted_responses.clone())),
        })
    }
}

/// Something that answers a single-turn prompt.
pub trait LlmBackend {
    /// Sends `prompt`; `attempt` is recorded in the returned exchange.
    fn send(&mut self, prompt: &str, attempt: u32) -> Result<LlmExchange, LlmError>;
}

/// Replays canned responses in order without touching the network.
///
/// Timestamps are synthetic: call `k` (0-based) is stamped `k` seconds after
/// the Unix epoch with zero latency, so replays produce identical records.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    responses: VecDeque<String>,
    served: usize,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { responses: responses.into_iter().map(Into::into).collect(), served: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.responses.len()
    }
}

impl LlmBackend for ScriptedBackend {
    fn send(&mut self, prompt: &str, attempt: u32) -> Result<LlmExchange, LlmError> {
        let response = self.responses.pop_front().ok_or(LlmError::ExhaustedScript { served: self.served })?;
        let timestamp = DateTime::<Utc>::UNIX_EPOCH + TimeDelta::seconds(self.served as i64);
        self.served += 1;
        Ok(LlmExchange { prompt: prompt.to_string(), response, latency_ms: 0.0, timestamp, attempt })
    }
}

/// Blocking chat-completion client.
pub struct HttpBackend {
    config: LlmBackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: LlmBackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_seconds))
            .build()
            .map_err(|e| LlmError::Config(format!("cannot build http client: {e}")))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self { config, client, api_key })
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        chat_request_body(&self.config.model, prompt, self.config.temperature)
    }

    fn post_once(&self, body: &Value) -> Result<String, AttemptError> {
        let mut request =
            self.client.post(self.config.endpoint()).header("Content-Type", "application/json").body(body.to_string());
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| AttemptError {
            message: format!("request failed: {e}"),
            payload: None,
            retryable: true,
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| AttemptError {
            message: format!("failed to read response body: {e}"),
            payload: None,
            retryable: true,
        })?;
        if !status.is_success() {
            return Err(AttemptError {
                message: format!("endpoint returned HTTP {status}"),
                payload: Some(text),
                retryable: true,
            });
        }
        parse_chat_response(&text).map_err(|message| AttemptError { message, payload: Some(text), retryable: false })
    }
}

struct AttemptError {
    message: String,
    payload: Option<String>,
    retryable: bool,
}

impl LlmBackend for HttpBackend {
    fn send(&mut self, prompt: &str, attempt: u32) -> Result<LlmExchange, LlmError> {
        let body = self.request_body(prompt);
        let timestamp = Utc::now();
        let started = Instant::now();
        let mut tries = 0u32;
        loop {
            tries += 1;
            match self.post_once(&body) {
                Ok(response) => {
                    return Ok(LlmExchange {
                        prompt: prompt.to_string(),
                        response,
                        latency_ms: started.elapsed().as_secs_f64() * 1000.0,
                        timestamp,
                        attempt,
                    });
                }
                Err(err) if err.retryable && tries <= self.config.transport_retries => {
                    let delay = self.config.backoff_base_ms.saturating_mul(1u64 << (tries - 1).min(20));
                    thread::sleep(Duration::from_millis(delay));
                }
                Err(err) => {
                    return Err(LlmError::Transport { message: err.message, attempts: tries, payload: err.payload });
                }
            }
        }
    }
}

/// JSON body of a single-turn chat-completion request.
pub fn chat_request_body(model: &str, prompt: &str, temperature: f64) -> Value {
    json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": temperature,
        "stream": false,
    })
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn parse_chat_response(text: &str) -> Result<String, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON response: {e}"))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content string".to_string())
}

const NUMBER: &str = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)";

fn fence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)```[ \t]*(?:python|py|code)?[ \t]*$|```|^[ \t]*(?:python|code)[ \t]*$").unwrap()
    })
}

fn tau_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // `tau = v` directly, or `tau of` / `value for tau` followed by a number
        // before the sentence ends. A '.' only ends a sentence when followed by
        // whitespace or the end of the text.
        let pattern = format!(
            r"(?i)(?:\b(?:tau|τ)\s*:?=\s*{NUMBER}|(?:\btau\s+of|\bvalue\s+for\s+(?:tau|τ))(?:[^.!?\n]|[.!?][^\s])*?{NUMBER})"
        );
        Regex::new(&pattern).unwrap()
    })
}

/// Removes code fences and the bare `python` / `code` labels around them.
pub fn sanitize_response(response: &str) -> String {
    fence_regex().replace_all(response, "").into_owned()
}

/// Extracts the proposed tau from a free-text response.
///
/// The last match wins; it must be a positive finite number.
pub fn extract_tau(response: &str) -> Result<f64, LlmError> {
    let cleaned = sanitize_response(response);
    let last = tau_regex()
        .captures_iter(&cleaned)
        .last()
        .ok_or_else(|| LlmError::Extraction("no tau assignment found in response".into()))?;
    let literal = last.get(1).or_else(|| last.get(2)).map(|m| m.as_str()).unwrap_or_default();
    let value: f64 = literal.parse().map_err(|_| LlmError::Extraction(format!("`{literal}` is not a number")))?;
    if !value.is_finite() {
        return Err(LlmError::Extraction(format!("tau `{literal}` is not finite")));
    }
    if value <= 0.0 {
        return Err(LlmError::Extraction(format!("tau must be positive, got {value}")));
    }
    Ok(value)
}
