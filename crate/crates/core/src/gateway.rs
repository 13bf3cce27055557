//! Chat-completions transport and the offline simulated responder.

use std::sync::LazyLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::promptkit::RenderedPrompt;
use crate::telemetry::{apply_rule, Label, RuleConfig, ZScoreVector};

pub const API_KEY_ENV: &str = "RULEPROMPT_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("prompt has no abs_z value block; the simulated responder only serves z-score setups")]
    UnparseableValueBlock,
    #[error("failed to build HTTP client: {0}")]
    Client(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// First retry delay; doubles on each further retry.
    pub backoff_base_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            model_name: "gpt-oss-20b".into(),
            api_key: None,
            timeout_secs: 120.0,
            max_retries: 2,
            temperature: 0.0,
            backoff_base_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::InvalidConfig(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::InvalidConfig("base_url is empty".into()));
        }
        Ok(())
    }

    /// Configured key, else the `RULEPROMPT_API_KEY` environment variable.
    pub fn resolved_api_key(&self) -> Option<String> {
        self.api_key
            .clone()
            .or_else(|| std::env::var(API_KEY_ENV).ok())
            .filter(|k| !k.is_empty())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(16)))
    }

    /// Upper bound on wall time spent in one `send`.
    pub fn worst_case_duration(&self) -> Duration {
        let per_try = Duration::from_secs_f64(self.timeout_secs);
        let backoff: Duration = (0..self.max_retries).map(|r| self.backoff(r)).sum();
        per_try * (self.max_retries + 1) + backoff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "code")]
pub enum TransportStatus {
    Ok,
    Timeout,
    HttpError(u16),
    ParseError,
    MissingApiKey,
    Connection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub prompt_text: String,
    /// Empty unless `transport_status` is `Ok`.
    pub reply_text: String,
    pub prompt_tokens: usize,
    pub latency_secs: f64,
    pub transport_status: TransportStatus,
    pub attempts: u32,
}

impl ChatExchange {
    fn failed(prompt: &RenderedPrompt, status: TransportStatus, latency: f64, attempts: u32) -> Self {
        Self {
            prompt_text: prompt.text.clone(),
            reply_text: String::new(),
            prompt_tokens: prompt.token_count,
            latency_secs: latency,
            transport_status: status,
            attempts,
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

enum Attempt {
    Done(Result<String, TransportStatus>),
    Retry(TransportStatus),
}

/// Blocking chat-completions client, shareable across worker threads.
#[derive(Debug, Clone)]
pub struct ChatClient {
    cfg: EndpointConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Client(e.to_string()))?;
        Ok(Self {
            api_key: cfg.resolved_api_key(),
            cfg,
            http,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let mut req = self.http.post(self.cfg.completions_url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(TransportStatus::Timeout),
            Err(e) => {
                log::debug!("request failed: {e}");
                return Attempt::Retry(TransportStatus::Connection);
            }
        };
        let status = resp.status();
        if status.is_server_error() {
            return Attempt::Retry(TransportStatus::HttpError(status.as_u16()));
        }
        if matches!(status.as_u16(), 401 | 403) && self.api_key.is_none() {
            return Attempt::Done(Err(TransportStatus::MissingApiKey));
        }
        if !status.is_success() {
            return Attempt::Done(Err(TransportStatus::HttpError(status.as_u16())));
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(TransportStatus::Timeout),
            Err(_) => return Attempt::Done(Err(TransportStatus::ParseError)),
        };
        let content = serde_json::from_str::<CompletionResponse>(&text)
            .ok()
            .and_then(|r| r.choices.into_iter().next())
            .and_then(|c| c.message.content)
            .filter(|c| !c.is_empty());
        Attempt::Done(content.ok_or(TransportStatus::ParseError))
    }

    /// POSTs the prompt as a single user message. Timeouts, connection
    /// failures and 5xx responses are retried with exponential backoff.
    pub fn send(&self, prompt: &RenderedPrompt) -> ChatExchange {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.cfg.temperature,
        });
        let start = Instant::now();
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(r) => break r,
                Attempt::Retry(status) if attempts > self.cfg.max_retries => break Err(status),
                Attempt::Retry(status) => {
                    log::warn!(
                        "attempt {attempts} failed with {status:?}, retrying in {:?}",
                        self.cfg.backoff(attempts - 1)
                    );
                    std::thread::sleep(self.cfg.backoff(attempts - 1));
                }
            }
        };
        let latency = start.elapsed().as_secs_f64();
        match outcome {
            Ok(reply) => ChatExchange {
                prompt_text: prompt.text.clone(),
                reply_text: reply,
                prompt_tokens: prompt.token_count,
                latency_secs: latency,
                transport_status: TransportStatus::Ok,
                attempts,
            },
            Err(status) => ChatExchange::failed(prompt, status, latency, attempts),
        }
    }
}

pub fn send_chat(cfg: &EndpointConfig, prompt: &RenderedPrompt) -> Result<ChatExchange, GatewayError> {
    Ok(ChatClient::new(cfg.clone())?.send(prompt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    LabelOnly,
    LabelPlusExplanation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedResponderConfig {
    pub rule: RuleConfig,
    /// Probability of emitting the rule-correct label.
    pub fidelity: f64,
    pub verbosity: Verbosity,
    pub seed: u64,
}

impl Default for SimulatedResponderConfig {
    fn default() -> Self {
        Self {
            rule: RuleConfig::default(),
            fidelity: 1.0,
            verbosity: Verbosity::LabelPlusExplanation,
            seed: 0,
        }
    }
}

impl SimulatedResponderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.fidelity) {
            return Err(GatewayError::InvalidConfig(format!(
                "fidelity must lie in [0, 1], got {}",
                self.fidelity
            )));
        }
        Ok(())
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) that depends only on `(seed, sample_index)`.
pub fn sample_uniform(seed: u64, sample_index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(sample_index));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

static VALUE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^Sensor (\d+): (?:value = \S+, mean = \S+, std = \S+, )?abs_z = (\d+(?:\.\d+)?)$",
    )
    .expect("valid regex")
});

static ANY_VALUE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Sensor \d+: (?:value|abs_z) = ").expect("valid regex"));

/// One parsed line of the query value block: 0-based id and displayed abs_z.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEntry {
    pub id: usize,
    pub abs_z: f64,
    pub text: String,
}

/// Reads abs_z entries from the last value block in a prompt. Exemplar blocks
/// come earlier and are separated from the query by their label lines.
pub fn extract_value_block(prompt_text: &str) -> Option<Vec<BlockEntry>> {
    let mut runs: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in prompt_text.lines() {
        if ANY_VALUE_LINE.is_match(line) {
            current.push(line);
        } else if !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    let block = runs.pop()?;
    let mut entries = Vec::with_capacity(block.len());
    for line in block {
        let caps = VALUE_LINE.captures(line)?;
        let display: usize = caps[1].parse().ok()?;
        let id = display.checked_sub(1)?;
        let abs_z: f64 = caps[2].parse().ok()?;
        entries.push(BlockEntry {
            id,
            abs_z,
            text: caps[2].to_string(),
        });
    }
    Some(entries)
}

/// Offline responder: applies the rule to the abs_z values it reads from the
/// prompt and answers correctly with probability `fidelity`.
pub fn simulate_response(
    cfg: &SimulatedResponderConfig,
    prompt: &RenderedPrompt,
    sample_index: u64,
) -> Result<ChatExchange, GatewayError> {
    cfg.validate()?;
    let entries = extract_value_block(&prompt.text).ok_or(GatewayError::UnparseableValueBlock)?;
    let width = entries.iter().map(|e| e.id + 1).max().unwrap_or(0);
    let mut abs = vec![0.0; width];
    for e in &entries {
        abs[e.id] = e.abs_z;
    }
    let z = ZScoreVector::new(abs).map_err(|_| GatewayError::UnparseableValueBlock)?;
    let (truth, flagged) =
        apply_rule(&z, &cfg.rule).map_err(|_| GatewayError::UnparseableValueBlock)?;

    let correct = sample_uniform(cfg.seed, sample_index) < cfg.fidelity;
    let label = if correct { truth } else { truth.opposite() };

    let mut reply = label.as_str().to_string();
    if cfg.verbosity == Verbosity::LabelPlusExplanation {
        let tau = cfg.rule.tau_text();
        match label {
            Label::Anomaly => {
                let cited: Vec<usize> = if flagged.is_empty() {
                    // A wrong anomaly call blames the largest deviation.
                    entries
                        .iter()
                        .max_by(|a, b| a.abs_z.total_cmp(&b.abs_z).then(b.id.cmp(&a.id)))
                        .map(|e| vec![e.id])
                        .unwrap_or_default()
                } else {
                    flagged
                };
                for id in cited {
                    let text = entries
                        .iter()
                        .find(|e| e.id == id)
                        .map(|e| e.text.as_str())
                        .unwrap_or("0.0");
                    reply.push_str(&format!("\nSensor {}: abs_z = {text} exceeds {tau}", id + 1));
                }
            }
            Label::Nominal => reply.push_str(&format!("\nall abs_z below {tau}")),
        }
    }

    Ok(ChatExchange {
        prompt_text: prompt.text.clone(),
        reply_text: reply,
        prompt_tokens: prompt.token_count,
        latency_secs: 0.0,
        transport_status: TransportStatus::Ok,
        attempts: 1,
    })
}

/// Anything that turns a rendered prompt into a chat exchange.
pub trait Responder: Sync {
    fn respond(&self, prompt: &RenderedPrompt, sample_index: usize) -> Result<ChatExchange, GatewayError>;
}

impl Responder for ChatClient {
    fn respond(&self, prompt: &RenderedPrompt, _sample_index: usize) -> Result<ChatExchange, GatewayError> {
        Ok(self.send(prompt))
    }
}

impl Responder for SimulatedResponderConfig {
    fn respond(&self, prompt: &RenderedPrompt, sample_index: usize) -> Result<ChatExchange, GatewayError> {
        simulate_response(self, prompt, sample_index as u64)
    }
}
