//! OpenAI-compatible completions / chat-completions client that reads the
//! next-token log-probabilities of the candidate labels.
//!
//! Requests use `max_tokens = 1`, `temperature = 0` and ask for the top-k
//! log-probabilities. A label matches a listed token spelled either `A` or
//! ` A`; matches are summed.
//!
//! The transport can be live HTTP, replay from a JSON-lines fixture, or live
//! HTTP that records every new exchange into the fixture.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendDescriptor, LabelLogProbs, QueryCacheKey, QueryRequest, TokenBucket, Visibility};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    Completions,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        let ms = if self.jitter {
            (exp as f64 * rand::thread_rng().gen_range(0.5..=1.0)) as u64
        } else {
            exp
        };
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    pub endpoint: Endpoint,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub top_logprobs: usize,
    /// Requests per second; 0 disables pacing.
    pub requests_per_second: f64,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, endpoint: Endpoint) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            endpoint,
            api_key_env: None,
            top_logprobs: 5,
            requests_per_second: 0.0,
            retry: RetryPolicy::default(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Live,
    /// Serve only from the fixture; a miss is an error.
    Replay(PathBuf),
    /// Serve from the fixture when possible, otherwise go live and append.
    Record(PathBuf),
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    key: QueryCacheKey,
    request: Value,
    response: Value,
}

struct Fixture {
    records: Mutex<HashMap<QueryCacheKey, Value>>,
    sink: Option<Mutex<std::fs::File>>,
}

impl Fixture {
    fn load(path: &Path, writable: bool) -> Result<Self> {
        let mut records = HashMap::new();
        match std::fs::File::open(path) {
            Ok(f) => {
                for (n, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Backend {
                        backend: "fixture".into(),
                        message: format!("{}:{}: {e}", path.display(), n + 1),
                    })?;
                    records.insert(rec.key, rec.response);
                }
            }
            Err(e) if writable && e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        let sink = if writable {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some(Mutex::new(f))
        } else {
            None
        };
        Ok(Self {
            records: Mutex::new(records),
            sink,
        })
    }

    fn get(&self, key: &QueryCacheKey) -> Option<Value> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).get(key).cloned()
    }

    fn append(&self, key: QueryCacheKey, request: Value, response: Value) -> Result<()> {
        let mut records = self.records.lock().unwrap_or_else(|e| e.into_inner());
        if records.contains_key(&key) {
            return Ok(());
        }
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(&FixtureRecord {
                key: key.clone(),
                request,
                response: response.clone(),
            })?;
            let mut f = sink.lock().unwrap_or_else(|e| e.into_inner());
            writeln!(f, "{line}").map_err(|e| Error::io("fixture", e))?;
            f.flush().map_err(|e| Error::io("fixture", e))?;
        }
        records.insert(key, response);
        Ok(())
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    api_key: Option<String>,
    client: Option<reqwest::blocking::Client>,
    bucket: TokenBucket,
    fixture: Option<Fixture>,
    calls: AtomicU64,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig, transport: Transport) -> Result<Self> {
        if config.top_logprobs == 0 {
            return Err(Error::InvalidArgument("top_logprobs must be >= 1".into()));
        }
        let (live, fixture) = match &transport {
            Transport::Live => (true, None),
            Transport::Replay(p) => (false, Some(Fixture::load(p, false)?)),
            Transport::Record(p) => (true, Some(Fixture::load(p, true)?)),
        };
        let api_key = match (&config.api_key_env, live) {
            (Some(var), true) => match std::env::var(var) {
                Ok(k) => Some(k),
                Err(_) => {
                    warn!("environment variable {var} is not set; sending requests without a key");
                    None
                }
            },
            _ => None,
        };
        let client = if live {
            Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(config.timeout_secs))
                    .build()
                    .map_err(|e| Error::Backend {
                        backend: "openai".into(),
                        message: e.to_string(),
                    })?,
            )
        } else {
            None
        };
        let bucket = TokenBucket::new(config.requests_per_second, 1.0);
        Ok(Self {
            config,
            api_key,
            client,
            bucket,
            fixture,
            calls: AtomicU64::new(0),
        })
    }

    fn kind(&self) -> &'static str {
        match self.config.endpoint {
            Endpoint::Completions => "openai-completions",
            Endpoint::Chat => "openai-chat",
        }
    }

    fn url(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.config.endpoint {
            Endpoint::Completions => format!("{base}/completions"),
            Endpoint::Chat => format!("{base}/chat/completions"),
        }
    }

    /// Request body as sent over the wire (without credentials).
    pub fn request_body(&self, request: &QueryRequest<'_>) -> Value {
        let prompt = request.prompt;
        match self.config.endpoint {
            Endpoint::Completions => {
                let text = match &prompt.system {
                    Some(s) => format!("{s}\n{}", prompt.text),
                    None => prompt.text.clone(),
                };
                json!({
                    "model": self.config.model,
                    "prompt": text,
                    "max_tokens": 1,
                    "temperature": 0,
                    "logprobs": self.config.top_logprobs,
                })
            }
            Endpoint::Chat => {
                let mut messages = Vec::new();
                if let Some(s) = &prompt.system {
                    messages.push(json!({"role": "system", "content": s}));
                }
                messages.push(json!({"role": "user", "content": prompt.text}));
                json!({
                    "model": self.config.model,
                    "messages": messages,
                    "max_tokens": 1,
                    "temperature": 0,
                    "logprobs": true,
                    "top_logprobs": self.config.top_logprobs,
                })
            }
        }
    }

    fn send(&self, body: &Value) -> Result<Value> {
        let client = self.client.as_ref().ok_or_else(|| Error::Backend {
            backend: self.kind().into(),
            message: "no live transport".into(),
        })?;
        let policy = &self.config.retry;
        let attempts = policy.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = policy.delay(attempt - 1);
                debug!("retrying in {wait:?} after: {last}");
                std::thread::sleep(wait);
            }
            self.bucket.acquire();
            self.calls.fetch_add(1, Ordering::Relaxed);
            let mut req = client.post(self.url()).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| Error::Backend {
                            backend: self.kind().into(),
                            message: format!("invalid JSON response: {e}"),
                        });
                    }
                    last = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                    let transient = status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error();
                    if !transient {
                        return Err(Error::Http {
                            attempts: attempt + 1,
                            message: last,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Http {
            attempts,
            message: last,
        })
    }

    fn exchange(&self, request: &QueryRequest<'_>) -> Result<Value> {
        let key = QueryCacheKey::compute(&self.descriptor(), request);
        if let Some(fixture) = &self.fixture {
            if let Some(hit) = fixture.get(&key) {
                return Ok(hit);
            }
            if self.client.is_none() {
                return Err(Error::FixtureMiss(key.to_string()));
            }
        }
        let body = self.request_body(request);
        let response = self.send(&body)?;
        if let Some(fixture) = &self.fixture {
            fixture.append(key, body, response.clone())?;
        }
        Ok(response)
    }
}

/// Extracts the label probabilities from an OpenAI-style response.
pub fn parse_top_logprobs(endpoint: Endpoint, response: &Value, labels: &[String], top_k: usize) -> Result<LabelLogProbs> {
    let missing = |what: &str| Error::Backend {
        backend: "openai".into(),
        message: format!("response has no {what}"),
    };
    let logprobs = response
        .pointer("/choices/0/logprobs")
        .ok_or_else(|| missing("choices[0].logprobs"))?;
    let listing: Vec<(String, f64)> = match endpoint {
        Endpoint::Completions => logprobs
            .pointer("/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or_else(|| missing("top_logprobs[0]"))?
            .iter()
            .filter_map(|(tok, lp)| lp.as_f64().map(|lp| (tok.clone(), lp)))
            .collect(),
        Endpoint::Chat => logprobs
            .pointer("/content/0/top_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| missing("content[0].top_logprobs"))?
            .iter()
            .filter_map(|e| Some((e.get("token")?.as_str()?.to_string(), e.get("logprob")?.as_f64()?)))
            .collect(),
    };
    let listed_mass: f64 = listing.iter().map(|(_, lp)| lp.exp()).sum();
    let probs = labels
        .iter()
        .map(|label| {
            let spaced = format!(" {label}");
            let matches: Vec<f64> = listing
                .iter()
                .filter(|(tok, _)| *tok == *label || *tok == spaced)
                .map(|(_, lp)| lp.exp())
                .collect();
            (!matches.is_empty()).then(|| matches.iter().sum())
        })
        .collect();
    Ok(LabelLogProbs {
        labels: labels.to_vec(),
        probs,
        listed_mass: listed_mass.min(1.0),
        visibility: Visibility::TopK(top_k),
    })
}

impl Backend for OpenAiBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: self.kind().into(),
            model: self.config.model.clone(),
            params: json!({
                "max_tokens": 1,
                "temperature": 0,
                "top_logprobs": self.config.top_logprobs,
            }),
        }
    }

    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs> {
        self.query_with_wire(request).map(|(r, _)| r)
    }

    fn query_with_wire(&self, request: &QueryRequest<'_>) -> Result<(LabelLogProbs, Option<String>)> {
        let response = self.exchange(request)?;
        let parsed = parse_top_logprobs(self.config.endpoint, &response, &request.labels(), self.config.top_logprobs)?;
        Ok((parsed, Some(response.to_string())))
    }

    fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
