//! Backends that score candidate labels for a rendered prompt.
//!
//! Every backend returns raw per-label probabilities ([`LabelLogProbs`]);
//! [`renormalize_topk`] turns those into a distribution over the slots shown
//! in the prompt.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::RenderedPrompt;

mod cache;
mod openai;
mod ratelimit;
mod synthetic;

pub use cache::{CacheStore, CachedBackend};
pub use openai::{
    parse_top_logprobs, Endpoint, OpenAiBackend, OpenAiConfig, RetryPolicy, Transport,
};
pub use ratelimit::TokenBucket;
pub use synthetic::{simulate_response, simulate_slots, SyntheticBackend, SyntheticModelSpec};

/// Whether the backend exposes the whole next-token distribution or only a
/// top-k listing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Visibility {
    Full,
    TopK(usize),
}

/// Raw label probabilities as reported by a backend, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLogProbs {
    pub labels: Vec<String>,
    /// `None` when the label did not appear in the listing.
    pub probs: Vec<Option<f64>>,
    /// Total mass of the reported listing (all tokens, not only labels).
    pub listed_mass: f64,
    pub visibility: Visibility,
}

impl LabelLogProbs {
    pub fn full(labels: Vec<String>, probs: Vec<f64>) -> Self {
        let listed_mass = probs.iter().sum();
        Self {
            labels,
            probs: probs.into_iter().map(Some).collect(),
            listed_mass,
            visibility: Visibility::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.probs.len() {
            return Err(Error::InvalidArgument("labels and probabilities differ in length".into()));
        }
        if self.probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("label probability outside [0, 1]".into()));
        }
        if self.listed_mass > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "listed mass {} exceeds 1",
                self.listed_mass
            )));
        }
        Ok(())
    }
}

/// What a backend is asked to score.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRequest<'a> {
    pub question: &'a str,
    pub prompt: &'a RenderedPrompt,
}

impl<'a> QueryRequest<'a> {
    pub fn new(question: &'a str, prompt: &'a RenderedPrompt) -> Self {
        Self { question, prompt }
    }

    pub fn labels(&self) -> Vec<String> {
        self.prompt.labels()
    }
}

/// Identity of a backend for cache keys and reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: String,
    pub model: String,
    /// Decoding parameters, canonical JSON.
    pub params: serde_json::Value,
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs>;

    /// Like [`Backend::query`], also returning the raw response body when
    /// there is one.
    fn query_with_wire(&self, request: &QueryRequest<'_>) -> Result<(LabelLogProbs, Option<String>)> {
        self.query(request).map(|r| (r, None))
    }

    /// Number of requests that went over the network.
    fn network_calls(&self) -> u64 {
        0
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs> {
        (**self).query(request)
    }
    fn query_with_wire(&self, request: &QueryRequest<'_>) -> Result<(LabelLogProbs, Option<String>)> {
        (**self).query_with_wire(request)
    }
    fn network_calls(&self) -> u64 {
        (**self).network_calls()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs> {
        (**self).query(request)
    }
    fn query_with_wire(&self, request: &QueryRequest<'_>) -> Result<(LabelLogProbs, Option<String>)> {
        (**self).query_with_wire(request)
    }
    fn network_calls(&self) -> u64 {
        (**self).network_calls()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs> {
        (**self).query(request)
    }
    fn query_with_wire(&self, request: &QueryRequest<'_>) -> Result<(LabelLogProbs, Option<String>)> {
        (**self).query_with_wire(request)
    }
    fn network_calls(&self) -> u64 {
        (**self).network_calls()
    }
}

/// Content hash identifying a query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryCacheKey(String);

impl QueryCacheKey {
    pub fn compute(descriptor: &BackendDescriptor, request: &QueryRequest<'_>) -> Self {
        // serde_json::Value keeps object keys sorted, so this is canonical.
        let canonical = serde_json::json!({
            "backend": descriptor.kind,
            "model": descriptor.model,
            "params": descriptor.params,
            "question": request.question,
            "system": request.prompt.system,
            "prompt": request.prompt.text,
            "labels": request.labels(),
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        Self(hex::encode(digest))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for QueryCacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Distribution over the `k` candidate labels, in candidate order.
///
/// Each unseen candidate receives `min(remaining mass, smallest observed
/// candidate probability)`, independently of the others; the `k` values are
/// then normalized to sum to one.
pub fn renormalize_topk(observed: &LabelLogProbs, k: usize) -> Result<Vec<f64>> {
    if observed.probs.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} candidate labels for a {k}-answer question",
            observed.probs.len()
        )));
    }
    let seen: Vec<f64> = observed.probs.iter().flatten().copied().collect();
    if seen.is_empty() || seen.iter().all(|p| *p <= 0.0) {
        return Err(Error::UnusableQuery);
    }
    let remaining = (1.0 - observed.listed_mass).max(0.0);
    let smallest = seen.iter().copied().fold(f64::INFINITY, f64::min);
    let fill = remaining.min(smallest);
    let raw: Vec<f64> = observed.probs.iter().map(|p| p.unwrap_or(fill)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|p| p / total).collect())
}

/// Queries a backend and renormalizes: slot-ordered probabilities.
pub fn query_slot_distribution(
    backend: &dyn Backend,
    question: &str,
    prompt: &RenderedPrompt,
) -> Result<Vec<f64>> {
    let observed = backend.query(&QueryRequest::new(question, prompt))?;
    observed.validate()?;
    renormalize_topk(&observed, prompt.slots.len())
}
