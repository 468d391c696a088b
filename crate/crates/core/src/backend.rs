//! Generation backends.
//!
//! Every backend maps an encoded exemplar list to sampled output strings.
//! Three implementations ship here: a recombination stub, an oracle that
//! replays a hidden pool of true slice examples, and an HTTP client for an
//! external inference service.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_target, escape, parse_marked, split_exemplars, AnonymizationMode, SliceContext};
use crate::dataset::Example;
use crate::seed::{derive_seed, rng_for, sha256_hex};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_LENGTH: usize = 256;
pub const DEFAULT_SAMPLES_PER_REQUEST: usize = 3;
pub const ENDPOINT_ENV: &str = "EX2_GEN_ENDPOINT";
pub const TOKEN_ENV: &str = "EX2_GEN_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub input: String,
    pub num_samples: usize,
    /// Characters for the stub and oracle, tokens for remote backends.
    pub max_length: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    /// In-process routing hint naming the slice being augmented. Never sent
    /// over the wire.
    #[serde(skip)]
    pub slice_hint: Option<String>,
}

impl GenerationRequest {
    pub fn new(input: impl Into<String>, num_samples: usize) -> Self {
        GenerationRequest {
            input: input.into(),
            num_samples,
            max_length: DEFAULT_MAX_LENGTH,
            temperature: DEFAULT_TEMPERATURE,
            seed: None,
            slice_hint: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_slice(mut self, slice: impl Into<String>) -> Self {
        self.slice_hint = Some(slice.into());
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |reason: &str| {
            Err(BackendError::InvalidRequest {
                request_id: self.request_id(),
                reason: reason.to_string(),
            })
        };
        if self.num_samples == 0 {
            return invalid("num_samples must be at least 1");
        }
        if self.max_length == 0 {
            return invalid("max_length must be at least 1");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be a finite non-negative number");
        }
        Ok(())
    }

    /// Short content hash identifying this request in errors and logs.
    pub fn request_id(&self) -> String {
        let key = format!(
            "{}\u{0}{}\u{0}{}\u{0}{}\u{0}{:?}\u{0}{:?}",
            self.input, self.num_samples, self.max_length, self.temperature, self.seed, self.slice_hint
        );
        sha256_hex(key.as_bytes())[..16].to_string()
    }

    fn stream_seed(&self, backend_seed: u64) -> u64 {
        derive_seed(self.seed.unwrap_or(backend_seed), &[&self.request_id()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub outputs: Vec<String>,
    pub backend_id: String,
    pub latency_ms: u64,
    /// How many of the requested samples could not be produced.
    #[serde(default)]
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request {request_id}: invalid request: {reason}")]
    InvalidRequest { request_id: String, reason: String },
    #[error("request {request_id}: backend unavailable after {attempts} attempt(s): {detail}")]
    Unavailable {
        request_id: String,
        attempts: u32,
        detail: String,
    },
    #[error("request {request_id}: timed out after {attempts} attempt(s)")]
    Timeout { request_id: String, attempts: u32 },
    #[error("request {request_id}: malformed response: {detail}")]
    MalformedResponse { request_id: String, detail: String },
    #[error("request {request_id}: rejected with HTTP {status} ({code}): {message}")]
    MalformedRequest {
        request_id: String,
        status: u16,
        code: String,
        message: String,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable { .. } | BackendError::Timeout { .. })
    }

    pub fn request_id(&self) -> &str {
        match self {
            BackendError::InvalidRequest { request_id, .. }
            | BackendError::Unavailable { request_id, .. }
            | BackendError::Timeout { request_id, .. }
            | BackendError::MalformedResponse { request_id, .. }
            | BackendError::MalformedRequest { request_id, .. } => request_id,
        }
    }
}

/// Sampling from p(e | exemplars). Implementations must tolerate concurrent
/// calls.
pub trait GenerationBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Box<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req)
    }
}

fn cap_chars(text: String, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((byte, _)) => text[..byte].to_string(),
        None => text,
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Word(String),
    Space(String),
    Marker { label: String, content: String },
}

fn pieces(exemplar: &str) -> Option<Vec<Piece>> {
    let marked = parse_marked(exemplar).ok()?;
    let chars: Vec<char> = marked.text.chars().collect();
    let mut out = Vec::new();
    let push_text = |from: usize, to: usize, out: &mut Vec<Piece>| {
        let mut i = from;
        while i < to {
            let space = chars[i].is_whitespace();
            let mut j = i;
            while j < to && chars[j].is_whitespace() == space {
                j += 1;
            }
            let run: String = chars[i..j].iter().collect();
            out.push(if space { Piece::Space(run) } else { Piece::Word(run) });
            i = j;
        }
    };
    let mut cursor = 0;
    for span in &marked.spans {
        push_text(cursor, span.start, &mut out);
        out.push(Piece::Marker {
            label: span.label.clone(),
            content: chars[span.start..span.end].iter().collect(),
        });
        cursor = span.end;
    }
    push_text(cursor, chars.len(), &mut out);
    Some(out)
}

fn render_pieces(pieces: &[Piece]) -> String {
    let mut out = String::new();
    for piece in pieces {
        match piece {
            Piece::Word(w) | Piece::Space(w) => out.push_str(&escape(w)),
            Piece::Marker { label, content } => {
                out.push('[');
                out.push_str(&escape(label));
                out.push(' ');
                out.push_str(&escape(content));
                out.push(']');
            }
        }
    }
    out
}

/// Deterministic recombination of exemplar parts: pick one exemplar as a
/// template, swap its span contents with same-label spans from the other
/// exemplars, and swap one plain word with a word from another exemplar.
#[derive(Debug, Clone)]
pub struct StubBackend {
    seed: u64,
    /// Chance of the word swap when the template has spans. Span-free
    /// templates always get one.
    pub word_swap_probability: f64,
}

impl StubBackend {
    pub fn new(seed: u64) -> Self {
        StubBackend {
            seed,
            word_swap_probability: 0.5,
        }
    }

    fn sample_one(&self, exemplars: &[Vec<Piece>], rng: &mut impl Rng) -> String {
        let t = rng.gen_range(0..exemplars.len());
        let mut out = exemplars[t].clone();
        let others: Vec<&Vec<Piece>> = exemplars
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t)
            .map(|(_, e)| e)
            .collect();

        let mut has_markers = false;
        for piece in out.iter_mut() {
            if let Piece::Marker { label, content } = piece {
                has_markers = true;
                let donors: Vec<&String> = others
                    .iter()
                    .flat_map(|e| e.iter())
                    .filter_map(|p| match p {
                        Piece::Marker { label: l, content: c } if l == label => Some(c),
                        _ => None,
                    })
                    .collect();
                if let Some(donor) = donors.choose(rng) {
                    *content = (*donor).clone();
                }
            }
        }

        let swap = !has_markers || rng.gen_bool(self.word_swap_probability.clamp(0.0, 1.0));
        if swap {
            let donor_words: Vec<&String> = others
                .iter()
                .flat_map(|e| e.iter())
                .filter_map(|p| match p {
                    Piece::Word(w) => Some(w),
                    _ => None,
                })
                .collect();
            let slots: Vec<usize> = out
                .iter()
                .enumerate()
                .filter(|(_, p)| matches!(p, Piece::Word(_)))
                .map(|(i, _)| i)
                .collect();
            if let (Some(&slot), Some(word)) = (slots.choose(rng), donor_words.choose(rng)) {
                out[slot] = Piece::Word((*word).clone());
            }
        }
        render_pieces(&out)
    }
}

impl GenerationBackend for StubBackend {
    fn backend_id(&self) -> &str {
        "stub"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let exemplars: Vec<Vec<Piece>> = split_exemplars(&req.input)
            .iter()
            .filter_map(|e| pieces(e))
            .filter(|p| !p.is_empty())
            .collect();
        let mut rng = rng_for(req.stream_seed(self.seed), &["stub"]);
        let outputs: Vec<String> = if exemplars.is_empty() {
            Vec::new()
        } else {
            (0..req.num_samples)
                .map(|_| cap_chars(self.sample_one(&exemplars, &mut rng), req.max_length))
                .collect()
        };
        Ok(GenerationResult {
            shortfall: req.num_samples - outputs.len(),
            outputs,
            backend_id: self.backend_id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Hidden pool of true examples for one slice, pre-rendered as targets.
#[derive(Debug, Clone, Default)]
pub struct OraclePool {
    pub targets: Vec<String>,
}

impl OraclePool {
    /// Render `examples` under `mode`; examples the context cannot encode are
    /// skipped.
    pub fn from_examples<'a>(
        examples: impl IntoIterator<Item = &'a Example>,
        mode: AnonymizationMode,
        context: &SliceContext,
    ) -> Self {
        OraclePool {
            targets: examples
                .into_iter()
                .filter_map(|e| encode_target(e, mode, context).ok())
                .collect(),
        }
    }
}

/// Stands in for a perfect extrapolator: each request returns targets drawn
/// uniformly without replacement from the slice's hidden pool.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    pools: BTreeMap<String, OraclePool>,
    seed: u64,
}

impl OracleBackend {
    pub fn new(pools: BTreeMap<String, OraclePool>, seed: u64) -> Self {
        OracleBackend { pools, seed }
    }

    pub fn single(pool: OraclePool, seed: u64) -> Self {
        Self::new(BTreeMap::from([(String::new(), pool)]), seed)
    }

    fn pool_for(&self, req: &GenerationRequest) -> Result<&OraclePool, BackendError> {
        let missing = |reason: String| BackendError::InvalidRequest {
            request_id: req.request_id(),
            reason,
        };
        match (&req.slice_hint, self.pools.len()) {
            (_, 1) => Ok(self.pools.values().next().expect("one pool")),
            (Some(slice), _) => self
                .pools
                .get(slice)
                .ok_or_else(|| missing(format!("oracle has no pool for slice {slice:?}"))),
            (None, _) => Err(missing("oracle with several pools needs a slice hint".into())),
        }
    }
}

impl GenerationBackend for OracleBackend {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let pool = self.pool_for(req)?;
        let mut rng = rng_for(req.stream_seed(self.seed), &["oracle"]);
        let mut outputs: Vec<String> = pool
            .targets
            .choose_multiple(&mut rng, req.num_samples.min(pool.targets.len()))
            .map(|t| cap_chars(t.clone(), req.max_length))
            .collect();
        outputs.shuffle(&mut rng);
        Ok(GenerationResult {
            shortfall: req.num_samples - outputs.len(),
            outputs,
            backend_id: self.backend_id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 250,
            factor: 2,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, after `attempt` failures.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let exp = self.factor.saturating_pow(attempt.saturating_sub(1)) as u64;
        Duration::from_millis(self.base_delay_ms.saturating_mul(exp))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    #[serde(default)]
    pub bearer_token: Option<String>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_concurrency() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_concurrency: default_concurrency(),
            retry: None,
            bearer_token: None,
        }
    }

    /// Endpoint from `EX2_GEN_ENDPOINT`, token from `EX2_GEN_TOKEN`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok()?;
        let mut cfg = Self::new(endpoint);
        cfg.bearer_token = std::env::var(TOKEN_ENV).ok();
        Some(cfg)
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    input: &'a str,
    num_samples: usize,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    outputs: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct WireErrorBody {
    error: WireError,
}

#[derive(Debug, Deserialize)]
struct WireError {
    code: String,
    message: String,
}

/// The JSON body sent for `req`.
pub fn wire_request_body(req: &GenerationRequest) -> serde_json::Value {
    serde_json::to_value(WireRequest {
        input: &req.input,
        num_samples: req.num_samples,
        max_tokens: req.max_length,
        temperature: req.temperature,
        seed: req.seed,
    })
    .expect("wire request serializes")
}

/// Client for `POST /v1/generate` with bounded exponential-backoff retry.
pub struct RemoteBackend {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    token: Option<String>,
    permits: Semaphore,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.base_url)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(Vec<String>),
    Retry(BackendError),
    Fail(BackendError),
}

impl RemoteBackend {
    pub fn new(cfg: &RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::Unavailable {
                request_id: "-".into(),
                attempts: 0,
                detail: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(RemoteBackend {
            base_url: cfg.endpoint.trim_end_matches('/').to_string(),
            client,
            retry: cfg.retry.unwrap_or_default(),
            token: cfg.bearer_token.clone(),
            permits: Semaphore::new(cfg.max_concurrency),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// `GET /v1/health`; true when the service answers 200 `{"status":"ok"}`.
    pub fn health(&self) -> bool {
        let resp = match self.client.get(format!("{}/v1/health", self.base_url)).send() {
            Ok(r) => r,
            Err(_) => return false,
        };
        resp.status().as_u16() == 200
            && resp
                .json::<serde_json::Value>()
                .map(|v| v["status"] == "ok")
                .unwrap_or(false)
    }

    fn attempt(&self, req: &GenerationRequest, request_id: &str, attempt: u32) -> Attempt {
        let mut builder = self
            .client
            .post(format!("{}/v1/generate", self.base_url))
            .json(&wire_request_body(req));
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Attempt::Retry(BackendError::Timeout {
                    request_id: request_id.to_string(),
                    attempts: attempt,
                })
            }
            Err(e) => {
                return Attempt::Retry(BackendError::Unavailable {
                    request_id: request_id.to_string(),
                    attempts: attempt,
                    detail: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let body = match resp.text() {
            Ok(b) => b,
            Err(e) if e.is_timeout() => {
                return Attempt::Retry(BackendError::Timeout {
                    request_id: request_id.to_string(),
                    attempts: attempt,
                })
            }
            Err(e) => {
                return Attempt::Retry(BackendError::Unavailable {
                    request_id: request_id.to_string(),
                    attempts: attempt,
                    detail: e.to_string(),
                })
            }
        };
        match status {
            200 => match serde_json::from_str::<WireResponse>(&body) {
                Ok(parsed) => Attempt::Done(parsed.outputs),
                Err(e) => Attempt::Fail(BackendError::MalformedResponse {
                    request_id: request_id.to_string(),
                    detail: e.to_string(),
                }),
            },
            500..=599 => Attempt::Retry(BackendError::Unavailable {
                request_id: request_id.to_string(),
                attempts: attempt,
                detail: format!("HTTP {status}: {}", error_summary(&body)),
            }),
            400..=499 => {
                let (code, message) = serde_json::from_str::<WireErrorBody>(&body)
                    .map(|b| (b.error.code, b.error.message))
                    .unwrap_or_else(|_| ("unknown".into(), body.clone()));
                Attempt::Fail(BackendError::MalformedRequest {
                    request_id: request_id.to_string(),
                    status,
                    code,
                    message,
                })
            }
            other => Attempt::Fail(BackendError::MalformedResponse {
                request_id: request_id.to_string(),
                detail: format!("unexpected HTTP status {other}"),
            }),
        }
    }
}

fn error_summary(body: &str) -> String {
    serde_json::from_str::<WireErrorBody>(body)
        .map(|b| format!("{}: {}", b.error.code, b.error.message))
        .unwrap_or_else(|_| body.chars().take(200).collect())
}

impl GenerationBackend for RemoteBackend {
    fn backend_id(&self) -> &str {
        "remote"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let request_id = req.request_id();
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(req, &request_id, attempt) {
                Attempt::Done(mut outputs) => {
                    if outputs.len() > req.num_samples {
                        log::warn!(
                            "request {request_id}: backend returned {} outputs for {} samples; extra dropped",
                            outputs.len(),
                            req.num_samples
                        );
                        outputs.truncate(req.num_samples);
                    }
                    return Ok(GenerationResult {
                        shortfall: req.num_samples - outputs.len(),
                        outputs,
                        backend_id: self.backend_id().to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(e);
                    }
                    log::debug!("request {request_id}: attempt {attempt} failed ({e}); retrying");
                    std::thread::sleep(self.retry.delay_after(attempt));
                }
            }
        }
    }
}
