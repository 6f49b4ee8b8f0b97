//! Remote model access: completions and reward scores.
//!
//! A [`Backend`] performs single calls. The [`Gateway`] wraps one with
//! retries, exponential backoff, a global in-flight cap, optional request
//! pacing, and order-preserving batch fan-out.

pub mod http;
pub mod mock;
pub mod replay;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SamplingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkMode {
    On,
    Off,
    #[default]
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    #[default]
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub sampling: SamplingParams,
    #[serde(default)]
    pub think_mode: ThinkMode,
    #[serde(default)]
    pub role: PromptRole,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, sampling: SamplingParams) -> Self {
        CompletionRequest { prompt: prompt.into(), sampling, think_mode: ThinkMode::NotApplicable, role: PromptRole::User }
    }

    pub fn with_think(mut self, mode: ThinkMode) -> Self {
        self.think_mode = mode;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl Completion {
    pub fn stop(text: impl Into<String>) -> Self {
        Completion { text: text.into(), finish_reason: FinishReason::Stop }
    }

    /// Stopped on the token limit; downstream drops these.
    pub fn is_truncated(&self) -> bool {
        self.finish_reason == FinishReason::Length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub prompt_text: String,
    pub response_text: String,
}

impl RewardRequest {
    pub fn new(prompt_text: impl Into<String>, response_text: impl Into<String>) -> Self {
        RewardRequest { prompt_text: prompt_text.into(), response_text: response_text.into() }
    }
}

/// Failure of a single backend call.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("bad response: {0}")]
    Data(String),
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            BackendError::Data(_) | BackendError::Fatal(_) => false,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Returns `request.sampling.n` completions in generation order.
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError>;

    fn score(&self, request: &RewardRequest) -> Result<f64, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, BackendError> {
        (**self).complete(request)
    }

    fn score(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        (**self).score(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Transport,
    Data,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request {request_id}: {message}")]
    InvalidRequest { request_id: String, message: String },
    #[error("request {request_id} failed after {attempts} attempts: {last}")]
    RetriesExhausted { request_id: String, attempts: u32, last: BackendError },
    #[error("request {request_id} failed: {source}")]
    NonRetryable {
        request_id: String,
        #[source]
        source: BackendError,
    },
    #[error("request {request_id}: {message}")]
    Data { request_id: String, message: String },
}

impl GatewayError {
    pub fn class(&self) -> ErrorClass {
        match self {
            GatewayError::InvalidRequest { .. } => ErrorClass::Config,
            GatewayError::RetriesExhausted { .. } => ErrorClass::Transport,
            GatewayError::NonRetryable { source, .. } => match source {
                BackendError::Data(_) => ErrorClass::Data,
                BackendError::Http { status, .. } if (400..500).contains(status) => ErrorClass::Config,
                _ => ErrorClass::Transport,
            },
            GatewayError::Data { .. } => ErrorClass::Data,
        }
    }
}

/// Named sampling presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingProfile {
    /// Instruction generation with a base model or a reasoning model in
    /// no-think mode.
    GenBaseOrNothink,
    /// Instruction generation with a reasoning model in think mode.
    GenThink,
    /// Solution rollouts for consistency filtering.
    Rollout,
    /// Instruction-following prompt generation.
    IfGeneration,
}

impl SamplingProfile {
    pub const ALL: [SamplingProfile; 4] =
        [SamplingProfile::GenBaseOrNothink, SamplingProfile::GenThink, SamplingProfile::Rollout, SamplingProfile::IfGeneration];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingProfile::GenBaseOrNothink => "gen_base_or_nothink",
            SamplingProfile::GenThink => "gen_think",
            SamplingProfile::Rollout => "rollout",
            SamplingProfile::IfGeneration => "if_generation",
        }
    }
}

impl fmt::Display for SamplingProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SamplingProfile::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown sampling profile {s:?}"))
    }
}

pub const DEFAULT_ROLLOUTS: u32 = 16;
pub const ROLLOUT_MAX_TOKENS: u32 = 4096;
const GENERATION_MAX_TOKENS: u32 = 4096;

pub fn preset_sampling(profile: SamplingProfile) -> SamplingParams {
    let (temperature, top_p, max_tokens, n) = match profile {
        SamplingProfile::GenBaseOrNothink => (0.7, 0.8, GENERATION_MAX_TOKENS, 1),
        SamplingProfile::GenThink => (0.6, 0.95, GENERATION_MAX_TOKENS, 1),
        SamplingProfile::Rollout => (0.6, 0.95, ROLLOUT_MAX_TOKENS, DEFAULT_ROLLOUTS),
        SamplingProfile::IfGeneration => (0.9, 0.95, GENERATION_MAX_TOKENS, 1),
    };
    SamplingParams { temperature, top_p, max_tokens, n, rng_seed: 0 }
}

/// Looks a preset up by name.
pub fn preset_by_name(name: &str) -> Result<SamplingParams, String> {
    name.parse().map(preset_sampling)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Minimum spacing between request starts; 0 disables pacing.
    pub min_interval_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { max_in_flight: 8, max_attempts: 5, initial_backoff_ms: 500, max_backoff_ms: 30_000, min_interval_ms: 0 }
    }
}

impl GatewayConfig {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    config: GatewayConfig,
    permits: Permits,
    next_request: AtomicU64,
    last_start: Mutex<Option<Instant>>,
    retries: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: GatewayConfig) -> Self {
        let cap = config.max_in_flight.max(1);
        Gateway {
            backend,
            config,
            permits: Permits { available: Mutex::new(cap), freed: Condvar::new() },
            next_request: AtomicU64::new(0),
            last_start: Mutex::new(None),
            retries: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Number of retried attempts so far.
    pub fn retry_count(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }

    fn request_id(&self) -> String {
        format!("req-{}", self.next_request.fetch_add(1, Ordering::Relaxed))
    }

    fn pace(&self) {
        if self.config.min_interval_ms == 0 {
            return;
        }
        let interval = Duration::from_millis(self.config.min_interval_ms);
        let mut last = self.last_start.lock().unwrap();
        if let Some(prev) = *last {
            let ready = prev + interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }

    fn call_with_retries<T>(
        &self,
        request_id: &str,
        call: impl Fn() -> Result<T, BackendError>,
    ) -> Result<T, GatewayError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            let result = {
                let _permit = self.permits.acquire();
                self.pace();
                call()
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    log::warn!("{request_id}: attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts {
                        self.retries.fetch_add(1, Ordering::Relaxed);
                        std::thread::sleep(self.config.backoff(attempt));
                    }
                }
                Err(e) => return Err(GatewayError::NonRetryable { request_id: request_id.to_string(), source: e }),
            }
        }
        Err(GatewayError::RetriesExhausted {
            request_id: request_id.to_string(),
            attempts,
            last: last.expect("at least one attempt"),
        })
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Vec<Completion>, GatewayError> {
        let request_id = self.request_id();
        request
            .sampling
            .validate()
            .map_err(|message| GatewayError::InvalidRequest { request_id: request_id.clone(), message })?;
        let out = self.call_with_retries(&request_id, || self.backend.complete(request))?;
        if out.len() != request.sampling.n as usize {
            return Err(GatewayError::Data {
                request_id,
                message: format!("expected {} completions, got {}", request.sampling.n, out.len()),
            });
        }
        Ok(out)
    }

    pub fn score(&self, request: &RewardRequest) -> Result<f64, GatewayError> {
        let request_id = self.request_id();
        if request.prompt_text.is_empty() || request.response_text.is_empty() {
            return Err(GatewayError::InvalidRequest { request_id, message: "empty prompt or response".into() });
        }
        let score = self.call_with_retries(&request_id, || self.backend.score(request))?;
        if !score.is_finite() {
            return Err(GatewayError::Data { request_id, message: format!("non-finite reward {score}") });
        }
        Ok(score)
    }

    /// Runs `f` over `items` on at most `max_in_flight` workers; the i-th
    /// output belongs to the i-th input.
    pub fn fan_out<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync,
    {
        let workers = self.config.max_in_flight.max(1).min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let mut slots: Vec<(usize, O)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= items.len() {
                                break;
                            }
                            done.push((i, f(&items[i])));
                        }
                        done
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
        slots.sort_by_key(|(i, _)| *i);
        slots.into_iter().map(|(_, o)| o).collect()
    }

    pub fn complete_batch(&self, requests: &[CompletionRequest]) -> Vec<Result<Vec<Completion>, GatewayError>> {
        self.fan_out(requests, |r| self.complete(r))
    }

    pub fn score_batch(&self, requests: &[RewardRequest]) -> Vec<Result<f64, GatewayError>> {
        self.fan_out(requests, |r| self.score(r))
    }
}
