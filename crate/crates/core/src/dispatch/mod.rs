//! Running trial plans against chat providers.
//!
//! Every trial is a fresh session: the request is built only from the plan's
//! rendered messages and no provider keeps conversation state. Per provider,
//! a semaphore bounds in-flight requests and a [`RateLimiter`] spaces request
//! starts. Transient failures are retried with seeded exponential backoff. A
//! trial that still fails becomes a [`TranscriptRecord`] with a non-ok
//! outcome, so one bad trial never aborts a batch.

pub mod clock;
pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::design::{ChatMessage, TrialPlan};
use crate::population::Persona;
use crate::seed;

pub use clock::{Clock, RateLimiter, SystemClock, VirtualClock};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("provider `{provider}`: credential variable `{var}` is not set")]
    MissingCredential { provider: String, var: String },
    #[error("provider `{provider}`: {reason}")]
    InvalidConfig { provider: String, reason: String },
    #[error("no provider registered for model `{0}`")]
    UnknownModel(String),
    #[error("provider config {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("async runtime: {0}")]
    Runtime(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderFamily {
    /// `POST {base_url}{path}` with an OpenAI-style chat-completions body.
    OpenaiChat,
    /// Anthropic-style messages body; system messages go in `system`.
    AnthropicMessages,
    /// In-process test double. Never touches the network.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base_secs: 1.0,
        }
    }
}

fn default_concurrency() -> usize {
    4
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout() -> f64 {
    120.0
}
fn default_path() -> String {
    "/v1/chat/completions".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// The model id used in experiment specs.
    #[serde(rename = "id")]
    pub provider_id: String,
    pub family: ProviderFamily,
    #[serde(default)]
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    /// Model string sent on the wire.
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
    #[serde(default)]
    pub requests_per_minute: Option<f64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl ProviderConfig {
    pub fn mock(id: &str) -> Self {
        ProviderConfig {
            provider_id: id.to_string(),
            family: ProviderFamily::Mock,
            base_url: String::new(),
            path: String::new(),
            model: id.to_string(),
            auth_env: None,
            max_concurrent: 16,
            requests_per_minute: None,
            retry: RetryPolicy {
                max_attempts: 3,
                backoff_base_secs: 1.0,
            },
            temperature: 1.0,
            max_output_tokens: 1024,
            timeout_secs: default_timeout(),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.path)
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        let bad = |reason: &str| DispatchError::InvalidConfig {
            provider: self.provider_id.clone(),
            reason: reason.to_string(),
        };
        if self.max_concurrent < 1 {
            return Err(bad("max_concurrent must be at least 1"));
        }
        if !(self.temperature >= 0.0) {
            return Err(bad("temperature must be >= 0"));
        }
        if self.requests_per_minute.is_some_and(|r| !(r > 0.0)) {
            return Err(bad("requests_per_minute must be positive"));
        }
        if self.retry.max_attempts < 1 || !(self.retry.backoff_base_secs >= 0.0) {
            return Err(bad("retry needs max_attempts >= 1 and backoff_base_secs >= 0"));
        }
        if self.family != ProviderFamily::Mock && self.base_url.is_empty() {
            return Err(bad("base_url is required for HTTP providers"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ProviderFile {
    #[serde(default)]
    providers: Vec<ProviderConfig>,
}

/// Reads a provider table (`[[providers]]` entries) from TOML.
pub fn load_provider_configs(path: &Path) -> Result<Vec<ProviderConfig>, DispatchError> {
    let parse_err = |message: String| DispatchError::ConfigParse {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(e.to_string()))?;
    let file: ProviderFile = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    for config in &file.providers {
        config.validate()?;
    }
    Ok(file.providers)
}

/// What goes out on the wire for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Side information for in-process providers. Never sent over HTTP.
#[derive(Debug, Clone)]
pub struct TrialContext<'a> {
    pub plan: &'a TrialPlan,
    pub persona: Option<&'a Persona>,
    pub session_id: &'a str,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinishReason {
    Stop,
    Length,
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub finish: FinishReason,
}

impl Completion {
    pub fn stop(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            finish: FinishReason::Stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Worth retrying: timeouts, rate limiting, server errors.
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("refused: {0}")]
    Refused(String),
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    async fn complete(&self, request: &ChatRequest, context: &TrialContext<'_>) -> Result<Completion, ProviderError>;

    /// True when the provider talks to a remote endpoint.
    fn uses_network(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    TransportError,
    Refused,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub trial_id: String,
    pub session_id: String,
    pub provider_id: String,
    pub request: ChatRequest,
    pub completion: String,
    pub requested_at_ms: u64,
    pub responded_at_ms: u64,
    pub attempts: u32,
    pub outcome: Outcome,
    #[serde(default)]
    pub error: Option<String>,
}

/// One plan with its rendered messages.
#[derive(Debug, Clone)]
pub struct TrialJob {
    pub plan: TrialPlan,
    pub messages: Vec<ChatMessage>,
    pub persona: Option<Persona>,
}

pub trait BatchObserver: Sync {
    fn on_record(&self, done: usize, total: usize, record: &TranscriptRecord);
}

/// Logs progress at every tenth of the batch.
#[derive(Debug, Default)]
pub struct LogProgress;

impl BatchObserver for LogProgress {
    fn on_record(&self, done: usize, total: usize, _record: &TranscriptRecord) {
        let step = (total / 10).max(1);
        if done % step == 0 || done == total {
            log::info!("dispatched {done}/{total} trials");
        }
    }
}

struct ProviderSlot {
    config: ProviderConfig,
    provider: Arc<dyn ChatProvider>,
    permits: Semaphore,
    limiter: RateLimiter,
}

/// Routes trials to registered providers. One batch at a time per instance.
pub struct Dispatcher {
    slots: BTreeMap<String, ProviderSlot>,
    clock: Arc<dyn Clock>,
    seed: u64,
    parallelism: Option<usize>,
}

impl Dispatcher {
    pub fn new(clock: Arc<dyn Clock>, seed: u64) -> Self {
        Dispatcher {
            slots: BTreeMap::new(),
            clock,
            seed,
            parallelism: None,
        }
    }

    /// Caps the total number of trials in flight across providers.
    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = Some(parallelism.max(1));
        self
    }

    pub fn register(&mut self, config: ProviderConfig, provider: Arc<dyn ChatProvider>) -> Result<(), DispatchError> {
        config.validate()?;
        self.slots.insert(
            config.provider_id.clone(),
            ProviderSlot {
                permits: Semaphore::new(config.max_concurrent),
                limiter: RateLimiter::new(config.requests_per_minute),
                config,
                provider,
            },
        );
        Ok(())
    }

    /// Builds HTTP providers for every config. Credentials are resolved here,
    /// so a missing variable fails before any request is sent.
    pub fn with_http_providers(
        clock: Arc<dyn Clock>,
        seed: u64,
        configs: Vec<ProviderConfig>,
    ) -> Result<Self, DispatchError> {
        let mut dispatcher = Dispatcher::new(clock, seed);
        for config in configs {
            let provider = http::HttpProvider::new(config.clone())?;
            dispatcher.register(config, Arc::new(provider))?;
        }
        Ok(dispatcher)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn provider_configs(&self) -> impl Iterator<Item = &ProviderConfig> {
        self.slots.values().map(|s| &s.config)
    }

    pub fn network_providers(&self) -> usize {
        self.slots.values().filter(|s| s.provider.uses_network()).count()
    }

    pub fn session_id(&self, trial_id: &str) -> String {
        seed::token(self.seed, &["session", trial_id])
    }

    fn backoff(&self, policy: &RetryPolicy, trial_id: &str, attempt: u32) -> Duration {
        let mut rng = seed::rng_for(self.seed, &["backoff", trial_id, &attempt.to_string()]);
        let jitter: f64 = rng.random();
        let secs = policy.backoff_base_secs * 2f64.powi(attempt as i32 - 1) * (1.0 + jitter);
        Duration::from_secs_f64(secs)
    }

    /// Runs one trial in a new session, retrying transient failures.
    pub async fn run_trial(&self, job: &TrialJob) -> Result<TranscriptRecord, DispatchError> {
        let slot = self
            .slots
            .get(&job.plan.model_id)
            .ok_or_else(|| DispatchError::UnknownModel(job.plan.model_id.clone()))?;
        Ok(self.execute(slot, job).await)
    }

    async fn execute(&self, slot: &ProviderSlot, job: &TrialJob) -> TranscriptRecord {
        let config = &slot.config;
        let trial_id = &job.plan.trial_id;
        let session_id = self.session_id(trial_id);
        let request = ChatRequest {
            model: config.model.clone(),
            messages: job.messages.clone(),
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        };
        let mut requested_at = None;
        let mut attempt = 0;
        let (outcome, completion, error) = loop {
            attempt += 1;
            let result = {
                let _permit = slot.permits.acquire().await.expect("semaphore never closed");
                slot.limiter.acquire(self.clock.as_ref()).await;
                requested_at.get_or_insert(self.clock.now_ms());
                let context = TrialContext {
                    plan: &job.plan,
                    persona: job.persona.as_ref(),
                    session_id: &session_id,
                    attempt,
                };
                slot.provider.complete(&request, &context).await
            };
            match result {
                Ok(c) => match c.finish {
                    FinishReason::Stop if c.text.trim().is_empty() => {
                        break (Outcome::TransportError, c.text, Some("empty completion".to_string()))
                    }
                    FinishReason::Stop => break (Outcome::Ok, c.text, None),
                    FinishReason::Length => break (Outcome::Truncated, c.text, None),
                    FinishReason::Refusal => break (Outcome::Refused, c.text, None),
                },
                Err(ProviderError::Transient(msg)) if attempt < config.retry.max_attempts => {
                    log::debug!("trial {trial_id}: attempt {attempt} failed: {msg}");
                    self.clock.sleep(self.backoff(&config.retry, trial_id, attempt)).await;
                }
                Err(ProviderError::Transient(msg)) | Err(ProviderError::Fatal(msg)) => {
                    break (Outcome::TransportError, String::new(), Some(msg))
                }
                Err(ProviderError::Refused(msg)) => break (Outcome::Refused, String::new(), Some(msg)),
            }
        };
        TranscriptRecord {
            trial_id: trial_id.clone(),
            session_id,
            provider_id: config.provider_id.clone(),
            request,
            completion,
            requested_at_ms: requested_at.unwrap_or_default(),
            responded_at_ms: self.clock.now_ms(),
            attempts: attempt,
            outcome,
            error,
        }
    }

    /// Runs every job. Output order matches input order. Fails only if a job
    /// names a model with no provider; that is checked before any dispatch.
    pub async fn run_batch(
        &self,
        jobs: &[TrialJob],
        observer: Option<&dyn BatchObserver>,
    ) -> Result<Vec<TranscriptRecord>, DispatchError> {
        for job in jobs {
            if !self.slots.contains_key(&job.plan.model_id) {
                return Err(DispatchError::UnknownModel(job.plan.model_id.clone()));
            }
        }
        let width = self
            .parallelism
            .unwrap_or_else(|| self.slots.values().map(|s| s.config.max_concurrent).sum::<usize>().max(1));
        let total = jobs.len();
        let done = AtomicUsize::new(0);
        let mut records: Vec<Option<TranscriptRecord>> = vec![None; total];
        let mut finished = stream::iter(jobs.iter().enumerate())
            .map(|(i, job)| async move {
                let slot = &self.slots[&job.plan.model_id];
                (i, self.execute(slot, job).await)
            })
            .buffer_unordered(width);
        while let Some((i, record)) = finished.next().await {
            let n = done.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(observer) = observer {
                observer.on_record(n, total, &record);
            }
            records[i] = Some(record);
        }
        Ok(records.into_iter().map(|r| r.expect("every job produces a record")).collect())
    }

    /// [`run_batch`](Self::run_batch) on a dedicated single-threaded runtime.
    /// With in-process providers and a [`VirtualClock`] this is fully
    /// deterministic.
    pub fn run_batch_blocking(
        &self,
        jobs: &[TrialJob],
        observer: Option<&dyn BatchObserver>,
    ) -> Result<Vec<TranscriptRecord>, DispatchError> {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| DispatchError::Runtime(e.to_string()))?;
        runtime.block_on(self.run_batch(jobs, observer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{Arm, Condition};
    use mock::{MockProvider, MockReply};

    fn job(trial: &str, model: &str) -> TrialJob {
        TrialJob {
            plan: TrialPlan {
                trial_id: trial.into(),
                subject_id: "s1".into(),
                persona_id: Some("P00001".into()),
                model_id: model.into(),
                arm: Arm::Persona,
                condition: Condition::new(),
                vignette_order: vec!["v".into()],
                position: 0,
                session_vignettes: vec!["v".into()],
                question_order: BTreeMap::new(),
                seed: 1,
            },
            messages: vec![ChatMessage::user(format!("prompt for {trial}"))],
            persona: None,
        }
    }

    fn dispatcher(provider: MockProvider, config: ProviderConfig) -> Dispatcher {
        let mut d = Dispatcher::new(Arc::new(VirtualClock::new()), 9);
        d.register(config, Arc::new(provider)).unwrap();
        d
    }

    #[test]
    fn echo_seven() {
        let d = dispatcher(MockProvider::constant("7"), ProviderConfig::mock("m"));
        let out = d.run_batch_blocking(&[job("t1", "m")], None).unwrap();
        assert_eq!(out[0].completion, "7");
        assert_eq!(out[0].outcome, Outcome::Ok);
        assert_eq!(out[0].attempts, 1);
    }

    #[test]
    fn two_failures_then_success() {
        let d = dispatcher(MockProvider::constant("ok").failing_first(2), ProviderConfig::mock("m"));
        let out = d.run_batch_blocking(&[job("t1", "m")], None).unwrap();
        assert_eq!(out[0].outcome, Outcome::Ok);
        assert_eq!(out[0].attempts, 3);
    }

    #[test]
    fn exhausted_retries_become_transport_error() {
        let d = dispatcher(MockProvider::constant("ok").failing_first(5), ProviderConfig::mock("m"));
        let out = d.run_batch_blocking(&[job("t1", "m")], None).unwrap();
        assert_eq!(out[0].outcome, Outcome::TransportError);
        assert_eq!(out[0].attempts, 3);
        assert!(out[0].completion.is_empty());
    }

    #[test]
    fn empty_batch() {
        let d = dispatcher(MockProvider::constant("x"), ProviderConfig::mock("m"));
        assert!(d.run_batch_blocking(&[], None).unwrap().is_empty());
    }

    #[test]
    fn unknown_model_rejected_up_front() {
        let provider = Arc::new(MockProvider::constant("x"));
        let mut d = Dispatcher::new(Arc::new(VirtualClock::new()), 1);
        d.register(ProviderConfig::mock("m"), provider.clone()).unwrap();
        let err = d.run_batch_blocking(&[job("a", "m"), job("b", "other")], None).unwrap_err();
        assert!(matches!(err, DispatchError::UnknownModel(m) if m == "other"));
        assert_eq!(provider.calls(), 0);
    }

    #[test]
    fn finish_reasons_map_to_outcomes() {
        let provider = MockProvider::from_fn(|_req, ctx| match ctx.plan.trial_id.as_str() {
            "len" => MockReply::Truncated("half an ans".into()),
            "ref" => MockReply::ProviderRefusal,
            "empty" => MockReply::Text("  ".into()),
            _ => MockReply::Text("fine".into()),
        });
        let d = dispatcher(provider, ProviderConfig::mock("m"));
        let jobs = ["len", "ref", "empty", "ok"].map(|t| job(t, "m"));
        let out = d.run_batch_blocking(&jobs, None).unwrap();
        let outcomes: Vec<Outcome> = out.iter().map(|r| r.outcome).collect();
        assert_eq!(
            outcomes,
            vec![Outcome::Truncated, Outcome::Refused, Outcome::TransportError, Outcome::Ok]
        );
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = ProviderConfig::mock("m");
        c.max_concurrent = 0;
        assert!(c.validate().is_err());
        let mut c = ProviderConfig::mock("m");
        c.temperature = -0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn backoff_is_seeded_and_grows() {
        let d = dispatcher(MockProvider::constant("x"), ProviderConfig::mock("m"));
        let policy = RetryPolicy {
            max_attempts: 5,
            backoff_base_secs: 1.0,
        };
        let first = d.backoff(&policy, "t", 1);
        assert_eq!(first, d.backoff(&policy, "t", 1));
        assert!(first >= Duration::from_secs(1) && first < Duration::from_secs(2));
        let third = d.backoff(&policy, "t", 3);
        assert!(third >= Duration::from_secs(4) && third < Duration::from_secs(8));
    }
}
