//! Uniform access to chat-style vision-language backends.
//!
//! A [`Gateway`] owns one slot per [`ModelProfile`]: the backend that serves
//! it, a concurrency limiter, and the retry policy. Every successful exchange
//! is appended to an optional [`Journal`]; a request whose digest is already
//! journaled is answered from the journal without touching the backend.

mod http;
mod journal;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{digest_parts_hex, sha256_hex};

pub use http::{parse_wire_response, wire_request_body, HttpBackend};
pub use journal::{Journal, JournalRecord};
pub use mock::{JudgmentPolicy, MockBackend, MockVocabulary, PolarityBucket};

pub const GENERATIVE_TEMPERATURE: f32 = 0.7;
pub const JUDGE_TEMPERATURE: f32 = 0.0;

fn default_max_concurrent() -> usize {
    4
}
fn default_max_retries() -> u32 {
    2
}
fn default_timeout_secs() -> u64 {
    120
}

/// Connection settings for one model. `endpoint = "mock"` selects the offline
/// mock backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    #[serde(default = "ModelProfile::mock_endpoint")]
    pub endpoint: String,
    /// Model id sent on the wire; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl ModelProfile {
    fn mock_endpoint() -> String {
        "mock".into()
    }

    pub fn mock(name: &str) -> Self {
        ModelProfile {
            name: name.into(),
            endpoint: Self::mock_endpoint(),
            model: None,
            api_key_env: None,
            max_concurrent: default_max_concurrent(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock" || self.endpoint.starts_with("mock:")
    }

    pub fn wire_model(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    /// Same profile served by the mock backend, without credentials.
    pub fn into_mock(mut self) -> Self {
        self.endpoint = Self::mock_endpoint();
        self.api_key_env = None;
        self
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub media_type: String,
    pub bytes: Arc<Vec<u8>>,
}

impl ImagePayload {
    pub fn new(media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        ImagePayload {
            media_type: media_type.into(),
            bytes: Arc::new(bytes),
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePayload")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: Option<String>,
    pub user_text: String,
    pub image: Option<ImagePayload>,
    pub temperature: f32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(user_text: impl Into<String>) -> Self {
        ChatRequest {
            system_text: None,
            user_text: user_text.into(),
            image: None,
            temperature: GENERATIVE_TEMPERATURE,
            seed: None,
        }
    }

    pub fn with_image(mut self, image: ImagePayload) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_temperature(mut self, t: f32) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn image_digest(&self) -> Option<String> {
        self.image.as_ref().map(ImagePayload::digest)
    }

    /// Journal key for this request under `profile`.
    pub fn digest(&self, profile: &str) -> String {
        let image = self.image_digest().unwrap_or_default();
        let temp = self.temperature.to_bits().to_le_bytes();
        let seed = match self.seed {
            Some(s) => format!("{s}"),
            None => String::new(),
        };
        digest_parts_hex(&[
            profile.as_bytes(),
            self.system_text.as_deref().unwrap_or("").as_bytes(),
            self.user_text.as_bytes(),
            image.as_bytes(),
            &temp,
            seed.as_bytes(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend: String,
    pub latency_ms: u64,
    pub attempt: u32,
    pub from_journal: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { code, .. } => *code >= 500 || *code == 429,
            BackendError::Malformed(_) => false,
        }
    }
}

/// Something that turns one request into one completion text.
pub trait ChatBackend: Send + Sync {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ModelProfile, &ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<String, BackendError> {
        self(profile, request)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("[{profile}] API key variable `{env_var}` is not set (request {digest})")]
    AuthMissing {
        profile: String,
        env_var: String,
        digest: String,
    },
    #[error("[{profile}] gave up after {attempts} attempts (request {digest}): {last_error}")]
    ExhaustedRetries {
        profile: String,
        digest: String,
        attempts: u32,
        last_error: String,
    },
    #[error("[{profile}] timed out on all {attempts} attempts (request {digest})")]
    Timeout {
        profile: String,
        digest: String,
        attempts: u32,
    },
    #[error("[{profile}] request {digest} rejected: {reason}")]
    Rejected {
        profile: String,
        digest: String,
        reason: String,
    },
    #[error("unknown model profile `{0}`")]
    UnknownProfile(String),
    #[error("duplicate model profile `{0}`")]
    DuplicateProfile(String),
    #[error("invalid profile `{0}`: max_concurrent must be at least 1")]
    InvalidProfile(String),
    #[error("request has empty user text")]
    EmptyRequest,
    #[error("journal write failed: {0}")]
    Journal(String),
}

/// Counting semaphore that also records the highest concurrency it allowed.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    state: Mutex<(usize, usize)>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap();
        s.0 -= 1;
        self.0.cv.notify_one();
    }
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            state: Mutex::new((0, 0)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock().unwrap();
        while s.0 >= self.max {
            s = self.cv.wait(s).unwrap();
        }
        s.0 += 1;
        s.1 = s.1.max(s.0);
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap().0
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

struct Slot {
    profile: ModelProfile,
    backend: Arc<dyn ChatBackend>,
    limiter: Limiter,
}

pub struct Gateway {
    slots: BTreeMap<String, Slot>,
    journal: Option<Arc<Journal>>,
    backoff: Duration,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Gateway {
            slots: BTreeMap::new(),
            journal: None,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn with_journal(mut self, journal: Journal) -> Self {
        self.journal = Some(Arc::new(journal));
        self
    }

    /// Base delay before the first retry; doubles on each further retry.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn register(
        &mut self,
        profile: ModelProfile,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<(), GatewayError> {
        if profile.max_concurrent == 0 {
            return Err(GatewayError::InvalidProfile(profile.name));
        }
        if self.slots.contains_key(&profile.name) {
            return Err(GatewayError::DuplicateProfile(profile.name));
        }
        let limiter = Limiter::new(profile.max_concurrent);
        self.slots.insert(
            profile.name.clone(),
            Slot {
                profile,
                backend,
                limiter,
            },
        );
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<&ModelProfile> {
        self.slots.get(name).map(|s| &s.profile)
    }

    pub fn profile_names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn journal(&self) -> Option<&Journal> {
        self.journal.as_deref()
    }

    /// Highest number of simultaneous backend calls seen for `profile`.
    pub fn peak_in_flight(&self, profile: &str) -> Option<usize> {
        self.slots.get(profile).map(|s| s.limiter.peak())
    }

    pub fn complete(&self, profile: &str, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let slot = self
            .slots
            .get(profile)
            .ok_or_else(|| GatewayError::UnknownProfile(profile.to_string()))?;
        if request.user_text.trim().is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        let digest = request.digest(profile);
        if let Some(rec) = self.journal.as_ref().and_then(|j| j.lookup(&digest)) {
            return Ok(ChatResponse {
                text: rec.text,
                backend: rec.profile,
                latency_ms: rec.latency_ms,
                attempt: rec.attempt,
                from_journal: true,
            });
        }
        if let Some(var) = &slot.profile.api_key_env {
            if std::env::var_os(var).is_none() {
                return Err(GatewayError::AuthMissing {
                    profile: profile.to_string(),
                    env_var: var.clone(),
                    digest,
                });
            }
        }

        let attempts = slot.profile.max_retries + 1;
        let mut last_error = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                let factor = 1u32 << (attempt - 2).min(16);
                std::thread::sleep(self.backoff * factor);
            }
            let started = Instant::now();
            let started_at_ms = journal::now_ms();
            let result = {
                let _permit = slot.limiter.acquire();
                slot.backend.send(&slot.profile, request)
            };
            let latency_ms = started.elapsed().as_millis() as u64;
            match result {
                Ok(text) => {
                    if let Some(j) = &self.journal {
                        j.append(&JournalRecord {
                            schema: journal::SCHEMA.into(),
                            digest: digest.clone(),
                            profile: profile.to_string(),
                            attempt,
                            image_digest: request.image_digest(),
                            seed: request.seed,
                            text: text.clone(),
                            latency_ms,
                            started_at_ms,
                            finished_at_ms: journal::now_ms(),
                        })
                        .map_err(|e| GatewayError::Journal(e.to_string()))?;
                    }
                    return Ok(ChatResponse {
                        text,
                        backend: profile.to_string(),
                        latency_ms,
                        attempt,
                        from_journal: false,
                    });
                }
                Err(e) if e.is_retryable() => {
                    log::warn!("[{profile}] attempt {attempt}/{attempts} failed: {e}");
                    last_error = Some(e);
                }
                Err(e) => {
                    return Err(GatewayError::Rejected {
                        profile: profile.to_string(),
                        digest,
                        reason: e.to_string(),
                    })
                }
            }
        }
        match last_error {
            Some(BackendError::Timeout) => Err(GatewayError::Timeout {
                profile: profile.to_string(),
                digest,
                attempts,
            }),
            other => Err(GatewayError::ExhaustedRetries {
                profile: profile.to_string(),
                digest,
                attempts,
                last_error: other.map(|e| e.to_string()).unwrap_or_default(),
            }),
        }
    }
}
