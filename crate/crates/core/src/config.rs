//! Run configuration, read from one TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::gateway::{JudgmentPolicy, ModelProfile};
use crate::tagging::VoteParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggingConfig {
    pub generators: Vec<String>,
    pub judge: String,
    /// Defaults to ⌈generators / 2⌉.
    pub vote_threshold: Option<usize>,
    pub quota_step: usize,
    pub quota_cap: usize,
    /// Attachment override file (`term<TAB>tertiary`).
    pub overrides: Option<PathBuf>,
}

impl Default for TaggingConfig {
    fn default() -> Self {
        TaggingConfig {
            generators: vec!["mock-a".into(), "mock-b".into(), "mock-c".into()],
            judge: "mock-judge".into(),
            vote_threshold: None,
            quota_step: 2,
            quota_cap: 2,
            overrides: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructConfig {
    pub incorrect_per_label: usize,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        ConstructConfig { incorrect_per_label: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { size: 3164 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub temperature: f32,
    /// Models `evaluate` runs when `--model` is not given.
    pub models: Vec<String>,
    /// Evaluate the curated benchmark when present, else the sample.
    pub prefer_curated: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            temperature: crate::gateway::GENERATIVE_TEMPERATURE,
            models: vec!["mock-a".into()],
            prefer_curated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// `"mock"` or an embeddings endpoint URL.
    pub endpoint: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            endpoint: "mock".into(),
            model: "clip".into(),
            api_key_env: None,
            timeout_secs: 60,
        }
    }
}

impl EmbeddingConfig {
    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotator {
    pub id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub bind: String,
    pub idle_timeout_secs: u64,
    pub allowed_origins: Vec<String>,
    pub annotators: Vec<Annotator>,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            bind: "127.0.0.1:8787".into(),
            idle_timeout_secs: 8 * 3600,
            allowed_origins: vec!["http://localhost:5173".into()],
            annotators: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Serve every profile from the mock backend.
    pub mock: bool,
    pub mock_policy: JudgmentPolicy,
    /// Base retry delay in milliseconds.
    pub backoff_ms: u64,
    pub models: Vec<ModelProfile>,
    pub tagging: TaggingConfig,
    pub construct: ConstructConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub embedding: EmbeddingConfig,
    pub review: ReviewConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            corpus_dir: "images".into(),
            out_dir: "run".into(),
            mock: false,
            mock_policy: JudgmentPolicy::default(),
            backoff_ms: 500,
            models: ["mock-a", "mock-b", "mock-c", "mock-judge"]
                .into_iter()
                .map(ModelProfile::mock)
                .collect(),
            tagging: TaggingConfig::default(),
            construct: ConstructConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            embedding: EmbeddingConfig::default(),
            review: ReviewConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Loads `path`; relative directories resolve against the file's folder.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus_dir, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(o) = &mut cfg.tagging.overrides {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return Err(ConfigError::Invalid(format!("model `{}` defined twice", m.name)));
            }
            if m.max_concurrent == 0 {
                return Err(ConfigError::Invalid(format!("model `{}` has max_concurrent = 0", m.name)));
            }
        }
        let known = |n: &str| names.contains(n);
        if self.tagging.generators.is_empty() {
            return Err(ConfigError::Invalid("tagging.generators is empty".into()));
        }
        for g in self.tagging.generators.iter().chain([&self.tagging.judge]) {
            if !known(g) {
                return Err(ConfigError::Invalid(format!("tagging refers to unknown model `{g}`")));
            }
        }
        if self.tagging.quota_step == 0 {
            return Err(ConfigError::Invalid("tagging.quota_step must be at least 1".into()));
        }
        Ok(())
    }

    pub fn vote_params(&self) -> VoteParams {
        let mut p = VoteParams::for_models(self.tagging.generators.len(), self.seed);
        if let Some(t) = self.tagging.vote_threshold {
            p.threshold = t;
        }
        p.quota_step = self.tagging.quota_step;
        p.quota_cap = self.tagging.quota_cap;
        p
    }

    /// Digest of every setting that influences artifacts (paths and review
    /// settings excluded).
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.corpus_dir = PathBuf::new();
        c.out_dir = PathBuf::new();
        c.review = ReviewConfig::default();
        c.backoff_ms = 0;
        for m in &mut c.models {
            m.max_concurrent = 1;
            m.timeout_secs = 0;
            m.max_retries = 0;
        }
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Profiles as registered: all switched to the mock backend when `mock`
    /// is set.
    pub fn effective_models(&self) -> Vec<ModelProfile> {
        self.models
            .iter()
            .cloned()
            .map(|m| if self.mock { m.into_mock() } else { m })
            .collect()
    }
}
