//! `section.key=value` configuration. Later sources win: built-in defaults,
//! then the `--config` file, then `--set` pairs, then dedicated flags.

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use razewright::corpus::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use razewright::exam::{DEFAULT_MAX_ROUNDS, DEFAULT_VOTES_PER_ROUND};
use razewright::providers::http::DEFAULT_API_KEY_ENV;
use razewright::providers::{ProviderConfig, DEFAULT_CONCURRENCY, DEFAULT_GENERATION_TEMPERATURE};
use razewright::retrieve::{Mode, DEFAULT_CHAR_BUDGET, DEFAULT_TOP_K};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: {message}")]
    Value { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Endpoint {
    pub fn provider_config(&self) -> ProviderConfig {
        let mut c = ProviderConfig::new(&self.base_url, &self.model);
        c.api_key_env = self.api_key_env.clone();
        c.timeout = Duration::from_secs(self.timeout_secs);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub chat: Endpoint,
    pub chat_temperature: f64,
    pub embed: Endpoint,
    pub embed_batch: usize,
    pub votes_per_round: usize,
    pub max_rounds: usize,
    pub exam_temperature: f64,
    pub accumulate_votes: bool,
    pub mode: Mode,
    pub top_k: usize,
    pub context_budget: usize,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub corpus_dir: PathBuf,
    pub index_dir: PathBuf,
    pub templates_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub retries: u32,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            chat: Endpoint {
                base_url: "http://localhost:8000/v1".into(),
                model: "qwen2.5-7b-instruct".into(),
                api_key_env: DEFAULT_API_KEY_ENV.into(),
                timeout_secs: 120,
            },
            chat_temperature: DEFAULT_GENERATION_TEMPERATURE,
            embed: Endpoint {
                base_url: "http://localhost:8000/v1".into(),
                model: "bge-m3".into(),
                api_key_env: DEFAULT_API_KEY_ENV.into(),
                timeout_secs: 120,
            },
            embed_batch: 32,
            votes_per_round: DEFAULT_VOTES_PER_ROUND,
            max_rounds: DEFAULT_MAX_ROUNDS,
            exam_temperature: DEFAULT_GENERATION_TEMPERATURE,
            accumulate_votes: true,
            mode: Mode::Hybrid,
            top_k: DEFAULT_TOP_K,
            context_budget: DEFAULT_CHAR_BUDGET,
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_overlap: DEFAULT_CHUNK_OVERLAP,
            corpus_dir: "corpus".into(),
            index_dir: "index".into(),
            templates_dir: None,
            concurrency: DEFAULT_CONCURRENCY,
            retries: 2,
        }
    }
}

pub const KEYS: &[&str] = &[
    "chat.base_url",
    "chat.model",
    "chat.temperature",
    "chat.api_key_env",
    "chat.timeout_secs",
    "embed.base_url",
    "embed.model",
    "embed.api_key_env",
    "embed.timeout_secs",
    "embed.batch",
    "exam.votes_per_round",
    "exam.max_rounds",
    "exam.temperature",
    "exam.accumulate",
    "retrieval.mode",
    "retrieval.top_k",
    "retrieval.context_budget",
    "corpus.chunk_size",
    "corpus.chunk_overlap",
    "paths.corpus",
    "paths.index",
    "paths.templates",
    "provider.concurrency",
    "provider.retries",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        message: format!("{value:?}: {e}"),
    })
}

impl AppConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "chat.base_url" => self.chat.base_url = v.into(),
            "chat.model" => self.chat.model = v.into(),
            "chat.temperature" => self.chat_temperature = parse(key, v)?,
            "chat.api_key_env" => self.chat.api_key_env = v.into(),
            "chat.timeout_secs" => self.chat.timeout_secs = parse(key, v)?,
            "embed.base_url" => self.embed.base_url = v.into(),
            "embed.model" => self.embed.model = v.into(),
            "embed.api_key_env" => self.embed.api_key_env = v.into(),
            "embed.timeout_secs" => self.embed.timeout_secs = parse(key, v)?,
            "embed.batch" => self.embed_batch = parse(key, v)?,
            "exam.votes_per_round" => self.votes_per_round = parse(key, v)?,
            "exam.max_rounds" => self.max_rounds = parse(key, v)?,
            "exam.temperature" => self.exam_temperature = parse(key, v)?,
            "exam.accumulate" => self.accumulate_votes = parse(key, v)?,
            "retrieval.mode" => self.mode = parse(key, v)?,
            "retrieval.top_k" => self.top_k = parse(key, v)?,
            "retrieval.context_budget" => self.context_budget = parse(key, v)?,
            "corpus.chunk_size" => self.chunk_size = parse(key, v)?,
            "corpus.chunk_overlap" => self.chunk_overlap = parse(key, v)?,
            "paths.corpus" => self.corpus_dir = v.into(),
            "paths.index" => self.index_dir = v.into(),
            "paths.templates" => self.templates_dir = (!v.is_empty()).then(|| v.into()),
            "provider.concurrency" => self.concurrency = parse(key, v)?,
            "provider.retries" => self.retries = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` pair given on the command line.
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Value {
            key: pair.into(),
            message: "expected key=value".into(),
        })?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.top_k == 0 {
            return bad("retrieval.top_k", "must be at least 1");
        }
        if self.votes_per_round == 0 {
            return bad("exam.votes_per_round", "must be at least 1");
        }
        if self.max_rounds == 0 {
            return bad("exam.max_rounds", "must be at least 1");
        }
        if self.chunk_size == 0 || self.chunk_overlap >= self.chunk_size {
            return bad("corpus.chunk_overlap", "must be smaller than corpus.chunk_size");
        }
        for (key, t) in [("chat.temperature", self.chat_temperature), ("exam.temperature", self.exam_temperature)] {
            if !(0.0..=2.0).contains(&t) {
                return bad(key, "must lie in [0, 2]");
            }
        }
        if self.concurrency == 0 {
            return bad("provider.concurrency", "must be at least 1");
        }
        if self.embed_batch == 0 {
            return bad("embed.batch", "must be at least 1");
        }
        Ok(())
    }
}

impl fmt::Display for AppConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let templates = self.templates_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: [String; 24] = [
            self.chat.base_url.clone(),
            self.chat.model.clone(),
            self.chat_temperature.to_string(),
            self.chat.api_key_env.clone(),
            self.chat.timeout_secs.to_string(),
            self.embed.base_url.clone(),
            self.embed.model.clone(),
            self.embed.api_key_env.clone(),
            self.embed.timeout_secs.to_string(),
            self.embed_batch.to_string(),
            self.votes_per_round.to_string(),
            self.max_rounds.to_string(),
            self.exam_temperature.to_string(),
            self.accumulate_votes.to_string(),
            self.mode.to_string(),
            self.top_k.to_string(),
            self.context_budget.to_string(),
            self.chunk_size.to_string(),
            self.chunk_overlap.to_string(),
            self.corpus_dir.display().to_string(),
            self.index_dir.display().to_string(),
            templates,
            self.concurrency.to_string(),
            self.retries.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_round_trips_through_parser() {
        let mut c = AppConfig::default();
        c.set("retrieval.mode", "local").unwrap();
        c.set("paths.templates", "tpl").unwrap();
        c.set("exam.accumulate", "false").unwrap();
        let mut back = AppConfig::default();
        back.apply_text(&c.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = AppConfig::default();
        assert_eq!(c.apply_text("# c\n\nnope"), Err(ConfigError::Syntax { line: 3 }));
        assert_eq!(c.set("chat.colour", "x"), Err(ConfigError::UnknownKey("chat.colour".into())));
        assert!(matches!(c.set("retrieval.top_k", "ten"), Err(ConfigError::Value { .. })));
        c.set("retrieval.top_k", "0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let c = AppConfig::default();
        c.validate().unwrap();
        assert_eq!((c.top_k, c.votes_per_round, c.mode), (10, 5, Mode::Hybrid));
        assert_eq!(c.to_string().lines().count(), KEYS.len());
    }
}
