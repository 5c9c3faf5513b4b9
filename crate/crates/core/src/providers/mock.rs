//! Deterministic offline providers.
//!
//! [`ScriptedChat`] replays a script of replies. A script is an ordered list
//! of entries; each request is answered by the first entry that is not yet
//! consumed and whose `when` substring (if any) occurs in the request's
//! message text. Non-sticky entries are consumed when used; sticky entries
//! answer every matching request. Scripts load from JSONL:
//!
//! ```text
//! {"reply": "A"}
//! {"when": "LOW:", "reply": "LOW: bearing | HIGH: safety", "sticky": true}
//! {"fail": "transport"}
//! {"reply": "fallback", "sticky": true}
//! ```

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_embed_input, check_embed_output, ChatProvider, ChatRequest, EmbedProvider,
    EmbeddingVector, ProviderError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Transport,
    RateLimited,
    Server,
    BadRequest,
}

impl MockFailure {
    fn to_error(self) -> ProviderError {
        match self {
            MockFailure::Transport => ProviderError::Transport("scripted transport failure".into()),
            MockFailure::RateLimited => ProviderError::RateLimited {
                retry_after: Some(Duration::ZERO),
            },
            MockFailure::Server => ProviderError::Protocol {
                status: Some(500),
                body: "scripted server error".into(),
            },
            MockFailure::BadRequest => ProviderError::Protocol {
                status: Some(400),
                body: "scripted bad request".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<MockFailure>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sticky: bool,
}

impl ScriptEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        ScriptEntry {
            when: None,
            reply: Some(text.into()),
            fail: None,
            sticky: false,
        }
    }

    pub fn fail(kind: MockFailure) -> Self {
        ScriptEntry {
            when: None,
            reply: None,
            fail: Some(kind),
            sticky: false,
        }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.when = Some(needle.into());
        self
    }

    pub fn sticky(mut self) -> Self {
        self.sticky = true;
        self
    }

    fn validate(&self) -> Result<(), String> {
        match (&self.reply, &self.fail) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err("each script entry needs exactly one of `reply` or `fail`".into()),
        }
    }
}

/// One answered request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockCall {
    pub request: ChatRequest,
    pub reply: Result<String, String>,
}

#[derive(Debug)]
struct ScriptState {
    entries: Vec<ScriptEntry>,
    consumed: Vec<bool>,
    calls: Vec<MockCall>,
}

#[derive(Debug)]
pub struct ScriptedChat {
    state: Mutex<ScriptState>,
}

impl ScriptedChat {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ProviderError> {
        for (i, e) in entries.iter().enumerate() {
            e.validate()
                .map_err(|m| ProviderError::InvalidInput(format!("script entry {}: {m}", i + 1)))?;
        }
        Ok(ScriptedChat {
            state: Mutex::new(ScriptState {
                consumed: vec![false; entries.len()],
                entries,
                calls: Vec::new(),
            }),
        })
    }

    /// Answers every request with `reply`.
    pub fn always(reply: impl Into<String>) -> Self {
        Self::new(vec![ScriptEntry::reply(reply).sticky()]).expect("valid entry")
    }

    /// Answers successive requests from `replies`, in order, then fails.
    pub fn queue<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(replies.into_iter().map(ScriptEntry::reply).collect()).expect("valid entries")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ProviderError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                ProviderError::InvalidInput(format!("script line {}: {e}", i + 1))
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::InvalidInput(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    /// Every request answered so far, in order.
    pub fn calls(&self) -> Vec<MockCall> {
        self.state.lock().expect("script lock").calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().expect("script lock").calls.len()
    }
}

impl ChatProvider for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let text = req.joined_text();
        let mut state = self.state.lock().expect("script lock");
        let hit = state.entries.iter().enumerate().position(|(i, e)| {
            !state.consumed[i] && e.when.as_deref().is_none_or(|w| text.contains(w))
        });
        let result = match hit {
            Some(i) => {
                let entry = state.entries[i].clone();
                if !entry.sticky {
                    state.consumed[i] = true;
                }
                match (entry.reply, entry.fail) {
                    (Some(reply), _) => Ok(reply),
                    (None, Some(kind)) => Err(kind.to_error()),
                    (None, None) => unreachable!("validated on construction"),
                }
            }
            None => Err(ProviderError::Protocol {
                status: None,
                body: "mock script exhausted".into(),
            }),
        };
        state.calls.push(MockCall {
            request: req.clone(),
            reply: result.clone().map_err(|e| e.to_string()),
        });
        result
    }
}

/// Wraps a closure as a chat provider.
pub struct FnChat<F>(pub F);

impl<F> ChatProvider for FnChat<F>
where
    F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        req.validate()?;
        (self.0)(req)
    }
}

pub const DEFAULT_MOCK_DIM: usize = 64;
const MAX_GRAM: usize = 3;

/// Hashes lowercased character 1..=3-grams into `dim` buckets (weight = gram
/// length), then L2-normalizes. Weights are positive, so no non-empty text
/// maps to the zero vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub model: String,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            dim: DEFAULT_MOCK_DIM,
            seed: 0,
            model: "mock-hash-embedder".into(),
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

impl HashEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        HashEmbedder {
            dim,
            ..Self::default()
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let dim = self.dim.max(1);
        let mut acc = vec![0.0f64; dim];
        let mut buf = String::new();
        for n in 1..=MAX_GRAM {
            for gram in chars.windows(n) {
                buf.clear();
                buf.extend(gram);
                let h = fnv1a(self.seed, buf.as_bytes());
                acc[(h % dim as u64) as usize] += n as f64;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(acc).expect("finite, non-empty")
    }
}

impl EmbedProvider for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_embed_input(texts)?;
        let out: Vec<_> = texts.iter().map(|t| self.embed_one(t)).collect();
        check_embed_output(texts.len(), &out)?;
        Ok(out)
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}
