//! Instruction-tuning data: generation from chunks, validation of model
//! replies, deduplication, seeded train/test split and JSONL files.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::{Chunk, CleanRules};
use crate::parallel::map_ordered;
use crate::providers::{ChatProvider, ChatRequest, ProviderError, DEFAULT_GENERATION_TEMPERATURE};
use crate::template::{self, TemplateError};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
pub const DEFAULT_SPLIT_SEED: u64 = 42;
pub const FIELDS: [&str; 3] = ["instruction", "input", "output"];

pub const DEFAULT_GENERATION_PROMPT: &str = r#"You are preparing training data for an assistant that specializes in steel structure demolition engineering.

Using only the reference text below, write exactly one training example as a JSON object with three string fields:
- "instruction": a task or question for the assistant. Vary the kind of task: analysis, comparison, explanation, evaluation, or a direct question.
- "input": extra material the task needs, or an empty string if the instruction stands alone.
- "output": a complete, accurate answer grounded in the reference text.

Every field must be meaningful. Return the JSON object and nothing else.

Reference text:
{text}
"#;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntryError {
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {0:?} is empty")]
    EmptyField(&'static str),
    #[error("field {0:?} is not a string")]
    InvalidField(&'static str),
    #[error("unexpected field {0:?}")]
    UnexpectedField(String),
    #[error("field {0:?} contains markup, links or control characters")]
    UncleanField(&'static str),
}

impl EntryError {
    /// Short machine-readable tag for reject files.
    pub fn kind(&self) -> &'static str {
        match self {
            EntryError::NoJsonFound => "no_json_found",
            EntryError::MissingField(_) => "missing_field",
            EntryError::EmptyField(_) => "empty_field",
            EntryError::InvalidField(_) => "invalid_field",
            EntryError::UnexpectedField(_) => "unexpected_field",
            EntryError::UncleanField(_) => "unclean_field",
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no chunks to generate from")]
    NoChunks,
    #[error("per_chunk must be positive")]
    InvalidPerChunk,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionEntry {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

impl InstructionEntry {
    pub fn new(instruction: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        InstructionEntry {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("entry serializes")
    }

    pub fn check(&self) -> Result<(), EntryError> {
        let rules = CleanRules::default();
        for (name, value) in FIELDS.into_iter().zip([&self.instruction, &self.input, &self.output]) {
            if name != "input" && value.trim().is_empty() {
                return Err(EntryError::EmptyField(name));
            }
            if rules.has_violations(value) {
                return Err(EntryError::UncleanField(name));
            }
        }
        Ok(())
    }
}

/// The first JSON object in `raw`, skipping prose, code fences and anything
/// after the object.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    let mut from = 0;
    while let Some(off) = raw[from..].find('{') {
        let start = from + off;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
        from = start + 1;
    }
    None
}

/// Parses a model reply into an entry. `input` may be absent; any field
/// other than the three known ones is rejected.
pub fn validate_entry(raw: &str) -> Result<InstructionEntry, EntryError> {
    let map = first_json_object(raw).ok_or(EntryError::NoJsonFound)?;
    if let Some(extra) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(EntryError::UnexpectedField(extra.clone()));
    }
    let get = |name: &'static str, required: bool| -> Result<String, EntryError> {
        match map.get(name) {
            None if required => Err(EntryError::MissingField(name)),
            None | Some(Value::Null) if !required => Ok(String::new()),
            Some(Value::String(s)) => Ok(s.clone()),
            _ => Err(EntryError::InvalidField(name)),
        }
    };
    let entry = InstructionEntry {
        instruction: get("instruction", true)?,
        input: get("input", false)?,
        output: get("output", true)?,
    };
    entry.check()?;
    Ok(entry)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub chunk_id: String,
    pub reason: String,
    pub raw_reply: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub prompt: String,
    pub model: String,
    pub temperature: f64,
    pub per_chunk: usize,
    pub workers: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            prompt: DEFAULT_GENERATION_PROMPT.to_string(),
            model: String::new(),
            temperature: DEFAULT_GENERATION_TEMPERATURE,
            per_chunk: 1,
            workers: 1,
        }
    }
}

#[derive(Debug)]
pub struct GenerationAbort {
    pub chunk_id: String,
    pub error: ProviderError,
}

#[derive(Debug, Default)]
pub struct Generation {
    pub entries: Vec<InstructionEntry>,
    pub rejects: Vec<Reject>,
    /// Set when a provider error stopped the batch; results before the
    /// failing chunk are kept.
    pub aborted: Option<GenerationAbort>,
}

/// Sends the filled prompt `per_chunk` times for every chunk and validates
/// each reply. Results are in chunk order whatever the worker count.
pub fn generate_entries(
    chunks: &[Chunk],
    llm: &dyn ChatProvider,
    cfg: &GenerationConfig,
) -> Result<Generation, DatasetError> {
    if chunks.is_empty() {
        return Err(DatasetError::NoChunks);
    }
    if cfg.per_chunk == 0 {
        return Err(DatasetError::InvalidPerChunk);
    }
    let prompts = chunks
        .iter()
        .map(|c| template::render(&cfg.prompt, &[("text", &c.text)], &[]))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..chunks.len()).flat_map(|c| (0..cfg.per_chunk).map(move |r| (c, r))).collect();
    let (replies, failure) = map_ordered(&jobs, cfg.workers, |_, &(c, _)| {
        llm.chat(&ChatRequest::user(&cfg.model, prompts[c].as_str()).with_temperature(cfg.temperature))
    });

    let mut out = Generation::default();
    // A chunk only contributes if all of its calls finished.
    let complete = match &failure {
        Some((job, _)) => replies.len().min(jobs[*job].0 * cfg.per_chunk),
        None => replies.len(),
    };
    for (&(c, _), reply) in jobs.iter().zip(replies).take(complete) {
        match validate_entry(&reply) {
            Ok(e) => out.entries.push(e),
            Err(err) => out.rejects.push(Reject {
                chunk_id: chunks[c].id(),
                reason: format!("{}: {}", err.kind(), err),
                raw_reply: reply,
            }),
        }
    }
    if let Some((job, error)) = failure {
        let chunk_id = chunks[jobs[job].0].id();
        log::warn!("generation stopped at chunk {chunk_id}: {error}");
        out.aborted = Some(GenerationAbort { chunk_id, error });
    }
    Ok(out)
}

/// Drops later entries whose (instruction, input) pair was already seen.
pub fn dedupe(entries: Vec<InstructionEntry>) -> Vec<InstructionEntry> {
    let mut seen = HashSet::new();
    entries
        .into_iter()
        .filter(|e| seen.insert((e.instruction.clone(), e.input.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<InstructionEntry>,
    pub test: Vec<InstructionEntry>,
    pub seed: u64,
    pub ratio: f64,
}

/// Training-set size: `floor(n * ratio)`, with a small tolerance so decimal
/// ratios such as 0.29 are not pushed below an exact product.
pub fn train_size(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Shuffles with a ChaCha8 stream seeded by `seed` and cuts at [`train_size`].
pub fn split(entries: &[InstructionEntry], ratio: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    if entries.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = train_size(entries.len(), ratio);
    let pick = |ix: &[usize]| ix.iter().map(|&i| entries[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..cut]),
        test: pick(&order[cut..]),
        seed,
        ratio,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for row in rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a dataset file, applying the same field rules as [`validate_entry`].
pub fn read_entries(path: &Path) -> Result<Vec<InstructionEntry>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| DatasetError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: InstructionEntry = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        entry.check().map_err(|e| fail(e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}
