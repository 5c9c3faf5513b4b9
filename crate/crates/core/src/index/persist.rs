//! Directory layout: `meta.json`, `vectors.jsonl`, `entities.jsonl`,
//! `relations.jsonl`. Floats are written with round-trip precision so a
//! reloaded index is bit-identical.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Entity, Index, IndexError, KnowledgeGraph, Relation, VectorRecord, VectorStore};
use crate::providers::EmbeddingVector;

pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.json";
const VECTORS: &str = "vectors.jsonl";
const ENTITIES: &str = "entities.jsonl";
const RELATIONS: &str = "relations.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    dim: Option<usize>,
    embed_model: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorLine {
    chunk_id: String,
    dim: usize,
    values: Vec<f64>,
    text: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), IndexError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| IndexError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, name: &str) -> Result<Vec<T>, IndexError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IndexError::Format {
                file: name.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `index` into directory `dir`, creating it if needed.
pub fn save_index(index: &Index, dir: &Path) -> Result<(), IndexError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        dim: index.store.dim(),
        embed_model: index.store.embed_model().to_string(),
    };
    let meta_path = dir.join(META);
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, meta_json + "\n").map_err(io_err(&meta_path))?;
    write_jsonl(
        &dir.join(VECTORS),
        index.store.records().map(|r| VectorLine {
            chunk_id: r.chunk_id.clone(),
            dim: r.vector.dim(),
            values: r.vector.values().to_vec(),
            text: r.text.clone(),
        }),
    )?;
    write_jsonl(&dir.join(ENTITIES), index.graph.entities())?;
    write_jsonl(&dir.join(RELATIONS), index.graph.relations())
}

/// Reads an index written by [`save_index`]. The version header is checked
/// before anything else is parsed.
pub fn load_index(dir: &Path) -> Result<Index, IndexError> {
    let meta_path = dir.join(META);
    let raw = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| IndexError::Format {
        file: META.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let found = value.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(IndexError::FormatVersion {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(IndexError::Format {
                file: META.into(),
                line: 0,
                message: "missing numeric format_version".into(),
            })
        }
    }
    let meta: Meta = serde_json::from_value(value).map_err(|e| IndexError::Format {
        file: META.into(),
        line: 0,
        message: e.to_string(),
    })?;

    let mut records = Vec::new();
    for (i, line) in read_jsonl::<VectorLine>(&dir.join(VECTORS), VECTORS)?.into_iter().enumerate() {
        let bad = |message: String| IndexError::Format {
            file: VECTORS.into(),
            line: i + 1,
            message,
        };
        if line.dim != line.values.len() {
            return Err(bad(format!("dim {} but {} values", line.dim, line.values.len())));
        }
        let vector = EmbeddingVector::new(line.values).map_err(|e| bad(e.to_string()))?;
        records.push(VectorRecord {
            chunk_id: line.chunk_id,
            vector,
            text: line.text,
        });
    }
    if let (Some(d), Some(first)) = (meta.dim, records.first()) {
        if first.vector.dim() != d {
            return Err(IndexError::DimMismatch {
                expected: d,
                got: first.vector.dim(),
            });
        }
    }
    let mut store = VectorStore::new(meta.embed_model);
    store.upsert(records)?;

    let entities: Vec<Entity> = read_jsonl(&dir.join(ENTITIES), ENTITIES)?;
    let relations: Vec<Relation> = read_jsonl(&dir.join(RELATIONS), RELATIONS)?;
    let mut graph = KnowledgeGraph::default();
    graph.insert_raw(entities, relations);
    Ok(Index { store, graph })
}
