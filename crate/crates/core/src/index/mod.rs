//! Vector store with exact cosine top-k search, plus the knowledge graph
//! extracted from the same chunks.

pub mod graph;
mod persist;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::providers::{check_embed_output, cosine, ChatProvider, EmbedProvider, EmbeddingVector, ProviderError};
use crate::template::TemplateError;

pub use graph::{
    build_graph, extract_graph, normalize_name, Entity, Extraction, ExtractionConfig,
    GraphBuildReport, KnowledgeGraph, Relation, DEFAULT_EXTRACTION_PROMPT,
};
pub use persist::{load_index, save_index, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector store is empty")]
    EmptyStore,
    #[error("dimension mismatch: store has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("record {0} has an all-zero vector")]
    ZeroVector(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },
    #[error("unsupported index format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub chunk_id: String,
    pub vector: EmbeddingVector,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
}

/// Descending score, then ascending chunk id.
pub fn rank_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
}

/// Flat store: one record per chunk id, every vector of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorStore {
    dim: Option<usize>,
    embed_model: String,
    records: BTreeMap<String, VectorRecord>,
}

impl VectorStore {
    pub fn new(embed_model: impl Into<String>) -> Self {
        VectorStore {
            dim: None,
            embed_model: embed_model.into(),
            records: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn embed_model(&self) -> &str {
        &self.embed_model
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&VectorRecord> {
        self.records.get(chunk_id)
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.records.contains_key(chunk_id)
    }

    /// Records in ascending chunk-id order.
    pub fn records(&self) -> impl Iterator<Item = &VectorRecord> {
        self.records.values()
    }

    /// Inserts or replaces records by chunk id. The batch is validated as a
    /// whole, so a rejected batch leaves the store untouched.
    pub fn upsert(&mut self, records: Vec<VectorRecord>) -> Result<usize, IndexError> {
        let mut dim = self.dim;
        for r in &records {
            let expected = *dim.get_or_insert(r.vector.dim());
            if r.vector.dim() != expected {
                return Err(IndexError::DimMismatch {
                    expected,
                    got: r.vector.dim(),
                });
            }
            if r.vector.is_zero() {
                return Err(IndexError::ZeroVector(r.chunk_id.clone()));
            }
        }
        self.dim = dim;
        let n = records.len();
        for r in records {
            self.records.insert(r.chunk_id.clone(), r);
        }
        Ok(n)
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<(), IndexError> {
        match self.dim {
            None => Err(IndexError::EmptyStore),
            Some(_) if self.records.is_empty() => Err(IndexError::EmptyStore),
            Some(d) if d != query.dim() => Err(IndexError::DimMismatch {
                expected: d,
                got: query.dim(),
            }),
            Some(_) if query.is_zero() => Err(IndexError::Provider(ProviderError::ZeroVector)),
            Some(_) => Ok(()),
        }
    }

    /// Cosine score of one stored record against `query`.
    pub fn score(&self, chunk_id: &str, query: &EmbeddingVector) -> Result<Option<f64>, IndexError> {
        self.check_query(query)?;
        self.records
            .get(chunk_id)
            .map(|r| cosine(&r.vector, query).map_err(IndexError::from))
            .transpose()
    }

    /// Exact top-k by cosine; ties go to the smaller chunk id.
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        self.check_query(query)?;
        let mut hits = self
            .records
            .values()
            .map(|r| {
                Ok(Hit {
                    chunk_id: r.chunk_id.clone(),
                    score: cosine(&r.vector, query)?,
                })
            })
            .collect::<Result<Vec<_>, ProviderError>>()?;
        rank_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }
}

/// Everything retrieval needs: vectors and the graph built from the same chunks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Index {
    pub store: VectorStore,
    pub graph: KnowledgeGraph,
}

impl Index {
    pub fn new(embed_model: impl Into<String>) -> Self {
        Index {
            store: VectorStore::new(embed_model),
            graph: KnowledgeGraph::default(),
        }
    }

    /// Graph chunk references that do not exist in the vector store.
    pub fn dangling_chunk_refs(&self) -> Vec<String> {
        let mut missing: Vec<String> = self
            .graph
            .entities()
            .flat_map(|e| e.source_chunk_ids.iter())
            .chain(self.graph.relations().flat_map(|r| r.source_chunk_ids.iter()))
            .filter(|id| !self.store.contains(id))
            .cloned()
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }
}

pub const DEFAULT_EMBED_BATCH: usize = 32;

/// Embeds chunk texts in batches of `batch` and pairs them with chunk ids.
pub fn embed_chunks(chunks: &[Chunk], embedder: &dyn EmbedProvider, batch: usize) -> Result<Vec<VectorRecord>, IndexError> {
    let mut out = Vec::with_capacity(chunks.len());
    for group in chunks.chunks(batch.max(1)) {
        let texts: Vec<String> = group.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        check_embed_output(texts.len(), &vectors)?;
        out.extend(group.iter().zip(vectors).map(|(c, vector)| VectorRecord {
            chunk_id: c.id(),
            vector,
            text: c.text.clone(),
        }));
    }
    Ok(out)
}

/// Embeds every chunk and, when `llm` is given, extracts the graph too.
pub fn build_index(
    chunks: &[Chunk],
    embedder: &dyn EmbedProvider,
    llm: Option<&dyn ChatProvider>,
    extraction: &ExtractionConfig,
) -> Result<(Index, GraphBuildReport), IndexError> {
    let mut index = Index::new(embedder.model_name());
    index.store.upsert(embed_chunks(chunks, embedder, DEFAULT_EMBED_BATCH)?)?;
    let report = match llm {
        Some(llm) => {
            let (graph, report) = build_graph(chunks, llm, extraction)?;
            index.graph = graph;
            report
        }
        None => GraphBuildReport::default(),
    };
    Ok((index, report))
}
