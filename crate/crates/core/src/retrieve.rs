//! Query embedding, context retrieval over an [`Index`], and prompt assembly.
//!
//! Four modes:
//! - `naive`: top-k chunks by cosine.
//! - `local`: entities whose names match the query's low-level keywords,
//!   plus the chunks they came from.
//! - `global`: relations whose keywords match the high-level keywords, plus
//!   the chunks of their endpoints.
//! - `hybrid`: everything above, with candidate chunks re-scored by cosine.
//!
//! Keyword matching is case-insensitive substring containment in either
//! direction, so `bearing` matches `rubber bearing` and vice versa.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{rank_hits, Entity, Hit, Index, IndexError, Relation};
use crate::providers::{ChatProvider, ChatRequest, EmbedProvider, EmbeddingVector, ProviderError};
use crate::template::{self, TemplateError};

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_CHAR_BUDGET: usize = 6000;

pub const DEFAULT_KEYWORD_PROMPT: &str = "\
Identify the search keywords in the question below.
Low-level keywords are concrete entities, components, equipment or parameters.
High-level keywords are overarching themes or concepts.
Reply with one line in exactly this format and nothing else:
LOW: keyword, keyword | HIGH: keyword, keyword

Question: {query}
";

pub const DEFAULT_ANSWER_TEMPLATE: &str = "\
Use the reference material below when it is relevant to the question.

{context}

Question: {query}
";

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("top_k must be positive")]
    InvalidTopK,
    #[error("vector store is empty")]
    EmptyStore,
    #[error(transparent)]
    Index(IndexError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl From<IndexError> for RetrieveError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::EmptyStore => RetrieveError::EmptyStore,
            IndexError::Provider(p) => RetrieveError::Provider(p),
            other => RetrieveError::Index(other),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Naive,
    Local,
    Global,
    #[default]
    Hybrid,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Naive, Mode::Local, Mode::Global, Mode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Local => "local",
            Mode::Global => "global",
            Mode::Hybrid => "hybrid",
        }
    }

    fn uses_graph(self) -> bool {
        self != Mode::Naive
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown retrieval mode {s:?} (expected naive, local, global or hybrid)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub mode: Mode,
    pub top_k: usize,
}

impl Query {
    pub fn new(text: impl Into<String>, mode: Mode) -> Self {
        Query {
            text: text.into(),
            mode,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }

    fn validate(&self) -> Result<(), RetrieveError> {
        if self.text.trim().is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        if self.top_k == 0 {
            return Err(RetrieveError::InvalidTopK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChunk {
    pub chunk_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub chunks: Vec<RankedChunk>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub rendered: String,
}

impl ContextBundle {
    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty() && self.entities.is_empty() && self.relations.is_empty()
    }
}

/// Renders the three sections in fixed order; empty sections are omitted.
pub fn render_context(chunks: &[RankedChunk], entities: &[Entity], relations: &[Relation]) -> String {
    let mut sections = Vec::new();
    if !entities.is_empty() {
        let body: Vec<String> = entities
            .iter()
            .map(|e| format!("- {} ({}): {}", e.name, e.etype, e.description))
            .collect();
        sections.push(format!("## Entities\n{}", body.join("\n")));
    }
    if !relations.is_empty() {
        let body: Vec<String> = relations
            .iter()
            .map(|r| format!("- {} -> {} [{}]: {}", r.src, r.dst, r.keywords.join(", "), r.description))
            .collect();
        sections.push(format!("## Relations\n{}", body.join("\n")));
    }
    if !chunks.is_empty() {
        let body: Vec<String> = chunks.iter().map(|c| format!("[{}] {}", c.chunk_id, c.text)).collect();
        sections.push(format!("## Passages\n{}", body.join("\n\n")));
    }
    sections.join("\n\n")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keywords {
    pub low: Vec<String>,
    pub high: Vec<String>,
}

fn split_keywords(section: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for k in section.split([',', '，', ';', '、']) {
        let k = k.trim().trim_matches(|c| matches!(c, '"' | '\'' | '[' | ']' | '.')).trim().to_lowercase();
        if !k.is_empty() && !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Lowercased alphanumeric runs of `text`, deduplicated in order.
pub fn query_terms(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in text.split(|c: char| !c.is_alphanumeric()) {
        let w = w.to_lowercase();
        if !w.is_empty() && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Parses `LOW: a, b | HIGH: c`. Either marker may be absent; if both are,
/// the query's own words become the low-level keywords.
pub fn parse_query_keywords(reply: &str, query_text: &str) -> Keywords {
    let upper = reply.to_uppercase();
    // Uppercasing can change byte offsets for some scripts; only trust it when it does not.
    let find = |marker: &str| {
        if upper.len() == reply.len() {
            upper.find(marker)
        } else {
            reply.find(marker)
        }
    };
    let (low_at, high_at) = (find("LOW:"), find("HIGH:"));
    if low_at.is_none() && high_at.is_none() {
        return Keywords {
            low: query_terms(query_text),
            high: Vec::new(),
        };
    }
    let section = |start: Option<usize>, marker: &str, other: Option<usize>| -> Vec<String> {
        let Some(s) = start else { return Vec::new() };
        let from = s + marker.len();
        let to = match other {
            Some(o) if o > s => o,
            _ => reply.len(),
        };
        let text = &reply[from..to];
        let text = text.split('\n').next().unwrap_or("");
        split_keywords(text.trim_end().trim_end_matches('|'))
    };
    Keywords {
        low: section(low_at, "LOW:", high_at),
        high: section(high_at, "HIGH:", low_at),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveConfig {
    pub model: String,
    pub keyword_prompt: String,
    pub char_budget: usize,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig {
            model: String::new(),
            keyword_prompt: DEFAULT_KEYWORD_PROMPT.to_string(),
            char_budget: DEFAULT_CHAR_BUDGET,
        }
    }
}

pub fn extract_query_keywords(
    query: &Query,
    llm: &dyn ChatProvider,
    cfg: &RetrieveConfig,
) -> Result<Keywords, RetrieveError> {
    query.validate()?;
    let prompt = template::render(&cfg.keyword_prompt, &[("query", &query.text)], &[])?;
    let reply = llm.chat(&ChatRequest::user(&cfg.model, prompt).with_temperature(0.0))?;
    Ok(parse_query_keywords(&reply, &query.text))
}

fn keyword_matches(keyword: &str, name: &str) -> bool {
    let (k, n) = (keyword.to_lowercase(), name.to_lowercase());
    !k.is_empty() && !n.is_empty() && (n.contains(&k) || k.contains(&n))
}

/// Candidate material for one query before scoring and truncation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Candidates {
    pub chunk_ids: BTreeSet<String>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

fn local_candidates(index: &Index, low: &[String]) -> Candidates {
    let entities: Vec<Entity> = index
        .graph
        .entities()
        .filter(|e| low.iter().any(|k| keyword_matches(k, &e.name)))
        .cloned()
        .collect();
    let chunk_ids = entities.iter().flat_map(|e| e.source_chunk_ids.iter().cloned()).collect();
    Candidates {
        chunk_ids,
        entities,
        relations: Vec::new(),
    }
}

fn global_candidates(index: &Index, high: &[String]) -> Candidates {
    let relations: Vec<Relation> = index
        .graph
        .relations()
        .filter(|r| high.iter().any(|k| r.keywords.iter().any(|rk| keyword_matches(k, rk))))
        .cloned()
        .collect();
    let mut endpoints = BTreeMap::new();
    for r in &relations {
        for name in [&r.src, &r.dst] {
            if let Some(e) = index.graph.entity(name) {
                endpoints.insert(e.name.clone(), e.clone());
            }
        }
    }
    let chunk_ids = relations
        .iter()
        .flat_map(|r| r.source_chunk_ids.iter().cloned())
        .chain(endpoints.values().flat_map(|e| e.source_chunk_ids.iter().cloned()))
        .collect();
    Candidates {
        chunk_ids,
        entities: endpoints.into_values().collect(),
        relations,
    }
}

/// Graph-derived candidates for `mode`, plus `naive` hits for hybrid.
pub fn gather_candidates(index: &Index, mode: Mode, keywords: &Keywords, naive: &[Hit]) -> Candidates {
    match mode {
        Mode::Naive => Candidates {
            chunk_ids: naive.iter().map(|h| h.chunk_id.clone()).collect(),
            ..Candidates::default()
        },
        Mode::Local => local_candidates(index, &keywords.low),
        Mode::Global => global_candidates(index, &keywords.high),
        Mode::Hybrid => {
            let local = local_candidates(index, &keywords.low);
            let global = global_candidates(index, &keywords.high);
            let mut entities: BTreeMap<String, Entity> =
                local.entities.into_iter().map(|e| (e.name.clone(), e)).collect();
            for e in global.entities {
                entities.entry(e.name.clone()).or_insert(e);
            }
            let mut chunk_ids = local.chunk_ids;
            chunk_ids.extend(global.chunk_ids);
            chunk_ids.extend(naive.iter().map(|h| h.chunk_id.clone()));
            Candidates {
                chunk_ids,
                entities: entities.into_values().collect(),
                relations: global.relations,
            }
        }
    }
}

/// Entities with the most supporting chunks first; relations by weight.
fn rank_graph(entities: &mut Vec<Entity>, relations: &mut Vec<Relation>, top_k: usize) {
    entities.sort_by(|a, b| {
        b.source_chunk_ids.len().cmp(&a.source_chunk_ids.len()).then_with(|| a.name.cmp(&b.name))
    });
    entities.truncate(top_k);
    relations.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)))
    });
    relations.truncate(top_k);
}

/// Drops lowest-scored passages, then lowest-ranked relations, then entities,
/// until the rendered text fits `budget` characters.
fn fit_budget(bundle: &mut ContextBundle, budget: usize) {
    loop {
        bundle.rendered = render_context(&bundle.chunks, &bundle.entities, &bundle.relations);
        if bundle.rendered.chars().count() <= budget {
            return;
        }
        if bundle.chunks.pop().is_none() && bundle.relations.pop().is_none() && bundle.entities.pop().is_none() {
            return;
        }
    }
}

fn embed_query(text: &str, embedder: &dyn EmbedProvider) -> Result<EmbeddingVector, RetrieveError> {
    let mut v = embedder.embed(&[text.to_string()])?;
    match v.len() {
        1 => Ok(v.remove(0)),
        n => Err(ProviderError::Protocol {
            status: None,
            body: format!("expected 1 embedding, got {n}"),
        }
        .into()),
    }
}

/// Retrieves a context bundle. `llm` is only consulted for graph modes.
pub fn retrieve(
    query: &Query,
    index: &Index,
    embedder: &dyn EmbedProvider,
    llm: &dyn ChatProvider,
    cfg: &RetrieveConfig,
) -> Result<ContextBundle, RetrieveError> {
    query.validate()?;
    if index.store.is_empty() {
        return Err(RetrieveError::EmptyStore);
    }
    let qvec = embed_query(&query.text, embedder)?;
    let naive = index.store.knn(&qvec, query.top_k)?;
    let keywords = if query.mode.uses_graph() {
        extract_query_keywords(query, llm, cfg)?
    } else {
        Keywords::default()
    };
    let Candidates {
        chunk_ids,
        mut entities,
        mut relations,
    } = gather_candidates(index, query.mode, &keywords, &naive);

    let mut hits = Vec::with_capacity(chunk_ids.len());
    for id in chunk_ids {
        match index.store.score(&id, &qvec)? {
            Some(score) => hits.push(Hit { chunk_id: id, score }),
            None => log::warn!("graph references chunk {id} which is not in the vector store"),
        }
    }
    rank_hits(&mut hits);
    hits.truncate(query.top_k);
    rank_graph(&mut entities, &mut relations, query.top_k);

    let chunks = hits
        .into_iter()
        .map(|h| RankedChunk {
            text: index.store.get(&h.chunk_id).map(|r| r.text.clone()).unwrap_or_default(),
            chunk_id: h.chunk_id,
            score: h.score,
        })
        .collect();
    let mut bundle = ContextBundle {
        chunks,
        entities,
        relations,
        rendered: String::new(),
    };
    fit_budget(&mut bundle, cfg.char_budget);
    Ok(bundle)
}

/// Substitutes `{context}` and `{query}`, each of which must appear exactly once.
pub fn assemble_prompt(query: &Query, ctx: &ContextBundle, template: &str) -> Result<String, TemplateError> {
    template::render(template, &[("context", &ctx.rendered), ("query", &query.text)], &[])
}

/// Anything that can supply context for a question.
pub trait Retriever: Send + Sync {
    fn context(&self, question: &str) -> Result<ContextBundle, RetrieveError>;
}

pub struct RagRetriever<'a> {
    pub index: &'a Index,
    pub embedder: &'a dyn EmbedProvider,
    pub llm: &'a dyn ChatProvider,
    pub mode: Mode,
    pub top_k: usize,
    pub config: RetrieveConfig,
}

impl<'a> RagRetriever<'a> {
    pub fn new(index: &'a Index, embedder: &'a dyn EmbedProvider, llm: &'a dyn ChatProvider) -> Self {
        RagRetriever {
            index,
            embedder,
            llm,
            mode: Mode::default(),
            top_k: DEFAULT_TOP_K,
            config: RetrieveConfig::default(),
        }
    }
}

impl Retriever for RagRetriever<'_> {
    fn context(&self, question: &str) -> Result<ContextBundle, RetrieveError> {
        let q = Query::new(question, self.mode).with_top_k(self.top_k);
        retrieve(&q, self.index, self.embedder, self.llm, &self.config)
    }
}
