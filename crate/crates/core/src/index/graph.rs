//! Entity/relation graph built by asking a chat model to annotate each chunk.
//!
//! The model answers with one record per line:
//!
//! ```text
//! ENTITY<|>name<|>type<|>description
//! RELATION<|>source<|>target<|>keyword, keyword<|>description<|>weight
//! ```
//!
//! Lines that do not parse are skipped and counted. Entity names are
//! normalized (trimmed, quotes removed, whitespace collapsed, lowercased) and
//! records naming the same entity, or the same directed pair, are merged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::IndexError;
use crate::corpus::Chunk;
use crate::parallel::map_ordered;
use crate::providers::{ChatProvider, ChatRequest};
use crate::template;

pub const RECORD_DELIMITER: &str = "<|>";
const DESCRIPTION_SEPARATOR: &str = " | ";

pub const DEFAULT_EXTRACTION_PROMPT: &str = "\
You are building a knowledge graph for steel structure demolition engineering.
Read the text below and list the entities it mentions and the relationships between them.

Write one record per line, in exactly one of these two formats, with no other text:
ENTITY<|>entity name<|>entity type<|>one-sentence description
RELATION<|>source entity<|>target entity<|>keyword, keyword<|>one-sentence description<|>strength

Entity types are short tags such as component, structure, method, equipment, hazard, measure, standard or parameter.
Relationship keywords are high-level concepts or themes that summarize the relationship.
Strength is a non-negative number; larger means more closely related.
Every entity used in a RELATION record must also have its own ENTITY record.

Text:
{text}
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub etype: String,
    pub description: String,
    pub source_chunk_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub src: String,
    pub dst: String,
    pub keywords: Vec<String>,
    pub description: String,
    pub weight: f64,
    pub source_chunk_ids: BTreeSet<String>,
}

/// Trimmed, unquoted, whitespace-collapsed, lowercased.
pub fn normalize_name(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '「' | '」'))
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn join_description(existing: &mut String, new: &str) {
    let new = new.trim();
    if new.is_empty() || existing.split(DESCRIPTION_SEPARATOR).any(|d| d == new) {
        return;
    }
    if !existing.is_empty() {
        existing.push_str(DESCRIPTION_SEPARATOR);
    }
    existing.push_str(new);
}

/// Graph keyed by normalized entity name and by directed (src, dst) pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeMap<(String, String), Relation>,
}

impl KnowledgeGraph {
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.get(&normalize_name(name))
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    /// Merges an entity by name: the first non-empty type wins, distinct
    /// descriptions are joined, and source chunks are unioned.
    pub fn add_entity(&mut self, e: Entity) {
        let name = normalize_name(&e.name);
        if name.is_empty() {
            return;
        }
        match self.entities.get_mut(&name) {
            Some(existing) => {
                if existing.etype.is_empty() {
                    existing.etype = e.etype;
                }
                join_description(&mut existing.description, &e.description);
                existing.source_chunk_ids.extend(e.source_chunk_ids);
            }
            None => {
                let mut description = String::new();
                join_description(&mut description, &e.description);
                self.entities.insert(
                    name.clone(),
                    Entity {
                        name,
                        etype: e.etype.trim().to_string(),
                        description,
                        source_chunk_ids: e.source_chunk_ids,
                    },
                );
            }
        }
    }

    /// Merges a relation by directed pair: keywords are unioned in order,
    /// weights add up. Endpoints without an entity record get a placeholder
    /// entity of type `unknown`. Self-loops are dropped.
    pub fn add_relation(&mut self, r: Relation) {
        let (src, dst) = (normalize_name(&r.src), normalize_name(&r.dst));
        if src.is_empty() || dst.is_empty() || src == dst {
            return;
        }
        for endpoint in [&src, &dst] {
            if !self.entities.contains_key(endpoint) {
                self.add_entity(Entity {
                    name: endpoint.clone(),
                    etype: String::new(),
                    description: String::new(),
                    source_chunk_ids: r.source_chunk_ids.clone(),
                });
                self.entities.get_mut(endpoint).expect("just added").etype = "unknown".into();
            }
        }
        let keywords: Vec<String> = r
            .keywords
            .iter()
            .map(|k| normalize_name(k))
            .filter(|k| !k.is_empty())
            .collect();
        match self.relations.get_mut(&(src.clone(), dst.clone())) {
            Some(existing) => {
                for k in keywords {
                    if !existing.keywords.contains(&k) {
                        existing.keywords.push(k);
                    }
                }
                join_description(&mut existing.description, &r.description);
                existing.weight += r.weight;
                existing.source_chunk_ids.extend(r.source_chunk_ids);
            }
            None => {
                let mut unique = Vec::new();
                for k in keywords {
                    if !unique.contains(&k) {
                        unique.push(k);
                    }
                }
                let mut description = String::new();
                join_description(&mut description, &r.description);
                self.relations.insert(
                    (src.clone(), dst.clone()),
                    Relation {
                        src,
                        dst,
                        keywords: unique,
                        description,
                        weight: r.weight,
                        source_chunk_ids: r.source_chunk_ids,
                    },
                );
            }
        }
    }

    pub fn merge(&mut self, extraction: Extraction) {
        for e in extraction.entities {
            self.add_entity(e);
        }
        for r in extraction.relations {
            self.add_relation(r);
        }
    }

    /// Inserts stored records verbatim (used when loading a saved index).
    pub(crate) fn insert_raw(&mut self, entities: Vec<Entity>, relations: Vec<Relation>) {
        for e in entities {
            self.entities.insert(e.name.clone(), e);
        }
        for r in relations {
            self.relations.insert((r.src.clone(), r.dst.clone()), r);
        }
    }

    /// Relations whose endpoint has no entity record.
    pub fn dangling_relations(&self) -> Vec<&Relation> {
        self.relations
            .values()
            .filter(|r| !self.entities.contains_key(&r.src) || !self.entities.contains_key(&r.dst))
            .collect()
    }
}

/// Records parsed from one chunk, duplicates already merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub skipped: usize,
}

fn unwrap_record(line: &str) -> &str {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*']).trim();
    s = s.strip_suffix("##").unwrap_or(s).trim();
    if let Some(inner) = s.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
        s = inner.trim();
    }
    s
}

fn field(raw: &str) -> &str {
    raw.trim().trim_matches('"').trim()
}

/// Parses a model reply into a merged [`Extraction`] for `chunk_id`.
pub fn parse_extraction(reply: &str, chunk_id: &str) -> Extraction {
    let sources: BTreeSet<String> = [chunk_id.to_string()].into();
    let mut graph = KnowledgeGraph::default();
    let mut relations = Vec::new();
    let mut skipped = 0;
    for line in reply.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("```") {
            continue;
        }
        let parts: Vec<&str> = unwrap_record(trimmed).split(RECORD_DELIMITER).map(field).collect();
        let tag = parts[0].to_ascii_uppercase();
        match (tag.as_str(), parts.len()) {
            ("ENTITY", 4) if !normalize_name(parts[1]).is_empty() => graph.add_entity(Entity {
                name: parts[1].to_string(),
                etype: parts[2].to_string(),
                description: parts[3].to_string(),
                source_chunk_ids: sources.clone(),
            }),
            ("RELATION", 6) => {
                let weight = parts[5].parse::<f64>().ok().filter(|w| w.is_finite() && *w >= 0.0);
                let (src, dst) = (normalize_name(parts[1]), normalize_name(parts[2]));
                match weight {
                    Some(weight) if !src.is_empty() && !dst.is_empty() && src != dst => {
                        relations.push(Relation {
                            src,
                            dst,
                            keywords: parts[3].split([',', '，', ';']).map(str::to_string).collect(),
                            description: parts[4].to_string(),
                            weight,
                            source_chunk_ids: sources.clone(),
                        })
                    }
                    _ => skipped += 1,
                }
            }
            _ => skipped += 1,
        }
    }
    for r in relations {
        graph.add_relation(r);
    }
    Extraction {
        entities: graph.entities.into_values().collect(),
        relations: graph.relations.into_values().collect(),
        skipped,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub prompt: String,
    pub model: String,
    pub temperature: f64,
    pub workers: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            prompt: DEFAULT_EXTRACTION_PROMPT.to_string(),
            model: String::new(),
            temperature: 0.0,
            workers: 1,
        }
    }
}

/// Asks the model to annotate one chunk and parses the reply.
pub fn extract_graph(
    chunk: &Chunk,
    llm: &dyn ChatProvider,
    cfg: &ExtractionConfig,
) -> Result<Extraction, IndexError> {
    if chunk.text.trim().is_empty() {
        return Err(IndexError::Format {
            file: chunk.id(),
            line: 0,
            message: "chunk has no text".into(),
        });
    }
    let prompt = template::render(&cfg.prompt, &[("text", &chunk.text)], &[])?;
    let reply = llm.chat(&ChatRequest::user(&cfg.model, prompt).with_temperature(cfg.temperature))?;
    let extraction = parse_extraction(&reply, &chunk.id());
    if extraction.skipped > 0 {
        log::warn!("{}: skipped {} unparseable record(s)", chunk.id(), extraction.skipped);
    }
    Ok(extraction)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphBuildReport {
    pub chunks: usize,
    pub skipped_records: usize,
}

/// Extracts every chunk (up to `cfg.workers` at a time) and merges results
/// in chunk order.
pub fn build_graph(
    chunks: &[Chunk],
    llm: &dyn ChatProvider,
    cfg: &ExtractionConfig,
) -> Result<(KnowledgeGraph, GraphBuildReport), IndexError> {
    let (extractions, err) = map_ordered(chunks, cfg.workers, |_, c| extract_graph(c, llm, cfg));
    if let Some((_, e)) = err {
        return Err(e);
    }
    let mut graph = KnowledgeGraph::default();
    let mut report = GraphBuildReport {
        chunks: chunks.len(),
        skipped_records: 0,
    };
    for x in extractions {
        report.skipped_records += x.skipped;
        graph.merge(x);
    }
    Ok((graph, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ScriptedChat;

    fn chunk(text: &str) -> Chunk {
        Chunk {
            doc_id: "d".into(),
            seq: 0,
            text: text.into(),
            char_start: 0,
            char_end: text.chars().count(),
        }
    }

    const TWO_AND_ONE: &str = "\
ENTITY<|>Steel Truss<|>structure<|>Roof truss made of Q235 steel
ENTITY<|>Tower Crane<|>equipment<|>Lifts removed members
RELATION<|>Tower Crane<|>Steel Truss<|>hoisting, member removal<|>The crane lifts truss members<|>8";

    #[test]
    fn extracts_entities_and_relation() {
        let llm = ScriptedChat::always(TWO_AND_ONE);
        let x = extract_graph(&chunk("some text"), &llm, &ExtractionConfig::default()).unwrap();
        assert_eq!((x.entities.len(), x.relations.len(), x.skipped), (2, 1, 0));
        let r = &x.relations[0];
        assert_eq!((r.src.as_str(), r.dst.as_str()), ("tower crane", "steel truss"));
        assert_eq!(r.keywords, ["hoisting", "member removal"]);
        assert_eq!(r.weight, 8.0);
        assert!(r.source_chunk_ids.contains("d#0"));
        let prompt = &llm.calls()[0].request.messages[0].content;
        assert!(prompt.ends_with("some text\n"));
    }

    #[test]
    fn prose_yields_nothing() {
        let x = parse_extraction("The text discusses demolition.\nNothing else to say.", "c");
        assert_eq!((x.entities.len(), x.relations.len()), (0, 0));
        assert_eq!(x.skipped, 2);
    }

    #[test]
    fn duplicate_entities_merge() {
        let x = parse_extraction(
            "ENTITY<|>Bearing<|>component<|>Supports the grid\nENTITY<|>  bearing <|>component<|>Rubber pad type",
            "c",
        );
        assert_eq!(x.entities.len(), 1);
        assert_eq!(x.entities[0].description, "Supports the grid | Rubber pad type");
    }

    #[test]
    fn malformed_records_are_skipped() {
        let reply = "\
ENTITY<|>a<|>t
RELATION<|>a<|>b<|>k<|>d<|>not-a-number
RELATION<|>a<|>a<|>k<|>d<|>1
RELATION<|>a<|>b<|>k<|>d<|>-1
(ENTITY<|>\"Grid\"<|>structure<|>Space grid)##
- RELATION<|>grid<|>support<|>load path<|>Grid rests on support<|>2
```";
        let x = parse_extraction(reply, "c");
        assert_eq!(x.skipped, 4);
        assert_eq!(x.relations.len(), 1);
        // "support" only appears as a relation endpoint.
        let support = x.entities.iter().find(|e| e.name == "support").unwrap();
        assert_eq!(support.etype, "unknown");
        assert!(x.entities.iter().any(|e| e.name == "grid" && e.etype == "structure"));
    }

    #[test]
    fn graph_merge_across_chunks() {
        let mut g = KnowledgeGraph::default();
        g.merge(parse_extraction("RELATION<|>a<|>b<|>x, y<|>first<|>1", "c1"));
        g.merge(parse_extraction("RELATION<|>A<|>B<|>y, z<|>second<|>2.5", "c2"));
        let r = g.relations().next().unwrap();
        assert_eq!(r.keywords, ["x", "y", "z"]);
        assert_eq!(r.weight, 3.5);
        assert_eq!(r.source_chunk_ids.len(), 2);
        assert!(g.dangling_relations().is_empty());
        assert_eq!(g.entity("  A ").unwrap().source_chunk_ids.len(), 2);
    }

    #[test]
    fn build_graph_propagates_provider_errors() {
        let llm = ScriptedChat::queue([TWO_AND_ONE]);
        let chunks = vec![chunk("one"), chunk("two")];
        assert!(matches!(
            build_graph(&chunks, &llm, &ExtractionConfig::default()),
            Err(IndexError::Provider(_))
        ));
        let llm = ScriptedChat::always(TWO_AND_ONE);
        let (g, rep) = build_graph(&chunks, &llm, &ExtractionConfig::default()).unwrap();
        assert_eq!((g.entity_count(), g.relation_count(), rep.chunks), (2, 1, 2));
    }
}
