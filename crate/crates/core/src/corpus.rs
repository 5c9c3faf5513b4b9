//! Knowledge-base ingestion: loading documents, cleaning text, and cutting
//! cleaned text into overlapping character windows for embedding.
//!
//! Cleaning rules, applied in this order:
//!
//! 1. newline, carriage return and tab become spaces; every other control
//!    character (and zero-width/BOM characters) is removed
//! 2. characters on the strip-list become spaces
//! 3. HTML comments and tags (`<p>`, `</div>`, `<br/>`, `<a href=..>`) become spaces
//! 4. URLs (`http://`, `https://`, `ftp://`, `www.`) up to the next whitespace
//!    become spaces
//! 5. HTML character entities (`&nbsp;`, `&#39;`, `&#x4e00;`) become spaces
//! 6. whitespace runs collapse to one space; leading/trailing space is trimmed
//!
//! Every rule replaces a match with at most one character, so cleaning never
//! lengthens text, and a second pass finds nothing left to remove.
//! CJK punctuation is kept.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CHUNK_SIZE: usize = 800;
pub const DEFAULT_CHUNK_OVERLAP: usize = 200;
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Symbols removed by default: bullets, geometric shapes and OCR debris.
pub const DEFAULT_STRIP_LIST: &[char] = &[
    '\u{FFFD}', '•', '■', '□', '▪', '▫', '▲', '△', '▼', '▽', '◆', '◇', '●', '○', '◎', '★', '☆',
    '※', '¤',
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document {0} has no cleaned text")]
    EmptyDocument(String),
    #[error("invalid chunking parameters: size={size}, overlap={overlap}")]
    InvalidChunkParams { size: usize, overlap: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Manifest {
        file: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Standard,
    Scheme,
    ResearchPaper,
    Patent,
    Other,
}

impl DocumentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DocumentKind::Standard => "standard",
            DocumentKind::Scheme => "scheme",
            DocumentKind::ResearchPaper => "research_paper",
            DocumentKind::Patent => "patent",
            DocumentKind::Other => "other",
        }
    }
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DocumentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(DocumentKind::Standard),
            "scheme" => Ok(DocumentKind::Scheme),
            "research_paper" | "paper" => Ok(DocumentKind::ResearchPaper),
            "patent" => Ok(DocumentKind::Patent),
            "other" => Ok(DocumentKind::Other),
            other => Err(format!("unknown document kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub kind: DocumentKind,
    pub raw_text: String,
    /// Empty until [`Document::clean`] runs.
    #[serde(default)]
    pub cleaned_text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, kind: DocumentKind, raw_text: impl Into<String>) -> Self {
        let id = id.into();
        Document {
            title: id.clone(),
            id,
            kind,
            raw_text: raw_text.into(),
            cleaned_text: String::new(),
        }
    }

    pub fn clean(&mut self, rules: &CleanRules) {
        self.cleaned_text = rules.clean(&self.raw_text);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub seq: usize,
    pub text: String,
    /// Character (not byte) offsets into the document's cleaned text.
    pub char_start: usize,
    pub char_end: usize,
}

impl Chunk {
    /// Identifier used by the vector store: `doc_id#seq`.
    pub fn id(&self) -> String {
        chunk_id(&self.doc_id, self.seq)
    }
}

pub fn chunk_id(doc_id: &str, seq: usize) -> String {
    format!("{doc_id}#{seq}")
}

/// Configurable part of the cleaning rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanRules {
    pub strip_list: Vec<char>,
}

impl Default for CleanRules {
    fn default() -> Self {
        CleanRules {
            strip_list: DEFAULT_STRIP_LIST.to_vec(),
        }
    }
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)<!--.*?-->|</?[A-Za-z][A-Za-z0-9-]*(?:\s[^<>]*)?/?>").expect("tag regex")
    })
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(?:https?://|ftp://|www\.)\S+").expect("url regex")
    })
}

fn entity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"&(?:[A-Za-z][A-Za-z0-9]{1,31}|#[0-9]{1,7}|#[xX][0-9A-Fa-f]{1,6});").expect("entity regex"))
}

fn is_invisible(c: char) -> bool {
    matches!(c, '\u{200B}'..='\u{200D}' | '\u{2060}' | '\u{FEFF}')
}

impl CleanRules {
    pub fn clean(&self, raw: &str) -> String {
        let strip: HashSet<char> = self.strip_list.iter().copied().collect();
        let mut s = String::with_capacity(raw.len());
        for c in raw.chars() {
            if matches!(c, '\n' | '\r' | '\t') {
                s.push(' ');
            } else if c.is_control() || is_invisible(c) {
                continue;
            } else if strip.contains(&c) {
                s.push(' ');
            } else {
                s.push(c);
            }
        }
        // Removing one pattern can expose another, so repeat until stable.
        // Every match spans at least two characters and becomes one space.
        let mut s = s;
        loop {
            let next = entity_re()
                .replace_all(&url_re().replace_all(&tag_re().replace_all(&s, " "), " "), " ")
                .into_owned();
            if next == s {
                break;
            }
            s = next;
        }
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// True when `text` contains anything these rules would remove, apart
    /// from plain whitespace layout.
    pub fn has_violations(&self, text: &str) -> bool {
        text.chars().any(|c| {
            (c.is_control() && !matches!(c, '\n' | '\r' | '\t'))
                || is_invisible(c)
                || self.strip_list.contains(&c)
        }) || tag_re().is_match(text)
            || url_re().is_match(text)
            || entity_re().is_match(text)
    }
}

/// Cleans text with the default rules.
pub fn clean_text(raw: &str) -> String {
    CleanRules::default().clean(raw)
}

/// Splits the document's cleaned text into windows of `size` characters
/// advancing by `size - overlap`; the final window ends at the end of the text.
pub fn chunk_document(doc: &Document, size: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    if size == 0 || overlap >= size {
        return Err(CorpusError::InvalidChunkParams { size, overlap });
    }
    if doc.cleaned_text.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.id.clone()));
    }
    // Byte offset of every char boundary, plus the end.
    let bounds: Vec<usize> = doc
        .cleaned_text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(doc.cleaned_text.len()))
        .collect();
    let len = bounds.len() - 1;
    let stride = size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(len);
        chunks.push(Chunk {
            doc_id: doc.id.clone(),
            seq: chunks.len(),
            text: doc.cleaned_text[bounds[start]..bounds[end]].to_string(),
            char_start: start,
            char_end: end,
        });
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug)]
struct ManifestEntry {
    kind: DocumentKind,
    title: String,
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, ManifestEntry>, CorpusError> {
    let mut entries = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let err = |message: String| CorpusError::Manifest {
            file: MANIFEST_FILE.to_string(),
            line: idx + 1,
            message,
        };
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let name = fields[0].trim();
        if name.is_empty() {
            return Err(err("empty file name".into()));
        }
        let kind = fields[1].parse::<DocumentKind>().map_err(err)?;
        let title = fields[2].trim().to_string();
        if entries.insert(name.to_string(), ManifestEntry { kind, title }).is_some() {
            return Err(err(format!("duplicate entry for {name}")));
        }
    }
    Ok(entries)
}

fn is_text_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("txt" | "md" | "text")
    )
}

/// Loads every `.txt`/`.md`/`.text` file in `dir` (non-recursive, sorted by
/// file name). Document ids are file names. Kinds and titles come from an
/// optional `manifest.tsv`; files it does not mention default to `other`.
pub fn load_corpus(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        parse_manifest(&fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?)?
    } else {
        BTreeMap::new()
    };

    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && is_text_file(&path) {
            paths.push(path);
        }
    }
    paths.sort();

    let mut docs = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&name)
            .to_string();
        let (kind, title) = match manifest.remove(&name) {
            Some(e) => (e.kind, if e.title.is_empty() { stem } else { e.title }),
            None => (DocumentKind::Other, stem),
        };
        docs.push(Document {
            id: name,
            title,
            kind,
            raw_text: raw,
            cleaned_text: String::new(),
        });
    }
    if let Some(missing) = manifest.keys().next() {
        return Err(CorpusError::Manifest {
            file: MANIFEST_FILE.to_string(),
            line: 0,
            message: format!("manifest names {missing}, which is not a text file in the corpus"),
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        let mut d = Document::new("d", DocumentKind::Other, text);
        d.cleaned_text = text.to_string();
        d
    }

    #[test]
    fn clean_examples() {
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("<p>Demolition sequence</p>"), "Demolition sequence");
        assert_eq!(clean_text("see https://a.b/c for details"), "see for details");
        assert_eq!(clean_text("a\tb\nc\u{7}d"), "a b cd");
        assert_eq!(clean_text("x &nbsp; y&amp;z"), "x y z");
        assert_eq!(clean_text("拆除顺序：先次后主。"), "拆除顺序：先次后主。");
        assert_eq!(clean_text("● step ■ two"), "step two");
        assert_eq!(clean_text("a < b and c > d"), "a < b and c > d");
        assert_eq!(clean_text("<!-- note --> kept"), "kept");
    }

    #[test]
    fn strip_list_is_configurable() {
        let rules = CleanRules {
            strip_list: vec!['#'],
        };
        assert_eq!(rules.clean("a#b ●"), "a b ●");
    }

    #[test]
    fn violations_detected() {
        let rules = CleanRules::default();
        assert!(rules.has_violations("<b>x</b>"));
        assert!(rules.has_violations("go to www.example.com"));
        assert!(!rules.has_violations("plain text\nwith lines"));
    }

    #[test]
    fn chunk_examples() {
        let text: String = "abcdefghij".repeat(100);
        let spans: Vec<_> = chunk_document(&doc(&text), 400, 100)
            .unwrap()
            .iter()
            .map(|c| (c.char_start, c.char_end))
            .collect();
        assert_eq!(spans, vec![(0, 400), (300, 700), (600, 1000)]);

        let c = chunk_document(&doc(&"x".repeat(50)), 400, 100).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].char_start, c[0].char_end), (0, 50));

        let c = chunk_document(&doc(&"x".repeat(400)), 400, 100).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].char_start, c[0].char_end), (0, 400));
    }

    #[test]
    fn chunk_errors() {
        assert!(matches!(
            chunk_document(&doc(""), 10, 2),
            Err(CorpusError::EmptyDocument(_))
        ));
        assert!(matches!(
            chunk_document(&doc("abc"), 10, 10),
            Err(CorpusError::InvalidChunkParams { .. })
        ));
        assert!(matches!(
            chunk_document(&doc("abc"), 0, 0),
            Err(CorpusError::InvalidChunkParams { .. })
        ));
    }

    #[test]
    fn chunk_offsets_are_chars_not_bytes() {
        let chunks = chunk_document(&doc("钢结构拆除方案编制"), 4, 1).unwrap();
        assert_eq!(chunks[0].text, "钢结构拆");
        assert_eq!(chunks[1].text, "拆除方案");
        assert_eq!(chunks[1].char_start, 3);
        assert_eq!(chunks.last().unwrap().char_end, 9);
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("a.txt\tstandard\tGB 50755\n\n# c\nb.txt\tpatent\t\n").unwrap();
        assert_eq!(m["a.txt"].kind, DocumentKind::Standard);
        assert_eq!(m["b.txt"].title, "");
        let err = parse_manifest("a.txt\tbogus\tT").unwrap_err();
        assert!(err.to_string().starts_with("manifest.tsv:1:"), "{err}");
        assert!(parse_manifest("a.txt standard T").is_err());
    }

    fn adversarial() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just("<".to_string()),
                Just(">".to_string()),
                Just("/".to_string()),
                Just("p".to_string()),
                Just(" ".to_string()),
                Just("\n".to_string()),
                Just("\u{1}".to_string()),
                Just("●".to_string()),
                Just("http://".to_string()),
                Just("www.".to_string()),
                Just("&".to_string()),
                Just("amp".to_string()),
                Just(";".to_string()),
                Just("!--".to_string()),
                Just("拆".to_string()),
                Just("a".to_string()),
            ],
            0..40,
        )
        .prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn clean_is_idempotent_and_never_lengthens(s in prop_oneof![adversarial(), any::<String>()]) {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(once.chars().count() <= s.chars().count());
            prop_assert!(once.len() <= s.len());
            prop_assert!(!CleanRules::default().has_violations(&once));
        }

        #[test]
        fn chunks_reconstruct_text(
            text in "[a-z拆除 ]{1,300}",
            size in 1usize..60,
            overlap_frac in 0.0f64..1.0,
        ) {
            let overlap = ((size as f64) * overlap_frac) as usize;
            prop_assume!(overlap < size);
            let chunks = chunk_document(&doc(&text), size, overlap).unwrap();
            let len = text.chars().count();
            let stride = size - overlap;
            let expected = len.saturating_sub(size).div_ceil(stride) + 1;
            prop_assert_eq!(chunks.len(), expected);

            let mut rebuilt = chunks[0].text.clone();
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.seq, i);
                prop_assert_eq!(c.char_end - c.char_start, c.text.chars().count());
                if i > 0 {
                    prop_assert_eq!(c.char_start, chunks[i - 1].char_end - overlap);
                    rebuilt.extend(c.text.chars().skip(overlap));
                }
            }
            prop_assert_eq!(chunks.last().unwrap().char_end, len);
            prop_assert_eq!(rebuilt, text);
        }
    }
}
