//! `{name}` placeholder substitution shared by every prompt template.
//!
//! A placeholder is `{` followed by one or more of `[A-Za-z0-9_:-]` and a
//! closing `}`. Anything else, including JSON braces, is literal text.
//! Substitution is single-pass: text inserted for one placeholder is never
//! scanned for further placeholders.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template is missing placeholder {{{0}}}")]
    Missing(String),
    #[error("placeholder {{{0}}} appears more than once")]
    Repeated(String),
    #[error("placeholder {{{0}}} is not allowed here")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | ':' | '-')
}

fn parse(template: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut text_start = 0;
    let mut iter = template.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c != '{' {
            continue;
        }
        let rest = &template[i + 1..];
        let name_len: usize = rest
            .chars()
            .take_while(|&c| is_name_char(c))
            .map(char::len_utf8)
            .sum();
        if name_len > 0 && rest[name_len..].starts_with('}') {
            if text_start < i {
                pieces.push(Piece::Text(&template[text_start..i]));
            }
            pieces.push(Piece::Slot(&rest[..name_len]));
            text_start = i + 1 + name_len + 1;
            while iter.peek().is_some_and(|&(j, _)| j < text_start) {
                iter.next();
            }
        }
    }
    if text_start < template.len() {
        pieces.push(Piece::Text(&template[text_start..]));
    }
    pieces
}

/// Names of all placeholders in order of appearance (with repeats).
pub fn placeholders(template: &str) -> Vec<&str> {
    parse(template)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(name) => Some(name),
            Piece::Text(_) => None,
        })
        .collect()
}

/// Substitutes placeholders.
///
/// Every key in `required` must appear exactly once; keys in `optional` may
/// appear at most once. Any other placeholder is rejected.
pub fn render(
    template: &str,
    required: &[(&str, &str)],
    optional: &[(&str, &str)],
) -> Result<String, TemplateError> {
    let pieces = parse(template);
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for piece in &pieces {
        if let Piece::Slot(name) = piece {
            let known = required.iter().chain(optional).any(|(k, _)| k == name);
            if !known {
                return Err(TemplateError::Unknown((*name).to_string()));
            }
            let n = seen.entry(name).or_default();
            *n += 1;
            if *n > 1 {
                return Err(TemplateError::Repeated((*name).to_string()));
            }
        }
    }
    if let Some((k, _)) = required.iter().find(|(k, _)| !seen.contains_key(k)) {
        return Err(TemplateError::Missing((*k).to_string()));
    }
    let mut out = String::with_capacity(template.len());
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => {
                let value = required
                    .iter()
                    .chain(optional)
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .unwrap_or_default();
                out.push_str(value);
            }
        }
    }
    Ok(out)
}
