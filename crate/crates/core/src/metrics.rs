//! BLEU-N and ROUGE-N from n-gram counts.
//!
//! ```text
//! BLEU-N  = BP · exp(Σ_{n=1..N} w_n · ln p_n)
//! BP      = 1                 if r < c
//!           e^(1 − r/c)       if r ≥ c
//! ROUGE-N = Σ_g min(count_ref(g), count_cand(g)) / Σ_g count_ref(g)
//! ```
//!
//! `p_n` is clipped n-gram precision: each candidate n-gram counts at most as
//! often as it occurs in the reference where it is most frequent. `c` is the
//! candidate length and `r` the reference length closest to `c` (shorter on
//! ties). When some `p_n` is zero the logarithm is undefined and the score is
//! 0 unless smoothing is enabled; the score records which case applied.
//!
//! The scoring core is generic over any ordered token type; the
//! [`TokenSequence`] wrappers cover text.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("candidate has no tokens")]
    EmptyCandidate,
    #[error("no reference given")]
    NoReferences,
    #[error("brevity penalty undefined for an empty candidate")]
    UndefinedBp,
    #[error("reference has {len} tokens, fewer than n={n}")]
    ReferenceTooShort { len: usize, n: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no pair could be scored")]
    NoScorablePairs,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// Lowercase; split on whitespace and punctuation; each CJK character is
    /// its own token.
    #[default]
    Word,
    /// Every non-whitespace character is a token.
    Char,
}

impl std::str::FromStr for TokenizerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(TokenizerMode::Word),
            "char" => Ok(TokenizerMode::Char),
            other => Err(format!("unknown tokenizer mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source_text: String,
    pub mode: TokenizerMode,
}

impl TokenSequence {
    /// Wraps pre-split tokens; the source text is the tokens joined by spaces.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        TokenSequence {
            source_text: tokens.join(" "),
            tokens,
            mode: TokenizerMode::Word,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Han ideographs (with extensions and compatibility block) and kana.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

pub fn tokenize(text: &str, mode: TokenizerMode) -> TokenSequence {
    let mut tokens = Vec::new();
    match mode {
        TokenizerMode::Char => {
            tokens.extend(text.chars().filter(|c| !c.is_whitespace()).map(String::from));
        }
        TokenizerMode::Word => {
            let mut word = String::new();
            for c in text.chars() {
                if is_cjk(c) {
                    if !word.is_empty() {
                        tokens.push(std::mem::take(&mut word));
                    }
                    tokens.push(c.to_string());
                } else if c.is_alphanumeric() {
                    word.extend(c.to_lowercase());
                } else if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
            }
            if !word.is_empty() {
                tokens.push(word);
            }
        }
    }
    TokenSequence {
        tokens,
        source_text: text.to_string(),
        mode,
    }
}

/// Distinct n-grams of orders `1..=max_n`, each order sorted, with counts.
#[derive(Debug, Clone)]
pub struct NgramTable<'a, T> {
    len: usize,
    orders: Vec<Vec<(&'a [T], u32)>>,
}

impl<'a, T: Ord> NgramTable<'a, T> {
    pub fn new(tokens: &'a [T], max_n: usize) -> Self {
        let orders = (1..=max_n)
            .map(|n| {
                let mut grams: Vec<&'a [T]> = if tokens.len() >= n {
                    tokens.windows(n).collect()
                } else {
                    Vec::new()
                };
                grams.sort_unstable();
                let mut counted: Vec<(&'a [T], u32)> = Vec::with_capacity(grams.len());
                for g in grams {
                    match counted.last_mut() {
                        Some((last, c)) if *last == g => *c += 1,
                        _ => counted.push((g, 1)),
                    }
                }
                counted
            })
            .collect();
        NgramTable {
            len: tokens.len(),
            orders,
        }
    }

    /// Sequence length in tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_order(&self) -> usize {
        self.orders.len()
    }

    /// Number of n-gram positions (with multiplicity).
    pub fn total(&self, n: usize) -> usize {
        if n == 0 || self.len < n {
            0
        } else {
            self.len - n + 1
        }
    }

    pub fn grams(&self, n: usize) -> &[(&'a [T], u32)] {
        &self.orders[n - 1]
    }
}

/// Σ_g min(a(g), b(g)) over two sorted count lists.
fn clipped_overlap<T: Ord>(a: &[(&[T], u32)], b: &[(&[T], u32)]) -> usize {
    let (mut i, mut j, mut total) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                total += a[i].1.min(b[j].1) as usize;
                i += 1;
                j += 1;
            }
        }
    }
    total
}

/// Candidate n-gram matches clipped by the per-n-gram maximum over references.
fn clipped_matches<T: Ord>(cand: &[(&[T], u32)], refs: &[&[(&[T], u32)]]) -> usize {
    let mut max_ref = vec![0u32; cand.len()];
    for r in refs {
        let (mut i, mut j) = (0, 0);
        while i < cand.len() && j < r.len() {
            match cand[i].0.cmp(r[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    max_ref[i] = max_ref[i].max(r[j].1);
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    cand.iter()
        .zip(&max_ref)
        .map(|((_, c), m)| (*c).min(*m) as usize)
        .sum()
}

/// Piecewise brevity penalty for candidate length `c` and reference length `r`.
pub fn brevity_penalty(c: usize, r: usize) -> Result<f64, MetricsError> {
    if r < c {
        Ok(1.0)
    } else if c == 0 {
        Err(MetricsError::UndefinedBp)
    } else {
        Ok((1.0 - r as f64 / c as f64).exp())
    }
}

/// Reference length closest to `c`; the shorter one on ties.
pub fn closest_ref_len(c: usize, ref_lens: impl IntoIterator<Item = usize>) -> Option<usize> {
    ref_lens
        .into_iter()
        .min_by_key(|&r| (r.abs_diff(c), r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub n: usize,
    /// Defaults to uniform `1/n`.
    pub weights: Option<Vec<f64>>,
    /// When set, a zero match count at order n becomes `epsilon / total_n`
    /// instead of forcing the score to zero.
    pub smoothing_epsilon: Option<f64>,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig::order(4)
    }
}

impl BleuConfig {
    pub fn order(n: usize) -> Self {
        BleuConfig {
            n,
            weights: None,
            smoothing_epsilon: None,
        }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::InvalidConfig("N must be at least 1".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.n {
                return Err(MetricsError::InvalidConfig(format!(
                    "{} weights given for N={}",
                    w.len(),
                    self.n
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(MetricsError::InvalidConfig(
                    "weights must be non-negative and sum to 1".into(),
                ));
            }
        }
        if let Some(eps) = self.smoothing_epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(MetricsError::InvalidConfig("smoothing epsilon must be positive".into()));
            }
        }
        Ok(())
    }

    /// Weight of order `n` (1-based); uniform unless given.
    pub fn weight(&self, n: usize) -> f64 {
        match &self.weights {
            Some(w) => w[n - 1],
            None => 1.0 / self.n as f64,
        }
    }
}

/// Clipped precision at one n-gram order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderPrecision {
    pub matches: usize,
    pub total: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    /// Orders `1..=n`.
    pub orders: Vec<OrderPrecision>,
    pub brevity_penalty: f64,
    pub n: usize,
    pub candidate_len: usize,
    pub reference_len: usize,
    /// Set when some unsmoothed `p_n` was zero and the score was forced to 0.
    pub zero_precision: bool,
}

impl BleuScore {
    pub fn precisions(&self) -> Vec<f64> {
        self.orders.iter().map(|o| o.precision).collect()
    }
}

/// BLEU from precomputed n-gram tables (each built with `max_n >= cfg.n`).
pub fn bleu_tables<T: Ord>(
    candidate: &NgramTable<'_, T>,
    references: &[&NgramTable<'_, T>],
    cfg: &BleuConfig,
) -> Result<BleuScore, MetricsError> {
    cfg.validate()?;
    if candidate.is_empty() {
        return Err(MetricsError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    if candidate.max_order() < cfg.n || references.iter().any(|r| r.max_order() < cfg.n) {
        return Err(MetricsError::InvalidConfig("n-gram table built for a lower order".into()));
    }
    let c = candidate.len();
    let r = closest_ref_len(c, references.iter().map(|t| t.len())).expect("non-empty");
    let bp = brevity_penalty(c, r)?;

    let mut orders = Vec::with_capacity(cfg.n);
    let mut zero = false;
    let mut log_sum = 0.0;
    for n in 1..=cfg.n {
        let m = match references {
            [one] => clipped_overlap(candidate.grams(n), one.grams(n)),
            _ => {
                let ref_grams: Vec<_> = references.iter().map(|t| t.grams(n)).collect();
                clipped_matches(candidate.grams(n), &ref_grams)
            }
        };
        let total = candidate.total(n);
        let p = match (m, total, cfg.smoothing_epsilon) {
            (_, 0, _) => 0.0,
            (0, t, Some(eps)) => eps / t as f64,
            (m, t, _) => m as f64 / t as f64,
        };
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += cfg.weight(n) * p.ln();
        }
        orders.push(OrderPrecision {
            matches: m,
            total,
            precision: p,
        });
    }
    let value = if zero { 0.0 } else { bp * log_sum.exp() };
    Ok(BleuScore {
        value,
        orders,
        brevity_penalty: bp,
        n: cfg.n,
        candidate_len: c,
        reference_len: r,
        zero_precision: zero,
    })
}

pub fn bleu_tokens<T: Ord>(
    candidate: &[T],
    references: &[&[T]],
    cfg: &BleuConfig,
) -> Result<BleuScore, MetricsError> {
    let cand = NgramTable::new(candidate, cfg.n);
    let refs: Vec<_> = references.iter().map(|r| NgramTable::new(*r, cfg.n)).collect();
    let refs: Vec<_> = refs.iter().collect();
    bleu_tables(&cand, &refs, cfg)
}

pub fn bleu(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    cfg: &BleuConfig,
) -> Result<BleuScore, MetricsError> {
    let refs: Vec<&[String]> = references.iter().map(|r| r.tokens.as_slice()).collect();
    bleu_tokens(&candidate.tokens, &refs, cfg)
}

/// ROUGE-N recall against a single reference, from precomputed tables.
pub fn rouge_n_tables<T: Ord>(
    candidate: &NgramTable<'_, T>,
    reference: &NgramTable<'_, T>,
    n: usize,
) -> Result<f64, MetricsError> {
    if n == 0 || candidate.max_order() < n || reference.max_order() < n {
        return Err(MetricsError::InvalidConfig(format!("unusable n={n}")));
    }
    if reference.len() < n {
        return Err(MetricsError::ReferenceTooShort {
            len: reference.len(),
            n,
        });
    }
    let matched = clipped_overlap(reference.grams(n), candidate.grams(n));
    Ok(matched as f64 / reference.total(n) as f64)
}

pub fn rouge_n_tokens<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> Result<f64, MetricsError> {
    rouge_n_tables(&NgramTable::new(candidate, n), &NgramTable::new(reference, n), n)
}

pub fn rouge_n(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> Result<f64, MetricsError> {
    rouge_n_tokens(&candidate.tokens, &reference.tokens, n)
}

/// Fraction in [0, 1] to a percentage rounded half-up to two decimals.
pub fn percent2(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub index: usize,
    pub reason: String,
}

/// Corpus means of per-pair BLEU-N, ROUGE-1 and ROUGE-2, as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub bleu_n: usize,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub pairs: usize,
    pub skipped: Vec<SkippedPair>,
}

/// JSON shape of a [`CorpusReport`], values in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReportPercent {
    pub bleu_n: usize,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub pairs: usize,
    pub skipped: usize,
}

impl CorpusReport {
    pub fn percentages(&self) -> CorpusReportPercent {
        CorpusReportPercent {
            bleu_n: self.bleu_n,
            bleu: percent2(self.bleu),
            rouge1: percent2(self.rouge1),
            rouge2: percent2(self.rouge2),
            pairs: self.pairs,
            skipped: self.skipped.len(),
        }
    }
}

impl fmt::Display for CorpusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.percentages();
        let bleu_head = format!("BLEU-{} / %", self.bleu_n);
        writeln!(f, "{bleu_head:<12} {:<12} {:<12} pairs", "ROUGE-1 / %", "ROUGE-2 / %")?;
        write!(
            f,
            "{:<12.2} {:<12.2} {:<12.2} {}",
            p.bleu, p.rouge1, p.rouge2, self.pairs
        )?;
        if !self.skipped.is_empty() {
            write!(f, " ({} skipped)", self.skipped.len())?;
        }
        Ok(())
    }
}

/// Scores every (candidate, reference) pair; pairs that cannot be scored are
/// skipped with a warning and left out of the means.
pub fn evaluate_corpus(
    pairs: &[(TokenSequence, TokenSequence)],
    cfg: &BleuConfig,
) -> Result<CorpusReport, MetricsError> {
    cfg.validate()?;
    let max_n = cfg.n.max(2);
    let (mut sb, mut s1, mut s2, mut used) = (0.0, 0.0, 0.0, 0usize);
    let mut skipped = Vec::new();
    for (index, (cand, reference)) in pairs.iter().enumerate() {
        let ct = NgramTable::new(cand.tokens.as_slice(), max_n);
        let rt = NgramTable::new(reference.tokens.as_slice(), max_n);
        let scored = bleu_tables(&ct, &[&rt], cfg).and_then(|b| {
            Ok((b.value, rouge_n_tables(&ct, &rt, 1)?, rouge_n_tables(&ct, &rt, 2)?))
        });
        match scored {
            Ok((b, r1, r2)) => {
                sb += b;
                s1 += r1;
                s2 += r2;
                used += 1;
            }
            Err(e) => {
                log::warn!("pair {index} skipped: {e}");
                skipped.push(SkippedPair {
                    index,
                    reason: e.to_string(),
                });
            }
        }
    }
    if used == 0 {
        return Err(MetricsError::NoScorablePairs);
    }
    let n = used as f64;
    Ok(CorpusReport {
        bleu_n: cfg.n,
        bleu: sb / n,
        rouge1: s1 / n,
        rouge2: s2 / n,
        pairs: used,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(words: &[&str]) -> TokenSequence {
        TokenSequence::from_tokens(words)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat sat.", TokenizerMode::Word).tokens, ["the", "cat", "sat"]);
        assert_eq!(tokenize("拆除结构", TokenizerMode::Word).tokens, ["拆", "除", "结", "构"]);
        assert!(tokenize("", TokenizerMode::Word).is_empty());
        assert_eq!(
            tokenize("Q235钢，grade-2 beam", TokenizerMode::Word).tokens,
            ["q235", "钢", "grade", "2", "beam"]
        );
        assert_eq!(tokenize("a b,c", TokenizerMode::Char).tokens, ["a", "b", ",", "c"]);
    }

    #[test]
    fn brevity_penalty_branches() {
        assert_eq!(brevity_penalty(5, 3).unwrap(), 1.0);
        assert!((brevity_penalty(2, 3).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(brevity_penalty(4, 4).unwrap(), 1.0);
        assert_eq!(brevity_penalty(0, 0), Err(MetricsError::UndefinedBp));
        assert_eq!(brevity_penalty(0, 3), Err(MetricsError::UndefinedBp));
    }

    #[test]
    fn bleu_examples() {
        let s = seq(&["the", "cat", "sat", "on", "mat"]);
        for n in 1..=5 {
            let b = bleu(&s, &[s.clone()], &BleuConfig::order(n)).unwrap();
            assert_eq!(b.value, 1.0);
            assert_eq!(b.brevity_penalty, 1.0);
            assert!(b.orders.iter().all(|o| o.precision == 1.0));
        }

        let b = bleu(&seq(&["the", "cat"]), &[seq(&["the", "cat", "sat"])], &BleuConfig::order(2)).unwrap();
        assert_eq!(b.precisions(), vec![1.0, 1.0]);
        assert_eq!(b.value, (-0.5f64).exp());

        let b = bleu(
            &seq(&["the", "the", "the", "the"]),
            &[seq(&["the", "cat"])],
            &BleuConfig::order(4),
        )
        .unwrap();
        assert_eq!(b.orders[0].precision, 0.25);
        assert_eq!(b.orders[1].precision, 0.0);
        assert_eq!(b.value, 0.0);
        assert!(b.zero_precision);
    }

    #[test]
    fn bleu_smoothing_and_errors() {
        let cfg = BleuConfig {
            n: 2,
            weights: None,
            smoothing_epsilon: Some(0.1),
        };
        let b = bleu(&seq(&["a", "b"]), &[seq(&["a", "c"])], &cfg).unwrap();
        assert!(b.value > 0.0 && !b.zero_precision);
        assert_eq!(b.precisions(), vec![0.5, 0.1]);

        assert_eq!(
            bleu(&seq(&[]), &[seq(&["a"])], &BleuConfig::order(1)),
            Err(MetricsError::EmptyCandidate)
        );
        assert_eq!(
            bleu(&seq(&["a"]), &[], &BleuConfig::order(1)),
            Err(MetricsError::NoReferences)
        );
        let bad = BleuConfig {
            n: 2,
            weights: Some(vec![0.7, 0.7]),
            smoothing_epsilon: None,
        };
        assert!(matches!(
            bleu(&seq(&["a"]), &[seq(&["a"])], &bad),
            Err(MetricsError::InvalidConfig(_))
        ));
    }

    #[test]
    fn bleu_multi_reference_clipping_and_length() {
        // "the" clipped to 2 by the second reference; closest length 3 vs 5 → 3.
        let cand = seq(&["the", "the", "the", "cat"]);
        let refs = [seq(&["the", "cat", "x"]), seq(&["the", "the", "a", "b", "c"])];
        let b = bleu(&cand, &refs, &BleuConfig::order(1)).unwrap();
        assert_eq!(b.orders[0].matches, 3);
        assert_eq!(b.reference_len, 3);
        assert_eq!(closest_ref_len(4, [3, 5]), Some(3));
        assert_eq!(closest_ref_len(4, [5, 3]), Some(3));
    }

    #[test]
    fn rouge_examples() {
        let c = seq(&["the", "cat", "sat"]);
        let r = seq(&["the", "cat", "sat", "on", "mat"]);
        assert_eq!(rouge_n(&r, &r, 1).unwrap(), 1.0);
        assert_eq!(rouge_n(&c, &r, 1).unwrap(), 0.6);
        assert_eq!(rouge_n(&c, &r, 2).unwrap(), 0.5);
        assert_eq!(
            rouge_n(&c, &seq(&["x"]), 2),
            Err(MetricsError::ReferenceTooShort { len: 1, n: 2 })
        );
        assert_eq!(rouge_n(&seq(&[]), &r, 1).unwrap(), 0.0);
    }

    #[test]
    fn corpus_report() {
        let same = (seq(&["a", "b", "c", "d"]), seq(&["a", "b", "c", "d"]));
        let rep = evaluate_corpus(&[same.clone(), same], &BleuConfig::default()).unwrap();
        let p = rep.percentages();
        assert_eq!((p.bleu, p.rouge1, p.rouge2), (100.0, 100.0, 100.0));

        let hand = (seq(&["the", "cat"]), seq(&["the", "cat", "sat"]));
        let rep = evaluate_corpus(&[hand], &BleuConfig::order(2)).unwrap();
        assert_eq!(rep.bleu, (-0.5f64).exp());
        assert_eq!(rep.percentages().bleu, 60.65);
        assert_eq!(rep.percentages().rouge1, 66.67);
        assert_eq!(rep.percentages().rouge2, 50.0);

        assert_eq!(evaluate_corpus(&[], &BleuConfig::default()), Err(MetricsError::NoScorablePairs));

        let bad = (seq(&[]), seq(&["a", "b"]));
        let good = (seq(&["a", "b"]), seq(&["a", "b"]));
        let rep = evaluate_corpus(&[bad, good], &BleuConfig::order(2)).unwrap();
        assert_eq!(rep.pairs, 1);
        assert_eq!(rep.skipped[0].index, 0);
        assert!(rep.to_string().contains("BLEU-2 / %"));
    }
}
