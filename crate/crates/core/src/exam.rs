//! Objective-question exams: answer extraction, modal voting over repeated
//! samples, and accuracy reports kept as exact fractions.
//!
//! Voting: each round asks the same prompt `votes_per_round` times. Parsed
//! answers are tallied (unparseable replies are kept in the record but not
//! counted). A unique most-frequent answer ends the vote; otherwise another
//! round runs, up to `max_rounds`. If the tie survives the last round, the
//! tied answer seen first wins and the record is flagged `forced_tiebreak`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::map_ordered;
use crate::providers::{ChatProvider, ChatRequest, ProviderError, DEFAULT_GENERATION_TEMPERATURE};
use crate::retrieve::Retriever;
use crate::template::{self, TemplateError};

pub const DEFAULT_VOTES_PER_ROUND: usize = 5;
pub const DEFAULT_MAX_ROUNDS: usize = 5;

/// Exact accuracy as a fraction in [0, 1].
pub type Accuracy = Ratio<u64>;

pub const DEFAULT_CHOICE_TEMPLATE: &str = "\
{context}Answer the following multiple-choice question on steel structure demolition.
Reply with the letter of the single correct option.

{question}
";

pub const DEFAULT_JUDGMENT_TEMPLATE: &str = "\
{context}Decide whether the following statement on steel structure demolition is true or false.
Reply with True or False.

{question}
";

const TRUE_WORDS: &[&str] = &["true", "correct", "right", "yes", "对", "正确", "✓", "√"];
const FALSE_WORDS: &[&str] = &[
    "false", "incorrect", "wrong", "no", "not true", "not correct", "错", "错误", "不正确", "不对", "×", "✗",
];

#[derive(Debug, Error)]
pub enum ExamError {
    #[error("question bank is empty")]
    EmptyBank,
    #[error("question {id}: {message}")]
    InvalidQuestion { id: String, message: String },
    #[error("duplicate question id {0}")]
    DuplicateId(String),
    #[error("at least two reports are needed for a comparison")]
    TooFewReports,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Choice,
    Judgment,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Choice => "choice",
            QuestionKind::Judgment => "judgment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOption {
    pub label: String,
    pub text: String,
}

/// A choice label or a true/false verdict.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Label(String),
    Verdict(bool),
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Label(l) => f.write_str(l),
            Answer::Verdict(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub kind: QuestionKind,
    pub stem: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<QuestionOption>,
    pub answer_key: Answer,
}

impl Question {
    pub fn choice(id: &str, stem: &str, options: &[(&str, &str)], key: &str) -> Self {
        Question {
            id: id.into(),
            kind: QuestionKind::Choice,
            stem: stem.into(),
            options: options
                .iter()
                .map(|(l, t)| QuestionOption {
                    label: l.to_string(),
                    text: t.to_string(),
                })
                .collect(),
            answer_key: Answer::Label(key.into()),
        }
    }

    pub fn judgment(id: &str, stem: &str, key: bool) -> Self {
        Question {
            id: id.into(),
            kind: QuestionKind::Judgment,
            stem: stem.into(),
            options: Vec::new(),
            answer_key: Answer::Verdict(key),
        }
    }

    pub fn validate(&self) -> Result<(), ExamError> {
        let bad = |m: &str| ExamError::InvalidQuestion {
            id: self.id.clone(),
            message: m.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id"));
        }
        if self.stem.trim().is_empty() {
            return Err(bad("empty stem"));
        }
        match (self.kind, &self.answer_key) {
            (QuestionKind::Choice, Answer::Label(key)) => {
                if !(2..=6).contains(&self.options.len()) {
                    return Err(bad("choice questions need 2 to 6 options"));
                }
                let mut seen = Vec::new();
                for o in &self.options {
                    let ok = o.label.len() == 1 && o.label.chars().all(|c| c.is_ascii_uppercase());
                    if !ok {
                        return Err(bad("option labels must be single letters A-Z"));
                    }
                    if seen.contains(&o.label) {
                        return Err(bad("duplicate option label"));
                    }
                    seen.push(o.label.clone());
                }
                if !seen.contains(key) {
                    return Err(bad("answer_key is not one of the option labels"));
                }
                Ok(())
            }
            (QuestionKind::Judgment, Answer::Verdict(_)) if self.options.is_empty() => Ok(()),
            (QuestionKind::Judgment, Answer::Verdict(_)) => Err(bad("judgment questions take no options")),
            _ => Err(bad("answer_key type does not match the question kind")),
        }
    }

    /// Stem followed by one `X. text` line per option.
    pub fn render(&self) -> String {
        let mut s = self.stem.trim().to_string();
        for o in &self.options {
            s.push_str(&format!("\n{}. {}", o.label, o.text));
        }
        s
    }
}

pub fn parse_bank(text: &str, source: &Path) -> Result<Vec<Question>, ExamError> {
    let mut out: Vec<Question> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(line).map_err(|e| ExamError::Format {
            path: source.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        q.validate()?;
        if out.iter().any(|p| p.id == q.id) {
            return Err(ExamError::DuplicateId(q.id));
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(ExamError::EmptyBank);
    }
    Ok(out)
}

pub fn load_bank(path: &Path) -> Result<Vec<Question>, ExamError> {
    let text = fs::read_to_string(path).map_err(|source| ExamError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_bank(&text, path)
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Byte offsets where `needle` occurs in `hay` with no ASCII word character
/// on either side. Comparison is exact; callers lowercase as needed.
fn bounded_matches<'a>(hay: &'a str, needle: &'a str) -> impl Iterator<Item = usize> + 'a {
    hay.match_indices(needle).map(|(i, _)| i).filter(move |&i| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        let ascii_needle = needle.chars().next().is_some_and(|c| c.is_ascii());
        !ascii_needle || (!before.is_some_and(is_word_char) && !after.is_some_and(is_word_char))
    })
}

fn extract_label(raw: &str, labels: &[&str]) -> Option<String> {
    let earliest = |hay: &str, fold: bool| {
        labels
            .iter()
            .filter_map(|l| {
                let needle = if fold { l.to_lowercase() } else { l.to_string() };
                let first = bounded_matches(hay, &needle).next();
                first.map(|i| (i, *l))
            })
            .min()
            .map(|(_, l)| l.to_string())
    };
    earliest(raw, false).or_else(|| earliest(&raw.to_lowercase(), true))
}

fn extract_verdict(raw: &str) -> Option<bool> {
    let hay = raw.to_lowercase();
    let mut best: Option<(usize, std::cmp::Reverse<usize>, bool)> = None;
    for (words, verdict) in [(TRUE_WORDS, true), (FALSE_WORDS, false)] {
        for w in words {
            if let Some(i) = bounded_matches(&hay, w).next() {
                let cand = (i, std::cmp::Reverse(w.len()), verdict);
                if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                    best = Some(cand);
                }
            }
        }
    }
    best.map(|b| b.2)
}

/// Parses a reply for `q`; `None` means unparseable.
///
/// Choice questions take the earliest standalone option letter, looking at
/// uppercase letters first so an article such as "a" does not shadow a later
/// "B". Judgment questions take the earliest true/false word, preferring the
/// longer word when two start at the same place ("not true" over "true").
pub fn extract_answer(raw: &str, q: &Question) -> Option<Answer> {
    match q.kind {
        QuestionKind::Choice => {
            let labels: Vec<&str> = q.options.iter().map(|o| o.label.as_str()).collect();
            extract_label(raw, &labels).map(Answer::Label)
        }
        QuestionKind::Judgment => extract_verdict(raw).map(Answer::Verdict),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub raw: String,
    pub parsed: Option<Answer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub question_id: String,
    pub rounds: Vec<Vec<Vote>>,
    pub final_answer: Option<Answer>,
    pub tie_rounds: usize,
    pub forced_tiebreak: bool,
}

impl VoteRecord {
    pub fn calls(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VotingConfig {
    pub votes_per_round: usize,
    pub max_rounds: usize,
    /// Tally across all rounds so far; when false each round is tallied alone.
    pub accumulate: bool,
    pub model: String,
    pub temperature: f64,
    pub choice_template: String,
    pub judgment_template: String,
    pub workers: usize,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig {
            votes_per_round: DEFAULT_VOTES_PER_ROUND,
            max_rounds: DEFAULT_MAX_ROUNDS,
            accumulate: true,
            model: String::new(),
            temperature: DEFAULT_GENERATION_TEMPERATURE,
            choice_template: DEFAULT_CHOICE_TEMPLATE.to_string(),
            judgment_template: DEFAULT_JUDGMENT_TEMPLATE.to_string(),
            workers: 1,
        }
    }
}

/// Counts in first-seen order.
fn tally<'a>(votes: impl Iterator<Item = &'a Vote>) -> Vec<(Answer, usize)> {
    let mut counts: Vec<(Answer, usize)> = Vec::new();
    for a in votes.filter_map(|v| v.parsed.as_ref()) {
        match counts.iter_mut().find(|(b, _)| b == a) {
            Some((_, n)) => *n += 1,
            None => counts.push((a.clone(), 1)),
        }
    }
    counts
}

/// The tied leaders in first-seen order.
fn leaders(counts: &[(Answer, usize)]) -> Vec<&Answer> {
    let top = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
    counts.iter().filter(|(_, n)| *n == top && top > 0).map(|(a, _)| a).collect()
}

/// A provider failure part-way through a vote.
#[derive(Debug)]
pub struct VoteAborted {
    pub record: VoteRecord,
    pub error: ProviderError,
}

/// Runs the voting protocol with a fully rendered `prompt`.
pub fn vote_on_prompt(
    q: &Question,
    prompt: &str,
    llm: &dyn ChatProvider,
    cfg: &VotingConfig,
) -> Result<VoteRecord, VoteAborted> {
    let mut record = VoteRecord {
        question_id: q.id.clone(),
        rounds: Vec::new(),
        final_answer: None,
        tie_rounds: 0,
        forced_tiebreak: false,
    };
    let req = ChatRequest::user(&cfg.model, prompt).with_temperature(cfg.temperature);
    let (per_round, max_rounds) = (cfg.votes_per_round.max(1), cfg.max_rounds.max(1));
    for round in 1..=max_rounds {
        let mut votes = Vec::with_capacity(per_round);
        for _ in 0..per_round {
            match llm.chat(&req) {
                Ok(raw) => {
                    let parsed = extract_answer(&raw, q);
                    votes.push(Vote { raw, parsed });
                }
                Err(error) => {
                    record.rounds.push(votes);
                    return Err(VoteAborted { record, error });
                }
            }
        }
        record.rounds.push(votes);
        let counts = if cfg.accumulate {
            tally(record.rounds.iter().flatten())
        } else {
            tally(record.rounds.last().into_iter().flatten())
        };
        match leaders(&counts).as_slice() {
            [unique] => {
                record.final_answer = Some((*unique).clone());
                return Ok(record);
            }
            tied if round == max_rounds => {
                record.final_answer = tied.first().map(|a| (*a).clone());
                record.forced_tiebreak = true;
            }
            _ => record.tie_rounds += 1,
        }
    }
    Ok(record)
}

/// Prompt for `q`, with `context` (possibly empty) placed before the task.
pub fn question_prompt(q: &Question, context: &str, cfg: &VotingConfig) -> Result<String, TemplateError> {
    let tpl = match q.kind {
        QuestionKind::Choice => &cfg.choice_template,
        QuestionKind::Judgment => &cfg.judgment_template,
    };
    let block = if context.trim().is_empty() {
        String::new()
    } else {
        format!("Reference material:\n{}\n\n", context.trim_end())
    };
    template::render(tpl, &[("question", &q.render())], &[("context", &block)])
}

pub fn answer_with_voting(q: &Question, llm: &dyn ChatProvider, cfg: &VotingConfig) -> Result<VoteRecord, VoteAborted> {
    let prompt = question_prompt(q, "", cfg).map_err(|e| VoteAborted {
        record: VoteRecord {
            question_id: q.id.clone(),
            rounds: Vec::new(),
            final_answer: None,
            tie_rounds: 0,
            forced_tiebreak: false,
        },
        error: ProviderError::InvalidInput(e.to_string()),
    })?;
    vote_on_prompt(q, &prompt, llm, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindScore {
    pub correct: u64,
    pub total: u64,
}

impl KindScore {
    pub fn accuracy(&self) -> Option<Accuracy> {
        (self.total > 0).then(|| Ratio::new(self.correct, self.total))
    }
}

/// Rounds `acc * 100` half-up to two decimals, as hundredths of a percent.
pub fn percent_hundredths(acc: Accuracy) -> u64 {
    let (n, d) = (*acc.numer() as u128, *acc.denom() as u128);
    ((2 * n * 10_000 + d) / (2 * d)) as u64
}

/// `acc` as a percentage with exactly two decimals, rounded half-up.
pub fn format_percent(acc: Accuracy) -> String {
    let h = percent_hundredths(acc);
    format!("{}.{:02}", h / 100, h % 100)
}

pub fn percent_value(acc: Accuracy) -> f64 {
    percent_hundredths(acc) as f64 / 100.0
}

/// Unweighted mean of exact fractions.
pub fn mean_accuracy(values: &[Accuracy]) -> Option<Accuracy> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(Ratio::zero(), |acc, v| acc + v);
    Some(sum / values.len() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub kind: QuestionKind,
    pub answer_key: Answer,
    pub correct: bool,
    pub record: VoteRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamAbort {
    pub question_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamReport {
    pub choice: KindScore,
    pub judgment: KindScore,
    pub results: Vec<QuestionResult>,
    /// Set when a failure stopped the exam. Unanswered questions still count
    /// toward the totals, as incorrect.
    pub aborted: Option<ExamAbort>,
}

impl ExamReport {
    /// Builds a report straight from counts, with no per-question records.
    pub fn from_counts(choice: KindScore, judgment: KindScore) -> Self {
        ExamReport {
            choice,
            judgment,
            results: Vec::new(),
            aborted: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }

    pub fn kind(&self, k: QuestionKind) -> KindScore {
        match k {
            QuestionKind::Choice => self.choice,
            QuestionKind::Judgment => self.judgment,
        }
    }

    /// Mean of the per-kind accuracies over kinds present in the bank.
    pub fn mean_of_kinds(&self) -> Option<Accuracy> {
        let per: Vec<_> = [self.choice, self.judgment].iter().filter_map(KindScore::accuracy).collect();
        mean_accuracy(&per)
    }

    /// Total correct over total questions.
    pub fn micro(&self) -> Option<Accuracy> {
        KindScore {
            correct: self.choice.correct + self.judgment.correct,
            total: self.choice.total + self.judgment.total,
        }
        .accuracy()
    }

    pub fn summary(&self) -> ExamSummary {
        let pct = |a: Option<Accuracy>| a.map(percent_value);
        ExamSummary {
            choice_correct: self.choice.correct,
            choice_total: self.choice.total,
            choice_accuracy: pct(self.choice.accuracy()),
            judgment_correct: self.judgment.correct,
            judgment_total: self.judgment.total,
            judgment_accuracy: pct(self.judgment.accuracy()),
            mean_of_kinds: pct(self.mean_of_kinds()),
            micro: pct(self.micro()),
            complete: self.is_complete(),
            forced_tiebreaks: self.results.iter().filter(|r| r.record.forced_tiebreak).count(),
        }
    }
}

/// Flat view of a report with percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamSummary {
    pub choice_correct: u64,
    pub choice_total: u64,
    pub choice_accuracy: Option<f64>,
    pub judgment_correct: u64,
    pub judgment_total: u64,
    pub judgment_accuracy: Option<f64>,
    pub mean_of_kinds: Option<f64>,
    pub micro: Option<f64>,
    pub complete: bool,
    pub forced_tiebreaks: usize,
}

fn cell(a: Option<Accuracy>) -> String {
    a.map(format_percent).unwrap_or_else(|| "-".into())
}

impl fmt::Display for ExamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>9} {:>9}", "", "correct", "accuracy")?;
        for k in [QuestionKind::Choice, QuestionKind::Judgment] {
            let s = self.kind(k);
            writeln!(f, "{:<16} {:>9} {:>9}", k.as_str(), format!("{}/{}", s.correct, s.total), cell(s.accuracy()))?;
        }
        writeln!(f, "{:<16} {:>9} {:>9}", "mean of kinds", "", cell(self.mean_of_kinds()))?;
        write!(f, "{:<16} {:>9} {:>9}", "micro", "", cell(self.micro()))?;
        if let Some(a) = &self.aborted {
            write!(f, "\nINCOMPLETE: stopped at {}: {}", a.question_id, a.message)?;
        }
        Ok(())
    }
}

/// Votes every question, optionally with retrieved context, and scores the
/// final answers against the keys.
pub fn run_exam(
    bank: &[Question],
    llm: &dyn ChatProvider,
    retriever: Option<&dyn Retriever>,
    cfg: &VotingConfig,
) -> Result<ExamReport, ExamError> {
    if bank.is_empty() {
        return Err(ExamError::EmptyBank);
    }
    for q in bank {
        q.validate()?;
        question_prompt(q, "", cfg)?;
    }
    let (records, failure) = map_ordered(bank, cfg.workers, |_, q| {
        let context = match retriever {
            Some(r) => r.context(&q.render()).map_err(|e| (None, e.to_string()))?.rendered,
            None => String::new(),
        };
        let prompt = question_prompt(q, &context, cfg).map_err(|e| (None, e.to_string()))?;
        vote_on_prompt(q, &prompt, llm, cfg).map_err(|a| (Some(a.record), a.error.to_string()))
    });

    let mut report = ExamReport::from_counts(KindScore::default(), KindScore::default());
    for q in bank {
        match q.kind {
            QuestionKind::Choice => report.choice.total += 1,
            QuestionKind::Judgment => report.judgment.total += 1,
        }
    }
    let mut finished: Vec<(VoteRecord, bool)> = records.into_iter().map(|r| (r, true)).collect();
    if let Some((i, (partial, message))) = failure {
        log::warn!("exam stopped at question {}: {message}", bank[i].id);
        report.aborted = Some(ExamAbort {
            question_id: bank[i].id.clone(),
            message,
        });
        if let Some(rec) = partial {
            finished.push((rec, false));
        }
    }
    for (q, (record, done)) in bank.iter().zip(finished) {
        let correct = done && record.final_answer.as_ref() == Some(&q.answer_key);
        if correct {
            match q.kind {
                QuestionKind::Choice => report.choice.correct += 1,
                QuestionKind::Judgment => report.judgment.correct += 1,
            }
        }
        report.results.push(QuestionResult {
            question_id: q.id.clone(),
            kind: q.kind,
            answer_key: q.answer_key.clone(),
            correct,
            record,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    MeanOfKinds,
    Micro,
}

/// Models as rows, configurations as columns, plus a column-mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    pub configs: Vec<String>,
    pub rows: Vec<(String, Vec<Option<Accuracy>>)>,
    pub means: Vec<Option<Accuracy>>,
}

/// One cell of a comparison: `model` evaluated under `config`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub model: String,
    pub config: String,
    pub accuracy: Option<Accuracy>,
}

/// Lays cells out in first-seen model and config order. Column means are
/// computed from the exact fractions and rounded only when displayed.
pub fn compare_cells(cells: &[Cell], metric: Metric) -> Result<Comparison, ExamError> {
    if cells.len() < 2 {
        return Err(ExamError::TooFewReports);
    }
    let mut configs: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    let mut grid: BTreeMap<(usize, usize), Option<Accuracy>> = BTreeMap::new();
    for c in cells {
        let ci = configs.iter().position(|x| *x == c.config).unwrap_or_else(|| {
            configs.push(c.config.clone());
            configs.len() - 1
        });
        let mi = models.iter().position(|x| *x == c.model).unwrap_or_else(|| {
            models.push(c.model.clone());
            models.len() - 1
        });
        grid.insert((mi, ci), c.accuracy);
    }
    let rows: Vec<(String, Vec<Option<Accuracy>>)> = models
        .iter()
        .enumerate()
        .map(|(mi, m)| (m.clone(), (0..configs.len()).map(|ci| grid.get(&(mi, ci)).copied().flatten()).collect()))
        .collect();
    let means = (0..configs.len())
        .map(|ci| {
            let col: Vec<Accuracy> = rows.iter().filter_map(|(_, v)| v[ci]).collect();
            mean_accuracy(&col)
        })
        .collect();
    Ok(Comparison {
        metric,
        configs,
        rows,
        means,
    })
}

/// Compares `(model, config, report)` triples under `metric`.
pub fn compare_reports(reports: &[(String, String, ExamReport)], metric: Metric) -> Result<Comparison, ExamError> {
    let cells: Vec<Cell> = reports
        .iter()
        .map(|(model, config, r)| Cell {
            model: model.clone(),
            config: config.clone(),
            accuracy: match metric {
                Metric::MeanOfKinds => r.mean_of_kinds(),
                Metric::Micro => r.micro(),
            },
        })
        .collect();
    compare_cells(&cells, metric)
}

impl Comparison {
    pub fn to_json(&self) -> serde_json::Value {
        let pct = |a: &Option<Accuracy>| a.map(percent_value);
        serde_json::json!({
            "metric": self.metric,
            "configs": self.configs,
            "rows": self.rows.iter().map(|(m, v)| serde_json::json!({
                "model": m,
                "values": v.iter().map(pct).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "average": self.means.iter().map(pct).collect::<Vec<_>>(),
        })
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.configs.iter().map(String::len).max().unwrap_or(0).max(8);
        let label = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(7);
        write!(f, "{:<label$}", "model")?;
        for c in &self.configs {
            write!(f, " {c:>width$}")?;
        }
        for (name, values) in self.rows.iter().map(|(m, v)| (m.as_str(), v)).chain([("average", &self.means)]) {
            write!(f, "\n{name:<label$}")?;
            for v in values {
                write!(f, " {:>width$}", cell(*v))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::MockFailure;
    use crate::providers::{ScriptEntry, ScriptedChat};

    fn abcd() -> Question {
        Question::choice("q1", "Which?", &[("A", "a"), ("B", "b"), ("C", "c"), ("D", "d")], "A")
    }

    fn label(s: &str) -> Option<Answer> {
        Some(Answer::Label(s.into()))
    }

    #[test]
    fn extraction_examples() {
        let q = abcd();
        let j = Question::judgment("j", "Steel is a metal.", true);
        assert_eq!(extract_answer("The answer is B.", &q), label("B"));
        assert_eq!(extract_answer("Correct, this statement is true.", &j), Some(Answer::Verdict(true)));
        assert_eq!(extract_answer("It depends.", &q), None);
        assert_eq!(extract_answer("It depends.", &j), None);
        assert_eq!(extract_answer("a good choice is c", &q), label("A"));
        assert_eq!(extract_answer("a good choice is C", &q), label("C"));
        assert_eq!(extract_answer("答案是D。", &q), label("D"));
        assert_eq!(extract_answer("(b)", &q), label("B"));
        assert_eq!(extract_answer("Option E", &q), None);
        assert_eq!(extract_answer("This is incorrect.", &j), Some(Answer::Verdict(false)));
        assert_eq!(extract_answer("Not true at all", &j), Some(Answer::Verdict(false)));
        assert_eq!(extract_answer("该说法不正确", &j), Some(Answer::Verdict(false)));
        assert_eq!(extract_answer("正确", &j), Some(Answer::Verdict(true)));
        assert_eq!(extract_answer("Truely", &j), None);
    }

    fn run(replies: &[&str], q: &Question) -> VoteRecord {
        answer_with_voting(q, &ScriptedChat::queue(replies.iter().copied()), &VotingConfig::default()).unwrap()
    }

    #[test]
    fn voting_examples() {
        let q = abcd();
        let r = run(&["A", "A", "B", "A", "C"], &q);
        assert_eq!((r.final_answer.clone(), r.rounds.len(), r.tie_rounds, r.forced_tiebreak), (label("A"), 1, 0, false));

        let r = run(&["A", "A", "B", "B", "C", "A", "C", "C", "B", "A"], &q);
        assert_eq!((r.final_answer.clone(), r.rounds.len(), r.tie_rounds), (label("A"), 2, 1));

        let llm = ScriptedChat::always("X");
        let r = answer_with_voting(&q, &llm, &VotingConfig::default()).unwrap();
        assert_eq!((r.final_answer.clone(), r.forced_tiebreak, r.calls()), (None, true, 25));
    }

    #[test]
    fn fresh_rounds_differ_from_accumulated() {
        let q = abcd();
        let replies = ["A", "A", "B", "B", "C", "B", "C", "C", "A", "A", "C", "C", "C", "A", "B"];
        let cfg = VotingConfig {
            accumulate: false,
            ..VotingConfig::default()
        };
        // Round two alone is an A/C tie, so a fresh tally needs round three.
        let fresh = answer_with_voting(&q, &ScriptedChat::queue(replies), &cfg).unwrap();
        assert_eq!((fresh.final_answer, fresh.rounds.len(), fresh.tie_rounds), (label("C"), 3, 2));
        let acc = run(&replies, &q);
        assert_eq!((acc.final_answer, acc.rounds.len()), (label("A"), 2));
    }

    #[test]
    fn voting_provider_failure_keeps_partial_record() {
        let llm = ScriptedChat::new(vec![
            ScriptEntry::reply("A"),
            ScriptEntry::reply("B"),
            ScriptEntry::fail(MockFailure::Transport),
        ])
        .unwrap();
        let err = answer_with_voting(&abcd(), &llm, &VotingConfig::default()).unwrap_err();
        assert_eq!(err.record.calls(), 2);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(Ratio::new(29, 30)), "96.67");
        assert_eq!(format_percent(Ratio::new(21, 30)), "70.00");
        assert_eq!(format_percent(Ratio::new(22, 30)), "73.33");
        assert_eq!(format_percent(Ratio::new(1, 8)), "12.50");
        assert_eq!(format_percent(Ratio::new(1, 1)), "100.00");
        assert_eq!(format_percent(Ratio::new(0, 1)), "0.00");
        // Exactly half a hundredth rounds up.
        assert_eq!(format_percent(Ratio::new(1, 80_000)), "0.00");
        assert_eq!(format_percent(Ratio::new(1, 20_000)), "0.01");
        let r = ExamReport::from_counts(KindScore { correct: 26, total: 30 }, KindScore { correct: 21, total: 30 });
        assert_eq!(format_percent(r.mean_of_kinds().unwrap()), "78.33");
        assert_eq!(format_percent(r.micro().unwrap()), "78.33");
    }

    #[test]
    fn run_exam_scores_and_flags_incomplete() {
        let bank = vec![abcd(), Question::judgment("j1", "S", false), Question::judgment("j2", "T", true)];
        let llm = ScriptedChat::new(vec![
            ScriptEntry::reply("A").when("Which?").sticky(),
            ScriptEntry::reply("False").when("\nS\n").sticky(),
            ScriptEntry::reply("False").when("\nT\n").sticky(),
        ])
        .unwrap();
        let r = run_exam(&bank, &llm, None, &VotingConfig::default()).unwrap();
        assert_eq!((r.choice, r.judgment), (KindScore { correct: 1, total: 1 }, KindScore { correct: 1, total: 2 }));
        assert!(r.is_complete());
        assert_eq!(format_percent(r.mean_of_kinds().unwrap()), "75.00");

        let dying = ScriptedChat::new(vec![ScriptEntry::reply("A").when("Which?").sticky()]).unwrap();
        let r = run_exam(&bank, &dying, None, &VotingConfig::default()).unwrap();
        assert!(!r.is_complete());
        assert_eq!(r.aborted.as_ref().unwrap().question_id, "j1");
        assert_eq!((r.choice.correct, r.judgment.total, r.results.len()), (1, 2, 2));
    }

    #[test]
    fn comparison_layout_and_means() {
        let cells: Vec<Cell> = [("m", "base", 47), ("m", "lora", 50), ("n", "base", 37)]
            .iter()
            .map(|(m, c, k)| Cell {
                model: m.to_string(),
                config: c.to_string(),
                accuracy: Some(Ratio::new(*k, 60)),
            })
            .collect();
        let t = compare_cells(&cells, Metric::MeanOfKinds).unwrap();
        assert_eq!(t.configs, ["base", "lora"]);
        assert_eq!(t.rows[1].1[1], None);
        assert_eq!(t.means, [Some(Ratio::new(42, 60)), Some(Ratio::new(50, 60))]);
        let text = t.to_string();
        assert!(text.lines().last().unwrap().starts_with("average"));
        assert!(text.contains("78.33") && text.contains("-"));
        assert!(matches!(compare_cells(&cells[..1], Metric::Micro), Err(ExamError::TooFewReports)));
    }

    #[test]
    fn bank_parsing() {
        let text = r#"{"id":"c1","kind":"choice","stem":"S","options":[{"label":"A","text":"x"},{"label":"B","text":"y"}],"answer_key":"B"}
{"id":"j1","kind":"judgment","stem":"T","answer_key":false}"#;
        let bank = parse_bank(text, Path::new("b")).unwrap();
        assert_eq!(bank[0].answer_key, Answer::Label("B".into()));
        assert_eq!(bank[1].answer_key, Answer::Verdict(false));
        let round = serde_json::to_string(&bank[1]).unwrap();
        assert_eq!(parse_bank(&round, Path::new("b")).unwrap()[0], bank[1]);
        for bad in [
            r#"{"id":"c","kind":"choice","stem":"S","options":[{"label":"A","text":"x"}],"answer_key":"A"}"#,
            r#"{"id":"c","kind":"choice","stem":"S","options":[{"label":"A","text":"x"},{"label":"B","text":"y"}],"answer_key":"C"}"#,
            r#"{"id":"c","kind":"judgment","stem":"S","answer_key":"A"}"#,
        ] {
            assert!(matches!(parse_bank(bad, Path::new("b")), Err(ExamError::InvalidQuestion { .. })));
        }
    }
}
