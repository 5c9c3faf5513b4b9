//! Five-role proposal pipeline: analysis, demolition, inspection,
//! integration and response run once each, in that order, every role seeing
//! the structure precondition and the outputs of the roles it declares as
//! inputs. Roles marked `uses_rag` also get retrieved context.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{ChatProvider, ChatRequest, ProviderError, DEFAULT_GENERATION_TEMPERATURE};
use crate::retrieve::{ContextBundle, Retriever};
use crate::template::{self, TemplateError};

pub const PERSONA: &str = "You are a steel structure demolition expert.";

#[derive(Debug, Error)]
pub enum CollabError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("role {role} needs the output of {missing}, which is not available")]
    MissingUpstream { role: Role, missing: Role },
    #[error("invalid role set: {0}")]
    InvalidRoles(String),
    #[error("custom scenario needs a non-empty body")]
    EmptyBody,
    #[error("role {role}: {source}")]
    Template {
        role: Role,
        #[source]
        source: TemplateError,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("role {role} failed: {source}")]
    Provider {
        role: Role,
        #[source]
        source: ProviderError,
        /// Everything recorded before the failing role.
        partial: Box<ProposalBundle>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Analysis,
    Demolition,
    Inspection,
    Integration,
    Response,
}

impl Role {
    /// Pipeline order.
    pub const ORDER: [Role; 5] = [Role::Analysis, Role::Demolition, Role::Inspection, Role::Integration, Role::Response];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Analysis => "analysis",
            Role::Demolition => "demolition",
            Role::Inspection => "inspection",
            Role::Integration => "integration",
            Role::Response => "response",
        }
    }

    pub fn position(self) -> usize {
        Role::ORDER.iter().position(|r| *r == self).expect("role in order")
    }

    pub fn placeholder(self) -> String {
        format!("out:{}", self.as_str())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ORDER
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Overview,
    Scale,
    FemUpdate,
    FemAnalysis,
    Monitoring,
}

/// Header keywords per section, longest first within each language.
const SECTION_KEYWORDS: &[(Section, &[&str])] = &[
    (
        Section::FemUpdate,
        &[
            "finite element model updating",
            "finite element model update",
            "finite element updating",
            "finite element update",
            "fe model updating",
            "model updating",
            "model update",
            "有限元模型修正",
            "模型修正",
        ],
    ),
    (Section::FemAnalysis, &["finite element analysis", "fe analysis", "有限元分析"]),
    (Section::Overview, &["engineering overview", "project overview", "overview", "工程概况", "概况"]),
    (Section::Scale, &["structural scale", "structure scale", "scale", "结构规模", "规模"]),
    (Section::Monitoring, &["structural monitoring", "monitoring", "结构监测", "监测"]),
];

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let mut kws: Vec<&str> = SECTION_KEYWORDS.iter().flat_map(|(_, k)| k.iter().copied()).collect();
        kws.sort_by_key(|k| std::cmp::Reverse(k.chars().count()));
        let alt = kws.iter().map(|k| regex::escape(k)).collect::<Vec<_>>().join("|");
        // Either "keyword[ results]:" anywhere, or a line holding only the keyword.
        Regex::new(&format!(
            r"(?im)(?P<inline>(?:{alt})(?:\s+results?|\s+content|结果)?\s*[:：])|^(?P<line>[ \t#*\-\d.()（）①-⑩]*(?:{alt})(?:\s+results?|结果)?[ \t*#]*)$"
        ))
        .expect("header regex")
    })
}

fn section_of(header: &str) -> Option<Section> {
    let h = header.to_lowercase();
    let mut best: Option<(usize, Section)> = None;
    for (section, kws) in SECTION_KEYWORDS {
        for k in *kws {
            if h.contains(k) && best.is_none_or(|(len, _)| k.len() > len) {
                best = Some((k.len(), *section));
            }
        }
    }
    best.map(|(_, s)| s)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructurePrecondition {
    pub overview: String,
    pub scale: String,
    pub fem_update: String,
    pub fem_analysis: String,
    pub monitoring: String,
    pub raw: String,
}

impl StructurePrecondition {
    pub fn section(&self, s: Section) -> &str {
        match s {
            Section::Overview => &self.overview,
            Section::Scale => &self.scale,
            Section::FemUpdate => &self.fem_update,
            Section::FemAnalysis => &self.fem_analysis,
            Section::Monitoring => &self.monitoring,
        }
    }

    fn section_mut(&mut self, s: Section) -> &mut String {
        match s {
            Section::Overview => &mut self.overview,
            Section::Scale => &mut self.scale,
            Section::FemUpdate => &mut self.fem_update,
            Section::FemAnalysis => &mut self.fem_analysis,
            Section::Monitoring => &mut self.monitoring,
        }
    }
}

/// Splits precondition text at recognised section headers.
///
/// A header is a keyword followed by a colon (optionally with "results" in
/// between), or a line holding nothing but a keyword. Each section is the
/// trimmed text up to the next header, so it appears verbatim in `raw`.
/// Only the first header of each section counts; repeats stay in the body of
/// whatever section they fall in. Text before the first header goes to
/// `overview` unless an overview header exists. With no headers at all,
/// `overview` holds the whole text.
pub fn parse_precondition(text: &str) -> Result<StructurePrecondition, CollabError> {
    if text.trim().is_empty() {
        return Err(CollabError::EmptyInput);
    }
    let mut headers: Vec<(usize, usize, Section)> = Vec::new();
    for caps in header_regex().captures_iter(text) {
        let m = caps.name("inline").or_else(|| caps.name("line")).expect("one branch matches");
        if let Some(s) = section_of(m.as_str()) {
            if headers.iter().all(|(_, _, seen)| *seen != s) {
                headers.push((m.start(), m.end(), s));
            }
        }
    }
    let mut pre = StructurePrecondition {
        raw: text.to_string(),
        ..StructurePrecondition::default()
    };
    if headers.is_empty() {
        pre.overview = text.trim().to_string();
        return Ok(pre);
    }
    let preamble = text[..headers[0].0].trim();
    if headers.iter().all(|(_, _, s)| *s != Section::Overview) {
        pre.overview = preamble.to_string();
    }
    for (i, &(_, end, s)) in headers.iter().enumerate() {
        let stop = headers.get(i + 1).map_or(text.len(), |h| h.0);
        *pre.section_mut(s) = text[end..stop].trim().to_string();
    }
    Ok(pre)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub role: Role,
    pub prompt_template: String,
    pub uses_rag: bool,
    pub inputs: Vec<Role>,
    /// Appended to the precondition to form this role's retrieval query.
    pub task: String,
    /// Overrides the pipeline's chat model for this role.
    pub model: Option<String>,
}

const ANALYSIS_TEMPLATE: &str = "\
{context}You are the analysis engineer on a steel structure demolition team.
Study the structure precondition below and identify every problem that could arise while demolishing this structure: load redistribution, member instability, support failure, construction safety and environmental risks. Explain why each problem matters.

Structure precondition:
{precondition}
";

const DEMOLITION_TEMPLATE: &str = "\
{context}You are the demolition engineer on a steel structure demolition team.
For each problem raised by the analysis engineer, propose a concrete solution: demolition sequence, temporary supports, lifting and cutting methods, and equipment.

Structure precondition:
{precondition}

Problems raised by the analysis engineer:
{out:analysis}
";

const INSPECTION_TEMPLATE: &str = "\
{context}You are the inspection engineer on a steel structure demolition team.
Check the problems raised by the analysis engineer and the solutions proposed by the demolition engineer against the precondition. Confirm or correct each one, and point out any new problem a proposed solution would introduce, with a way to resolve it.

Structure precondition:
{precondition}

Problems raised by the analysis engineer:
{out:analysis}

Solutions proposed by the demolition engineer:
{out:demolition}
";

const INTEGRATION_TEMPLATE: &str = "\
{context}You are the integration engineer on a steel structure demolition team.
Merge the three reports below into one consistent list of problems and measures. Where two items say the same thing in different words, keep one. Resolve contradictions in favour of the inspection report.

Structure precondition:
{precondition}

Analysis report:
{out:analysis}

Demolition report:
{out:demolition}

Inspection report:
{out:inspection}
";

const RESPONSE_TEMPLATE: &str = "\
{context}You are the chief engineer on a steel structure demolition team.
Write the final structural demolition proposal for the structure below. Draw on all of your team's reports and cover the demolition sequence, temporary support and unloading, monitoring during demolition, and safety measures.

Structure precondition:
{precondition}

Analysis report:
{out:analysis}

Demolition report:
{out:demolition}

Inspection report:
{out:inspection}

Integrated findings:
{out:integration}
";

impl RoleSpec {
    pub fn default_for(role: Role) -> Self {
        let (template, uses_rag, inputs, task): (&str, bool, &[Role], &str) = match role {
            Role::Analysis => (ANALYSIS_TEMPLATE, true, &[], "problems and risks in demolishing this structure"),
            Role::Demolition => (
                DEMOLITION_TEMPLATE,
                true,
                &[Role::Analysis],
                "demolition methods, sequence and temporary support solutions",
            ),
            Role::Inspection => (
                INSPECTION_TEMPLATE,
                false,
                &[Role::Analysis, Role::Demolition],
                "checking demolition problems and solutions",
            ),
            Role::Integration => (
                INTEGRATION_TEMPLATE,
                false,
                &[Role::Analysis, Role::Demolition, Role::Inspection],
                "consolidating demolition findings",
            ),
            Role::Response => (
                RESPONSE_TEMPLATE,
                true,
                &[Role::Analysis, Role::Demolition, Role::Inspection, Role::Integration],
                "structural demolition proposal",
            ),
        };
        RoleSpec {
            role,
            prompt_template: template.to_string(),
            uses_rag,
            inputs: inputs.to_vec(),
            task: task.to_string(),
            model: None,
        }
    }

    /// The five roles in pipeline order with the built-in templates.
    pub fn defaults() -> Vec<RoleSpec> {
        Role::ORDER.into_iter().map(RoleSpec::default_for).collect()
    }
}

/// Replaces templates with `<role>.txt` files found in `dir`.
pub fn apply_template_dir(roles: &mut [RoleSpec], dir: &Path) -> Result<usize, CollabError> {
    let mut n = 0;
    for spec in roles {
        let path = dir.join(format!("{}.txt", spec.role));
        if path.is_file() {
            spec.prompt_template = fs::read_to_string(&path).map_err(|source| CollabError::Io { path, source })?;
            n += 1;
        }
    }
    Ok(n)
}

/// Checks that `roles` are the five roles in pipeline order, that inputs
/// only name earlier roles, and that the response role reads all four others.
pub fn validate_roles(roles: &[RoleSpec]) -> Result<(), CollabError> {
    let order: Vec<Role> = roles.iter().map(|r| r.role).collect();
    if order != Role::ORDER {
        return Err(CollabError::InvalidRoles(format!(
            "expected analysis, demolition, inspection, integration, response; got {}",
            order.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    for spec in roles {
        for input in &spec.inputs {
            if input.position() >= spec.role.position() {
                return Err(CollabError::InvalidRoles(format!("{} cannot read the output of {}", spec.role, input)));
            }
        }
        let mut unique = spec.inputs.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != spec.inputs.len() {
            return Err(CollabError::InvalidRoles(format!("{} lists an input twice", spec.role)));
        }
    }
    let response = &roles[4];
    if Role::ORDER[..4].iter().any(|r| !response.inputs.contains(r)) {
        return Err(CollabError::InvalidRoles("response must read all four other roles".into()));
    }
    Ok(())
}

fn context_block(ctx: Option<&ContextBundle>) -> String {
    match ctx {
        Some(c) if !c.rendered.trim().is_empty() => format!("Reference material:\n{}\n\n", c.rendered.trim_end()),
        _ => String::new(),
    }
}

/// Fills `{precondition}`, one `{out:<role>}` per declared input (each
/// exactly once) and, when present, `{context}`.
pub fn render_role_prompt(
    spec: &RoleSpec,
    pre: &StructurePrecondition,
    upstream: &BTreeMap<Role, String>,
    ctx: Option<&ContextBundle>,
) -> Result<String, CollabError> {
    let keys: Vec<String> = spec.inputs.iter().map(|r| r.placeholder()).collect();
    let mut required: Vec<(&str, &str)> = vec![("precondition", &pre.raw)];
    for (input, key) in spec.inputs.iter().zip(&keys) {
        let out = upstream.get(input).ok_or(CollabError::MissingUpstream {
            role: spec.role,
            missing: *input,
        })?;
        required.push((key, out));
    }
    let block = context_block(ctx);
    template::render(&spec.prompt_template, &required, &[("context", &block)]).map_err(|source| CollabError::Template {
        role: spec.role,
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: Role,
    pub prompt: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalBundle {
    pub precondition: StructurePrecondition,
    pub outputs: BTreeMap<Role, String>,
    pub retrieved: BTreeMap<Role, ContextBundle>,
    pub transcript: Vec<TranscriptEntry>,
    pub warnings: Vec<String>,
}

impl ProposalBundle {
    /// The response role's output.
    pub fn proposal(&self) -> Option<&str> {
        self.outputs.get(&Role::Response).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: String,
    pub temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: String::new(),
            temperature: DEFAULT_GENERATION_TEMPERATURE,
        }
    }
}

/// Runs every role once in pipeline order. A retrieval failure leaves that
/// role without context and adds a warning; a provider failure stops the run.
pub fn run_pipeline(
    pre: &StructurePrecondition,
    roles: &[RoleSpec],
    llm: &dyn ChatProvider,
    retriever: Option<&dyn Retriever>,
    cfg: &PipelineConfig,
) -> Result<ProposalBundle, CollabError> {
    validate_roles(roles)?;
    let mut bundle = ProposalBundle {
        precondition: pre.clone(),
        outputs: BTreeMap::new(),
        retrieved: BTreeMap::new(),
        transcript: Vec::new(),
        warnings: Vec::new(),
    };
    for spec in roles {
        let ctx = match (spec.uses_rag, retriever) {
            (true, Some(r)) => match r.context(&format!("{}\n{}", pre.raw.trim_end(), spec.task)) {
                Ok(c) => Some(c),
                Err(e) => {
                    log::warn!("retrieval for role {} failed: {e}", spec.role);
                    bundle.warnings.push(format!("{}: retrieval failed, continuing without context: {e}", spec.role));
                    None
                }
            },
            _ => None,
        };
        let prompt = render_role_prompt(spec, pre, &bundle.outputs, ctx.as_ref())?;
        let model = spec.model.as_deref().unwrap_or(&cfg.model);
        let req = ChatRequest::user(model, prompt.as_str()).with_temperature(cfg.temperature);
        if let Some(c) = ctx {
            bundle.retrieved.insert(spec.role, c);
        }
        match llm.chat(&req) {
            Ok(reply) => {
                bundle.outputs.insert(spec.role, reply.clone());
                bundle.transcript.push(TranscriptEntry {
                    role: spec.role,
                    prompt,
                    reply,
                });
            }
            Err(source) => {
                return Err(CollabError::Provider {
                    role: spec.role,
                    source,
                    partial: Box::new(bundle),
                })
            }
        }
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SafetyRules,
    SchemeOutline,
    Custom,
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "safety_rules" => Ok(ScenarioKind::SafetyRules),
            "scheme_outline" => Ok(ScenarioKind::SchemeOutline),
            "custom" => Ok(ScenarioKind::Custom),
            _ => Err(format!("unknown scenario {s:?} (expected safety_rules, scheme_outline or custom)")),
        }
    }
}

/// The expert persona line followed by the task for `kind`.
pub fn scenario_prompt(kind: ScenarioKind, body: &str) -> Result<String, CollabError> {
    let task = match kind {
        ScenarioKind::SafetyRules => {
            "Your task is to draw up the safety rules for the demolition plan of this structure, in as much detail as you can."
        }
        ScenarioKind::SchemeOutline => {
            "Your task is to draft an outline of the structural demolition plan and state what each part of the plan must cover."
        }
        ScenarioKind::Custom if body.trim().is_empty() => return Err(CollabError::EmptyBody),
        ScenarioKind::Custom => body.trim(),
    };
    Ok(format!("{PERSONA} {task}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::MockFailure;
    use crate::providers::{FnChat, ScriptEntry, ScriptedChat};
    use crate::retrieve::RetrieveError;

    const FIXTURE: &str = "\
Engineering overview: A gymnasium roof supported by a bolted-ball steel space grid, to be removed before the hall is rebuilt.
Structural scale: The grid spans 60 m by 40 m with a depth of 3 m and rests on 24 column-top bearings.
Finite element model updating results: After updating against measured frequencies, the first mode is 2.1 Hz and bearing stiffness is reduced by 15 percent.
Finite element analysis results: Removing the central region first raises the axial force of edge chords by 38 percent.
Monitoring: Strain gauges on 16 critical members and displacement targets at mid-span are read every 30 minutes.";

    #[test]
    fn parses_sections() {
        let p = parse_precondition(FIXTURE).unwrap();
        assert_eq!(p.raw, FIXTURE);
        assert!(p.overview.starts_with("A gymnasium roof"));
        assert!(p.scale.starts_with("The grid spans 60 m"));
        assert!(p.fem_update.starts_with("After updating"));
        assert!(p.fem_analysis.starts_with("Removing the central"));
        assert!(p.monitoring.starts_with("Strain gauges"));
        for s in [Section::Overview, Section::Scale, Section::FemUpdate, Section::FemAnalysis, Section::Monitoring] {
            assert!(p.raw.contains(p.section(s)));
        }
    }

    #[test]
    fn heading_lines_and_chinese_headers() {
        let text = "Roof removal project\n## Monitoring\nStrain at 12 points.\n结构规模：跨度60米。";
        let p = parse_precondition(text).unwrap();
        assert_eq!(p.overview, "Roof removal project");
        assert_eq!(p.monitoring, "Strain at 12 points.");
        assert_eq!(p.scale, "跨度60米。");
    }

    #[test]
    fn unstructured_and_empty() {
        let text = "  A single paragraph about a truss roof that is to be taken down.  ";
        let p = parse_precondition(text).unwrap();
        assert_eq!(p.overview, text.trim());
        assert!(p.scale.is_empty() && p.monitoring.is_empty());
        assert!(matches!(parse_precondition(" \n"), Err(CollabError::EmptyInput)));
    }

    fn sentinel_llm() -> FnChat<impl Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync> {
        FnChat(|req: &ChatRequest| {
            let p = &req.messages[0].content;
            let role = if p.contains("chief engineer") {
                "response"
            } else if p.contains("integration engineer") {
                "integration"
            } else if p.contains("inspection engineer") {
                "inspection"
            } else if p.contains("demolition engineer on") {
                "demolition"
            } else {
                "analysis"
            };
            Ok(format!("OUT-{role}"))
        })
    }

    #[test]
    fn sentinel_dataflow() {
        let pre = parse_precondition(FIXTURE).unwrap();
        let b = run_pipeline(&pre, &RoleSpec::defaults(), &sentinel_llm(), None, &PipelineConfig::default()).unwrap();
        let roles: Vec<Role> = b.transcript.iter().map(|t| t.role).collect();
        assert_eq!(roles, Role::ORDER);
        for r in Role::ORDER {
            assert_eq!(b.outputs[&r], format!("OUT-{r}"));
        }
        let response = &b.transcript[4].prompt;
        assert!(response.contains(FIXTURE));
        for r in &Role::ORDER[..4] {
            assert!(response.contains(&format!("OUT-{r}")));
        }
        // No role sees a later role's output.
        for (i, t) in b.transcript.iter().enumerate() {
            for later in &Role::ORDER[i..] {
                assert!(!t.prompt.contains(&format!("OUT-{later}")));
            }
        }
        assert!(b.retrieved.is_empty());
        let again = run_pipeline(&pre, &RoleSpec::defaults(), &sentinel_llm(), None, &PipelineConfig::default()).unwrap();
        assert_eq!(again.to_json(), b.to_json());
    }

    #[test]
    fn failure_at_third_role_keeps_two_entries() {
        let llm = ScriptedChat::new(vec![
            ScriptEntry::reply("one"),
            ScriptEntry::reply("two"),
            ScriptEntry::fail(MockFailure::Server),
        ])
        .unwrap();
        let pre = parse_precondition(FIXTURE).unwrap();
        match run_pipeline(&pre, &RoleSpec::defaults(), &llm, None, &PipelineConfig::default()) {
            Err(CollabError::Provider { role, partial, .. }) => {
                assert_eq!(role, Role::Inspection);
                assert_eq!(partial.transcript.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    struct Fixed(Result<&'static str, ()>);

    impl Retriever for Fixed {
        fn context(&self, _: &str) -> Result<ContextBundle, RetrieveError> {
            match self.0 {
                Ok(text) => Ok(ContextBundle {
                    rendered: text.into(),
                    ..ContextBundle::default()
                }),
                Err(()) => Err(RetrieveError::EmptyStore),
            }
        }
    }

    #[test]
    fn retrieval_per_role() {
        let pre = parse_precondition(FIXTURE).unwrap();
        let llm = ScriptedChat::always("ok");
        let b = run_pipeline(&pre, &RoleSpec::defaults(), &llm, Some(&Fixed(Ok("CTX-1"))), &PipelineConfig::default())
            .unwrap();
        let with_ctx: Vec<Role> = b.retrieved.keys().copied().collect();
        assert_eq!(with_ctx, [Role::Analysis, Role::Demolition, Role::Response]);
        assert!(b.transcript[0].prompt.starts_with("Reference material:\nCTX-1"));
        assert!(!b.transcript[2].prompt.contains("CTX-1"));

        let b = run_pipeline(&pre, &RoleSpec::defaults(), &llm, Some(&Fixed(Err(()))), &PipelineConfig::default())
            .unwrap();
        assert_eq!((b.outputs.len(), b.warnings.len()), (5, 3));
    }

    #[test]
    fn prompt_rendering_rules() {
        let pre = parse_precondition("Overview: x").unwrap();
        let specs = RoleSpec::defaults();
        let p = render_role_prompt(&specs[0], &pre, &BTreeMap::new(), None).unwrap();
        assert!(p.contains("Overview: x"));
        assert!(matches!(
            render_role_prompt(&specs[1], &pre, &BTreeMap::new(), None),
            Err(CollabError::MissingUpstream { missing: Role::Analysis, .. })
        ));
        let mut broken = specs[1].clone();
        broken.prompt_template = "{precondition}".into();
        let up = BTreeMap::from([(Role::Analysis, "a".to_string())]);
        assert!(matches!(render_role_prompt(&broken, &pre, &up, None), Err(CollabError::Template { .. })));
    }

    #[test]
    fn role_validation() {
        let mut specs = RoleSpec::defaults();
        assert!(validate_roles(&specs).is_ok());
        specs[1].inputs.push(Role::Inspection);
        assert!(validate_roles(&specs).is_err());
        let mut specs = RoleSpec::defaults();
        specs[4].inputs.pop();
        assert!(validate_roles(&specs).is_err());
        let mut specs = RoleSpec::defaults();
        specs.swap(0, 1);
        assert!(validate_roles(&specs).is_err());
    }

    #[test]
    fn scenarios() {
        let s = scenario_prompt(ScenarioKind::SafetyRules, "").unwrap();
        assert!(s.starts_with("You are a steel structure demolition expert.") && s.contains("safety rules"));
        let s = scenario_prompt(ScenarioKind::SchemeOutline, "").unwrap();
        assert!(s.contains("outline of the structural demolition plan"));
        assert_eq!(
            scenario_prompt(ScenarioKind::Custom, "List required cranes.").unwrap(),
            "You are a steel structure demolition expert. List required cranes."
        );
        assert!(matches!(scenario_prompt(ScenarioKind::Custom, " "), Err(CollabError::EmptyBody)));
    }
}
