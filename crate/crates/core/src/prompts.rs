//! Prompt rendering: instruction variants, demonstration blocks and the final
//! chat prompt.
//!
//! All wording comes from a [`TemplateRegistry`]; the built-in registry is
//! compiled from `templates/*.txt` and any directory with the same file names
//! can replace it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, EvalInstance, ItemId};
use crate::demo::{AggregatedDemonstration, DemoLabel, Demonstration, TaskTemplate};
use crate::retrieval::{recent, HISTORY_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {file}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { file: String, name: String },
    #[error("template {file}: unterminated placeholder")]
    Unterminated { file: String },
    #[error("failed to read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
}

pub type Result<T> = std::result::Result<T, PromptError>;

/// Parts an instruction may mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstructionComponent {
    CandidateRanking,
    PreferenceAlignment,
    HistoricalItems,
    RankedResultFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum InstructionVariant {
    /// Every component, enumerated result format.
    #[default]
    #[serde(rename = "A", alias = "a")]
    Full,
    /// Without the preference-alignment clause.
    #[serde(rename = "B", alias = "b")]
    NoPreference,
    /// Without the watched-items clause.
    #[serde(rename = "C", alias = "c")]
    NoHistoryFocus,
    /// Result format described in prose instead of enumerated.
    #[serde(rename = "D", alias = "d")]
    ProseFormat,
}

impl InstructionVariant {
    pub const ALL: [InstructionVariant; 4] = [Self::Full, Self::NoPreference, Self::NoHistoryFocus, Self::ProseFormat];

    pub fn components(self) -> BTreeSet<InstructionComponent> {
        use InstructionComponent::*;
        let all = [CandidateRanking, PreferenceAlignment, HistoricalItems, RankedResultFormat];
        let dropped = match self {
            Self::NoPreference => Some(PreferenceAlignment),
            Self::NoHistoryFocus => Some(HistoricalItems),
            Self::Full | Self::ProseFormat => None,
        };
        all.into_iter().filter(|c| Some(*c) != dropped).collect()
    }

    /// Whether the result format is an enumerated block (as opposed to prose).
    pub fn enumerated_format(self) -> bool {
        self != Self::ProseFormat
    }
}

/// A `{name}`-placeholder template, validated at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    fn parse(file: &str, text: &str, allowed: &[&str]) -> Result<Self> {
        let text = text.trim_end_matches(['\n', '\r']).to_owned();
        let mut rest = text.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else {
                return Err(PromptError::Unterminated { file: file.into() });
            };
            let name = &rest[open + 1..open + close];
            if !allowed.contains(&name) {
                return Err(PromptError::UnknownPlaceholder {
                    file: file.into(),
                    name: name.into(),
                });
            }
            rest = &rest[open + close + 1..];
        }
        Ok(Self { text })
    }

    /// Substitutes `values`; a line holding only a placeholder that renders
    /// empty is removed.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut emitted = false;
        for line in self.text.split('\n') {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                if values.iter().any(|(k, v)| *k == name && v.is_empty()) {
                    continue;
                }
            }
            if emitted {
                out.push('\n');
            }
            out.push_str(&substitute(line, values));
            emitted = true;
        }
        out
    }
}

fn substitute(line: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').expect("validated template");
        let name = &rest[open + 1..open + close];
        match values.iter().find(|(k, _)| *k == name) {
            Some((_, v)) => out.push_str(v),
            None => out.push_str(&rest[open..=open + close]),
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    out
}

const INSTRUCTION_KEYS: &[&str] = &["history", "candidates", "format", "m"];
const DEMO_KEYS: &[&str] = &["history", "candidate_section"];

/// Every piece of prompt wording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    pub system: Option<String>,
    pub bridge: String,
    pub answer: String,
    pub instruction_a: Template,
    pub instruction_b: Template,
    pub instruction_c: Template,
    pub instruction_d: Template,
    pub format_line: Template,
    pub demo_t1: Template,
    pub demo_t2: Template,
    pub candidate_section: Template,
    pub label_t2: Template,
}

macro_rules! builtin {
    ($name:literal) => {
        ($name, include_str!(concat!("../templates/", $name)))
    };
}

const BUILTIN: [(&str, &str); 12] = [
    builtin!("system.txt"),
    builtin!("bridge.txt"),
    builtin!("answer.txt"),
    builtin!("instruction_a.txt"),
    builtin!("instruction_b.txt"),
    builtin!("instruction_c.txt"),
    builtin!("instruction_d.txt"),
    builtin!("format_line.txt"),
    builtin!("demo_t1.txt"),
    builtin!("demo_t2.txt"),
    builtin!("candidate_section.txt"),
    builtin!("label_t2.txt"),
];

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::from_lookup(|name| Ok(BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| t.to_string())))
            .expect("built-in templates are valid")
    }
}

impl TemplateRegistry {
    /// Loads templates from `dir`, falling back to the built-ins for missing files.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::from_lookup(|name| {
            let path = dir.join(name);
            if path.exists() {
                std::fs::read_to_string(&path)
                    .map(Some)
                    .map_err(|source| PromptError::Io { path, source })
            } else {
                Ok(BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| t.to_string()))
            }
        })
    }

    fn from_lookup(lookup: impl Fn(&str) -> Result<Option<String>>) -> Result<Self> {
        let get = |name: &str, keys: &[&str]| -> Result<Template> {
            let text = lookup(name)?.unwrap_or_default();
            Template::parse(name, &text, keys)
        };
        let plain = |name: &str| -> Result<String> { Ok(get(name, &[])?.text) };
        let system = plain("system.txt")?;
        Ok(Self {
            system: (!system.trim().is_empty()).then_some(system),
            bridge: plain("bridge.txt")?,
            answer: plain("answer.txt")?,
            instruction_a: get("instruction_a.txt", INSTRUCTION_KEYS)?,
            instruction_b: get("instruction_b.txt", INSTRUCTION_KEYS)?,
            instruction_c: get("instruction_c.txt", INSTRUCTION_KEYS)?,
            instruction_d: get("instruction_d.txt", INSTRUCTION_KEYS)?,
            format_line: get("format_line.txt", &["rank", "ordinal"])?,
            demo_t1: get("demo_t1.txt", DEMO_KEYS)?,
            demo_t2: get("demo_t2.txt", DEMO_KEYS)?,
            candidate_section: get("candidate_section.txt", &["candidates"])?,
            label_t2: get("label_t2.txt", &["positive", "negative"])?,
        })
    }

    fn instruction(&self, variant: InstructionVariant) -> &Template {
        match variant {
            InstructionVariant::Full => &self.instruction_a,
            InstructionVariant::NoPreference => &self.instruction_b,
            InstructionVariant::NoHistoryFocus => &self.instruction_c,
            InstructionVariant::ProseFormat => &self.instruction_d,
        }
    }

    /// The enumerated result format for `m` candidates: first two lines, an
    /// ellipsis, and the last line.
    pub fn format_block(&self, m: usize) -> String {
        let line = |rank: usize| {
            let ordinal = if rank == 1 { "Top".to_owned() } else { ordinal(rank) };
            self.format_line
                .render(&[("rank", &rank.to_string()), ("ordinal", &ordinal)])
        };
        let mut lines: Vec<String> = (1..=m.min(2)).map(line).collect();
        if m > 3 {
            lines.push("...".into());
        }
        if m >= 3 {
            lines.push(line(m));
        }
        lines.join("\n")
    }
}

/// English ordinal: 1st, 2nd, 3rd, 4th, 11th, 21st, ...
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Quotes a string the way Python's `repr` does.
fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Renders titles as an indexed list: `['0. Title', '1. Other']`.
pub fn indexed_title_list<S: AsRef<str>>(titles: &[S]) -> String {
    let entries: Vec<String> = titles
        .iter()
        .enumerate()
        .map(|(i, t)| py_repr(&format!("{i}. {}", t.as_ref())))
        .collect();
    format!("[{}]", entries.join(", "))
}

/// Inverse of [`indexed_title_list`]; returns `None` when `text` is not such a list.
pub fn parse_indexed_title_list(text: &str) -> Option<Vec<String>> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut titles = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while matches!(chars.peek(), Some(c) if c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(quote) = chars.next() else { break };
        if quote != '\'' && quote != '"' {
            return None;
        }
        let mut entry = String::new();
        loop {
            match chars.next()? {
                '\\' => match chars.next()? {
                    'n' => entry.push('\n'),
                    c => entry.push(c),
                },
                c if c == quote => break,
                c => entry.push(c),
            }
        }
        let (_, title) = entry.split_once(". ")?;
        titles.push(title.to_owned());
    }
    Some(titles)
}

pub fn render_instruction<S: AsRef<str>>(
    registry: &TemplateRegistry,
    variant: InstructionVariant,
    history_titles: &[S],
    candidate_titles: &[S],
    m: usize,
) -> String {
    let history = indexed_title_list(history_titles);
    let candidates = indexed_title_list(candidate_titles);
    let format = registry.format_block(m);
    registry.instruction(variant).render(&[
        ("history", &history),
        ("candidates", &candidates),
        ("format", &format),
        ("m", &m.to_string()),
    ])
}

/// A demonstration as it appears in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptDemo {
    Standard(Demonstration),
    Aggregated(AggregatedDemonstration),
}

fn titles<'c>(catalog: &'c Catalog, ids: &[ItemId]) -> Result<Vec<&'c str>> {
    ids.iter()
        .map(|id| catalog.title(id).ok_or_else(|| PromptError::UnknownItem(id.clone())))
        .collect()
}

fn title<'c>(catalog: &'c Catalog, id: &ItemId) -> Result<&'c str> {
    catalog.title(id).ok_or_else(|| PromptError::UnknownItem(id.clone()))
}

fn ranked_lines(titles: &[&str]) -> String {
    let mut out = String::new();
    for (i, t) in titles.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}. {t}", i + 1);
    }
    out
}

/// Instruction text, the answer header, and the labelled answer.
pub fn render_demonstration(
    registry: &TemplateRegistry,
    demo: &PromptDemo,
    variant: InstructionVariant,
    catalog: &Catalog,
) -> Result<String> {
    let (instruction, answer) = match demo {
        PromptDemo::Aggregated(agg) => {
            let h = titles(catalog, &agg.history)?;
            let c = titles(catalog, &agg.candidates)?;
            (
                render_instruction(registry, variant, &h, &c, c.len()),
                ranked_lines(&titles(catalog, &agg.ranking)?),
            )
        }
        PromptDemo::Standard(d) => {
            let h = titles(catalog, recent(&d.history, HISTORY_WINDOW))?;
            let c = match &d.candidates {
                Some(c) => titles(catalog, c)?,
                None => Vec::new(),
            };
            let section = if c.is_empty() {
                String::new()
            } else {
                registry
                    .candidate_section
                    .render(&[("candidates", &indexed_title_list(&c))])
            };
            let history = indexed_title_list(&h);
            let standard_values = [("history", history.as_str()), ("candidate_section", section.as_str())];
            match (&d.template, &d.label) {
                (TaskTemplate::RankedItems, DemoLabel::Ranking(r)) => (
                    render_instruction(registry, variant, &h, &c, c.len()),
                    ranked_lines(&titles(catalog, r)?),
                ),
                (_, DemoLabel::Next(next)) => (
                    registry.demo_t1.render(&standard_values),
                    title(catalog, next)?.to_owned(),
                ),
                (_, DemoLabel::Pair { positive, negative }) => (
                    registry.demo_t2.render(&standard_values),
                    registry.label_t2.render(&[
                        ("positive", title(catalog, positive)?),
                        ("negative", title(catalog, negative)?),
                    ]),
                ),
                (_, DemoLabel::Ranking(r)) => (
                    render_instruction(registry, variant, &h, &c, c.len()),
                    ranked_lines(&titles(catalog, r)?),
                ),
            }
        }
    };
    Ok(format!("{instruction}\n{}\n{answer}", registry.answer))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    /// `ceil(chars / 4)` over all message contents.
    pub token_estimate: usize,
    /// Test candidates in the order they appear in the prompt.
    pub presented_candidates: Vec<ItemId>,
}

impl PromptBundle {
    pub fn user_text(&self) -> &str {
        self.messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default()
    }

    pub fn char_len(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

/// Concatenates rendered demonstrations, the bridge line (when there is at
/// least one demonstration), and the test instruction into one user message.
///
/// With `shuffle_seed`, the test candidates are presented in a seeded random
/// order; otherwise in their stored order.
pub fn assemble_prompt(
    registry: &TemplateRegistry,
    demos: &[PromptDemo],
    test: &EvalInstance,
    variant: InstructionVariant,
    shuffle_seed: Option<u64>,
    catalog: &Catalog,
) -> Result<PromptBundle> {
    let mut presented = test.candidates.clone();
    if let Some(seed) = shuffle_seed {
        presented.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let history = titles(catalog, recent(&test.history, HISTORY_WINDOW))?;
    let candidates = titles(catalog, &presented)?;
    let test_block = format!(
        "{}\n{}",
        render_instruction(registry, variant, &history, &candidates, candidates.len()),
        registry.answer
    );

    let mut user = String::new();
    for demo in demos {
        user.push_str(&render_demonstration(registry, demo, variant, catalog)?);
        user.push_str("\n\n");
    }
    if !demos.is_empty() {
        user.push_str(&registry.bridge);
        user.push_str("\n\n");
    }
    user.push_str(&test_block);

    let mut messages = Vec::with_capacity(2);
    if let Some(system) = &registry.system {
        messages.push(ChatMessage {
            role: Role::System,
            content: system.clone(),
        });
    }
    messages.push(ChatMessage {
        role: Role::User,
        content: user,
    });
    let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    Ok(PromptBundle {
        messages,
        token_estimate: chars.div_ceil(4),
        presented_candidates: presented,
    })
}

/// Candidate titles of the test block (the last candidate list in the prompt).
pub fn test_candidates_from_prompt(bundle: &PromptBundle) -> Option<Vec<String>> {
    const MARKER: &str = "- Candidate Movies: ";
    let text = bundle.user_text();
    let start = text.rfind(MARKER)? + MARKER.len();
    let line = text[start..].lines().next()?;
    parse_indexed_title_list(line)
}
