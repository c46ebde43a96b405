//! Tool selection: enumeration, retrieval matching, parameter querying and
//! budgeted context assembly.
//!
//! Retrieval is lexical Okapi BM25 over a per-tool document built from the
//! tool's name, instruction, description and example queries. The ranking
//! sits behind [`Matcher`] so another backend can replace it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::registry::{ParamSpec, ParamType, Registry, ToolManifest, UsageExample};

pub const DEFAULT_K: usize = 5;
pub const FEW_SHOT_EXAMPLES: usize = 2;
pub const CONTEXT_RESERVE_TOKENS: usize = 1024;
pub const MIN_BUDGET_TOKENS: usize = 256;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("budget of {0} tokens is below the minimum of {MIN_BUDGET_TOKENS}")]
    BudgetTooSmall(usize),
    #[error("k must be at least 1")]
    ZeroK,
}

/// Lowercases and splits on every non-alphanumeric codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Model-free token proxy: one token per four UTF-8 bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListingEntry {
    pub name: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionListing {
    pub entries: Vec<ListingEntry>,
    pub token_estimate: usize,
}

impl InstructionListing {
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}: {}", e.name, e.instruction))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// The lightweight catalogue handed to the planner up front: names and
/// one-line instructions only.
pub fn enumerate_instructions(reg: &Registry) -> InstructionListing {
    let entries: Vec<ListingEntry> = reg
        .tools()
        .iter()
        .map(|t| ListingEntry {
            name: t.name.clone(),
            instruction: t.instruction.clone(),
        })
        .collect();
    let token_estimate = entries
        .iter()
        .map(|e| estimate_tokens(&format!("{}: {}", e.name, e.instruction)))
        .sum();
    InstructionListing {
        entries,
        token_estimate,
    }
}

/// Token cost of handing the planner every manifest in full.
pub fn full_manifest_tokens(reg: &Registry) -> usize {
    reg.tools()
        .iter()
        .map(|t| {
            let mut text = format!("{}: {}\n{}\n", t.name, t.instruction, t.description);
            text.push_str(&schema_text(&t.parameters));
            for ex in &t.examples {
                text.push_str(&example_text(&t.name, ex));
            }
            estimate_tokens(&text)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub query: String,
    pub candidates: Vec<Candidate>,
    pub k_requested: usize,
}

impl SelectionResult {
    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

pub trait Matcher: Send + Sync {
    /// Top-`k` tools with positive score, best first, ties by name.
    fn rank(&self, query: &str, k: usize) -> Vec<Candidate>;
}

/// The text a tool is retrieved by.
pub fn tool_document(tool: &ToolManifest) -> String {
    let mut doc = format!("{} {} {}", tool.name, tool.instruction, tool.description);
    for ex in &tool.examples {
        doc.push(' ');
        doc.push_str(&ex.query);
    }
    doc
}

struct IndexedDoc {
    name: String,
    term_freq: HashMap<String, u32>,
    len: usize,
}

pub struct Bm25Matcher {
    docs: Vec<IndexedDoc>,
    doc_freq: HashMap<String, u32>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl Bm25Matcher {
    pub fn new(reg: &Registry) -> Self {
        Self::with_params(reg, BM25_K1, BM25_B)
    }

    pub fn with_params(reg: &Registry, k1: f64, b: f64) -> Self {
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        let docs: Vec<IndexedDoc> = reg
            .tools()
            .iter()
            .map(|t| {
                let terms = tokenize(&tool_document(t));
                let mut term_freq: HashMap<String, u32> = HashMap::new();
                for term in &terms {
                    *term_freq.entry(term.clone()).or_default() += 1;
                }
                for term in term_freq.keys() {
                    *doc_freq.entry(term.clone()).or_default() += 1;
                }
                IndexedDoc {
                    name: t.name.clone(),
                    term_freq,
                    len: terms.len(),
                }
            })
            .collect();
        let total: usize = docs.iter().map(|d| d.len).sum();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Bm25Matcher {
            docs,
            doc_freq,
            avg_len,
            k1,
            b,
        }
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn score(&self, doc: &IndexedDoc, terms: &[String]) -> f64 {
        let norm = if self.avg_len > 0.0 {
            doc.len as f64 / self.avg_len
        } else {
            0.0
        };
        terms
            .iter()
            .map(|term| {
                let tf = doc.term_freq.get(term).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.idf(term) * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
            })
            .sum()
    }
}

fn unique_terms(query: &str) -> Vec<String> {
    let mut terms = Vec::new();
    for t in tokenize(query) {
        if !terms.contains(&t) {
            terms.push(t);
        }
    }
    terms
}

impl Matcher for Bm25Matcher {
    fn rank(&self, query: &str, k: usize) -> Vec<Candidate> {
        let terms = unique_terms(query);
        let mut scored: Vec<Candidate> = self
            .docs
            .iter()
            .map(|d| Candidate {
                name: d.name.clone(),
                score: self.score(d, &terms),
            })
            .filter(|c| c.score > 0.0)
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
        scored.truncate(k);
        scored
    }
}

pub fn match_with(
    matcher: &dyn Matcher,
    reg: &Registry,
    query: &str,
    k: usize,
) -> Result<SelectionResult, SelectionError> {
    if reg.is_empty() {
        return Err(SelectionError::EmptyRegistry);
    }
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    Ok(SelectionResult {
        query: query.to_string(),
        candidates: matcher.rank(query, k),
        k_requested: k,
    })
}

pub fn match_tools(query: &str, reg: &Registry, k: usize) -> Result<SelectionResult, SelectionError> {
    match_with(&Bm25Matcher::new(reg), reg, query, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDetail {
    pub name: String,
    pub instruction: String,
    pub parameters: Vec<ParamSpec>,
    pub examples: Vec<UsageExample>,
}

pub fn query_parameters(reg: &Registry, name: &str) -> Result<ToolDetail, SelectionError> {
    let tool = reg
        .get(name)
        .ok_or_else(|| SelectionError::UnknownTool(name.to_string()))?;
    Ok(ToolDetail {
        name: tool.name.clone(),
        instruction: tool.instruction.clone(),
        parameters: tool.parameters.clone(),
        examples: tool.examples.iter().take(FEW_SHOT_EXAMPLES).cloned().collect(),
    })
}

/// Renders a parameter list as a JSON-Schema object, the form tool-calling
/// models are used to reading.
pub fn input_schema(params: &[ParamSpec]) -> Value {
    let mut props = Map::new();
    for p in params {
        let mut prop = Map::new();
        let ty = match p.ty {
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            _ => "string",
        };
        prop.insert("type".into(), json!(ty));
        if p.ty == ParamType::Path {
            prop.insert("format".into(), json!("path"));
        }
        if let Some(values) = &p.enum_values {
            prop.insert("enum".into(), json!(values));
        }
        prop.insert("description".into(), json!(p.description));
        props.insert(p.name.clone(), Value::Object(prop));
    }
    let required: Vec<&str> = params.iter().filter(|p| p.required).map(|p| p.name.as_str()).collect();
    json!({"type": "object", "properties": props, "required": required})
}

fn schema_text(params: &[ParamSpec]) -> String {
    serde_json::to_string_pretty(&input_schema(params)).expect("schema serializes")
}

fn example_text(tool: &str, ex: &UsageExample) -> String {
    let call = json!({"tool": tool, "arguments": ex.arguments});
    format!(
        "Example: \"{}\"\nCall: {} -> {}\n",
        ex.query,
        call,
        ex.expected_output_kind.as_str()
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSection {
    pub tool: String,
    pub instruction: String,
    pub schema: String,
    pub examples: Vec<UsageExample>,
    pub token_estimate: usize,
}

impl ContextSection {
    fn build(tool: &ToolManifest, n_examples: usize) -> Self {
        let mut section = ContextSection {
            tool: tool.name.clone(),
            instruction: tool.instruction.clone(),
            schema: schema_text(&tool.parameters),
            examples: tool.examples.iter().take(n_examples).cloned().collect(),
            token_estimate: 0,
        };
        section.token_estimate = estimate_tokens(&section.render());
        section
    }

    /// Section for a tool looked up by name, with its few-shot examples.
    pub fn from_detail(detail: &ToolDetail) -> Self {
        let mut section = ContextSection {
            tool: detail.name.clone(),
            instruction: detail.instruction.clone(),
            schema: schema_text(&detail.parameters),
            examples: detail.examples.clone(),
            token_estimate: 0,
        };
        section.token_estimate = estimate_tokens(&section.render());
        section
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "### {}\n{}\nInput schema:\n{}\n",
            self.tool, self.instruction, self.schema
        );
        for ex in &self.examples {
            out.push_str(&example_text(&self.tool, ex));
        }
        out
    }

    /// Shortens the schema text until the section fits `budget`.
    fn truncate_to(&mut self, budget: usize) {
        const MARK: &str = "\n…";
        while self.token_estimate > budget && !self.schema.is_empty() {
            let excess_bytes = (self.token_estimate - budget) * 4 + MARK.len();
            let mut cut = self.schema.len().saturating_sub(excess_bytes);
            while !self.schema.is_char_boundary(cut) {
                cut -= 1;
            }
            self.schema.truncate(cut);
            if !self.schema.is_empty() {
                self.schema.push_str(MARK);
            }
            self.token_estimate = estimate_tokens(&self.render());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub sections: Vec<ContextSection>,
    pub token_estimate: usize,
    /// Effective budget the sections were packed into.
    pub budget: usize,
}

impl ContextDocument {
    pub fn render(&self) -> String {
        self.sections
            .iter()
            .map(ContextSection::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn contains(&self, tool: &str) -> bool {
        self.sections.iter().any(|s| s.tool == tool)
    }
}

pub fn effective_budget(query: &str, budget_tokens: usize) -> usize {
    budget_tokens
        .saturating_sub(estimate_tokens(query))
        .saturating_sub(CONTEXT_RESERVE_TOKENS)
        .max(MIN_BUDGET_TOKENS)
}

/// Packs candidate sections into the budget left over after the query.
///
/// The number of sections is the longest candidate prefix whose
/// example-free forms fit; the top candidate is always kept. Sections are
/// then upgraded in candidate order to two, else one, few-shot examples
/// while the total stays within budget.
pub fn build_context(
    query: &str,
    sel: &SelectionResult,
    reg: &Registry,
    budget_tokens: usize,
) -> Result<ContextDocument, SelectionError> {
    if budget_tokens < MIN_BUDGET_TOKENS {
        return Err(SelectionError::BudgetTooSmall(budget_tokens));
    }
    let budget = effective_budget(query, budget_tokens);
    let tools: Vec<&ToolManifest> = sel.candidates.iter().filter_map(|c| reg.get(&c.name)).collect();

    let mut sections: Vec<ContextSection> = Vec::new();
    let mut used = 0;
    for (i, tool) in tools.iter().enumerate() {
        let mut bare = ContextSection::build(tool, 0);
        if used + bare.token_estimate > budget {
            if i == 0 {
                bare.truncate_to(budget);
            } else {
                break;
            }
        }
        used += bare.token_estimate;
        sections.push(bare);
    }

    for (section, tool) in sections.iter_mut().zip(&tools) {
        for n in (1..=FEW_SHOT_EXAMPLES.min(tool.examples.len())).rev() {
            let richer = ContextSection::build(tool, n);
            if used - section.token_estimate + richer.token_estimate <= budget {
                used = used - section.token_estimate + richer.token_estimate;
                *section = richer;
                break;
            }
        }
    }

    Ok(ContextDocument {
        token_estimate: sections.iter().map(|s| s.token_estimate).sum(),
        sections,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Category, EnvSpec, Modality, OutputKind};

    fn tool(name: &str, instruction: &str, queries: &[&str]) -> ToolManifest {
        ToolManifest {
            name: name.into(),
            instruction: instruction.into(),
            description: String::new(),
            modality: Modality::Sound,
            category: Category::Editing,
            parameters: vec![ParamSpec {
                name: "audio_path".into(),
                ty: ParamType::Path,
                required: true,
                description: "input audio".into(),
                enum_values: None,
            }],
            examples: queries
                .iter()
                .map(|q| UsageExample {
                    query: (*q).into(),
                    arguments: serde_json::from_value(json!({"audio_path": "a.wav"})).unwrap(),
                    expected_output_kind: OutputKind::AudioPath,
                })
                .collect(),
            env: EnvSpec {
                command: "true".into(),
                args: vec![],
                env_vars: Default::default(),
                working_dir: ".".into(),
                timeout_s: 1.0,
                max_output_bytes: 1024,
            },
        }
    }

    fn small_registry() -> Registry {
        [
            tool(
                "denoise",
                "Remove noise from a recording",
                &["clean this noisy clip", "denoise"],
            ),
            tool("louder", "Increase loudness", &["make it louder"]),
            tool("reverse", "Play audio backwards", &["reverse this"]),
        ]
        .into_iter()
        .try_fold(Registry::empty(), |r, t| r.register_tool(t))
        .unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Separate vocals, please!"), ["separate", "vocals", "please"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Text2Speech TTS"), ["text2speech", "tts"]);
        assert_eq!(tokenize("music_separation"), ["music", "separation"]);
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("é"), 1);
    }

    #[test]
    fn empty_registry_listing_and_match() {
        let reg = Registry::empty();
        let listing = enumerate_instructions(&reg);
        assert!(listing.entries.is_empty());
        assert_eq!(listing.token_estimate, 0);
        assert_eq!(match_tools("x", &reg, 3), Err(SelectionError::EmptyRegistry));
    }

    #[test]
    fn listing_estimate_sums_entries() {
        let listing = enumerate_instructions(&small_registry());
        let expected: usize = [
            "denoise: Remove noise from a recording",
            "louder: Increase loudness",
            "reverse: Play audio backwards",
        ]
        .iter()
        .map(|s| estimate_tokens(s))
        .sum();
        assert_eq!(listing.token_estimate, expected);
    }

    #[test]
    fn no_overlap_means_no_candidates() {
        let sel = match_tools("zzzz qqqq", &small_registry(), 5).unwrap();
        assert!(sel.candidates.is_empty());
    }

    #[test]
    fn ranking_respects_k_and_order() {
        let sel = match_tools("clean the noisy recording louder", &small_registry(), 1).unwrap();
        assert_eq!(sel.candidates.len(), 1);
        assert_eq!(sel.candidates[0].name, "denoise");
        let all = match_tools("clean the noisy recording louder", &small_registry(), 5).unwrap();
        assert!(all.candidates.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn query_parameters_caps_examples() {
        let reg = small_registry();
        assert_eq!(query_parameters(&reg, "denoise").unwrap().examples.len(), 2);
        assert_eq!(query_parameters(&reg, "louder").unwrap().examples.len(), 1);
        assert_eq!(
            query_parameters(&reg, "foo"),
            Err(SelectionError::UnknownTool("foo".into()))
        );
    }

    #[test]
    fn budget_floor_is_enforced() {
        let reg = small_registry();
        let sel = match_tools("denoise", &reg, 3).unwrap();
        assert_eq!(
            build_context("q", &sel, &reg, 255),
            Err(SelectionError::BudgetTooSmall(255))
        );
        assert_eq!(effective_budget("q", 300), MIN_BUDGET_TOKENS);
        assert_eq!(effective_budget("q", 4096), 4096 - 1 - 1024);
    }

    #[test]
    fn oversized_top_section_is_truncated_into_budget() {
        let mut big = tool("huge", "Huge tool", &["huge"]);
        big.parameters[0].description = "x".repeat(5000);
        let reg = Registry::empty().register_tool(big).unwrap();
        let sel = match_tools("huge", &reg, 1).unwrap();
        let doc = build_context("huge", &sel, &reg, 256).unwrap();
        assert_eq!(doc.sections.len(), 1);
        assert!(doc.token_estimate <= doc.budget);
        assert!(doc.sections[0].examples.is_empty());
    }
}
