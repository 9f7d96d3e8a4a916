//! Semantic equivalence of two SELECT queries.
//!
//! Each query is summarised field by field, innermost fragment first, with
//! child summaries fed into the parent prompt. Pairs whose output arity or
//! base-table set differ are rejected before any LLM call; the rest go to an
//! alignment prompt that must map every output column in both directions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fragmenter::{decompose, FragmentError, FragmentTree};
use crate::lexer::{normalize, tokenize};
use crate::providers::{extract_json, LlmProvider, PromptEnvelope, ProviderError, TemplateId};
use crate::structure::{InputSource, QueryStructure};

pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProvenance {
    pub output_name: String,
    pub source_tables: BTreeSet<String>,
    #[serde(default)]
    pub transformation: String,
    #[serde(default)]
    pub conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSummary {
    pub fields: Vec<FieldProvenance>,
    pub narrative: String,
}

impl IntentSummary {
    pub fn tables(&self) -> BTreeSet<String> {
        self.fields
            .iter()
            .flat_map(|f| f.source_tables.iter().cloned())
            .collect()
    }

    /// Plain-text rendering used inside prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, f) in self.fields.iter().enumerate() {
            let tables: Vec<&str> = f.source_tables.iter().map(String::as_str).collect();
            out.push_str(&format!("{}. {} <- {{{}}}", i + 1, f.output_name, tables.join(", ")));
            if !f.transformation.is_empty() {
                out.push_str(&format!("; {}", f.transformation));
            }
            if !f.conditions.is_empty() {
                out.push_str(&format!("; where {}", f.conditions.join(" and ")));
            }
            out.push('\n');
        }
        out.push_str(self.narrative.trim());
        out.trim_end().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub verdict: Verdict,
    pub confidence: f64,
    /// 1-based (left, right) output positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_mapping: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<String>,
    /// Why the pair was decided without the alignment stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl EquivalenceVerdict {
    fn rejected(reason: String) -> Self {
        EquivalenceVerdict {
            verdict: Verdict::NotEquivalent,
            confidence: 1.0,
            field_mapping: None,
            counterexample: None,
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("only SELECT queries can be verified: {0}")]
    UnsupportedStatement(String),
    #[error("query cannot be decomposed: {0}")]
    UnparseableQuery(String),
    #[error("unusable LLM response for {template}: {detail}")]
    RejectedResponse { template: String, detail: String },
}

impl From<FragmentError> for VerifyError {
    fn from(e: FragmentError) -> Self {
        VerifyError::UnparseableQuery(e.to_string())
    }
}

fn rejected(template: TemplateId, detail: impl Into<String>) -> VerifyError {
    VerifyError::RejectedResponse {
        template: template.to_string(),
        detail: detail.into(),
    }
}

const WRITE_KEYWORDS: [&str; 7] = ["INSERT", "UPDATE", "DELETE", "CREATE", "DROP", "ALTER", "SET"];

/// Rejects anything that is not a read-only SELECT (optionally behind WITH).
pub fn ensure_select(query: &str) -> Result<(), VerifyError> {
    let toks = tokenize(query);
    let first = toks.iter().find(|t| t.kind != crate::lexer::TokenKind::LParen);
    let head = first.and_then(|t| t.keyword()).unwrap_or("");
    if head != "SELECT" && head != "WITH" {
        let shown = first.map(|t| t.text(query)).unwrap_or("");
        return Err(VerifyError::UnsupportedStatement(format!(
            "statement starts with `{shown}`"
        )));
    }
    if let Some(kw) = toks
        .iter()
        .filter_map(|t| t.keyword())
        .find(|k| WRITE_KEYWORDS.contains(k))
    {
        return Err(VerifyError::UnsupportedStatement(format!("statement contains {kw}")));
    }
    Ok(())
}

/// A parsed SELECT with its structure, reused across the verification stages.
pub struct Analyzed {
    pub tree: FragmentTree,
    pub qs: QueryStructure,
}

impl Analyzed {
    pub fn new(query: &str) -> Result<Self, VerifyError> {
        ensure_select(query)?;
        let tree = decompose(query)?;
        let qs = QueryStructure::analyze(&tree);
        Ok(Analyzed { tree, qs })
    }

    /// Output arity of the outermost SELECT, unknown when it projects `*`.
    pub fn arity(&self) -> Option<usize> {
        let root = self.qs.get(self.tree.root_id);
        (!root.select_items.iter().any(|s| s.is_star)).then_some(root.select_items.len())
    }

    fn subtree_tables(&self, id: usize, seen: &mut BTreeSet<usize>) -> BTreeSet<String> {
        if !seen.insert(id) {
            return BTreeSet::new();
        }
        let mut out = BTreeSet::new();
        for input in &self.qs.get(id).from_inputs {
            if let InputSource::Table(t) = &input.source {
                match self.qs.ctes.get(t) {
                    Some(&cte) => out.extend(self.subtree_tables(cte, seen)),
                    None => {
                        out.insert(t.clone());
                    }
                }
            }
        }
        for child in self.tree.children(id) {
            out.extend(self.subtree_tables(child.id, seen));
        }
        out
    }

    /// Maps a table name as written by the LLM to base tables: CTE names
    /// expand to the tables their body reads, aliases to their table.
    pub fn resolve_table(&self, name: &str) -> BTreeSet<String> {
        let key = name.trim().trim_matches(|c| c == '"' || c == '`').to_ascii_lowercase();
        if let Some(&cte) = self.qs.ctes.get(&key) {
            return self.subtree_tables(cte, &mut BTreeSet::new());
        }
        for f in &self.qs.fragments {
            for input in &f.from_inputs {
                if input.alias.as_deref() == Some(key.as_str()) {
                    match &input.source {
                        InputSource::Table(t) => {
                            return match self.qs.ctes.get(t) {
                                Some(&cte) => self.subtree_tables(cte, &mut BTreeSet::new()),
                                None => BTreeSet::from([t.clone()]),
                            }
                        }
                        InputSource::Fragment(id) => return self.subtree_tables(*id, &mut BTreeSet::new()),
                        InputSource::Unknown => {}
                    }
                }
            }
        }
        BTreeSet::from([key])
    }

    /// Field list derived from the parse alone: names from the projection,
    /// every base table of the query as the source.
    pub fn structural_summary(&self) -> IntentSummary {
        let tables = self.qs.base_tables();
        let fields = self
            .qs
            .get(self.tree.root_id)
            .select_items
            .iter()
            .map(|s| FieldProvenance {
                output_name: s.alias.clone().unwrap_or_else(|| normalize(&s.text)),
                source_tables: tables.clone(),
                transformation: String::new(),
                conditions: Vec::new(),
            })
            .collect();
        IntentSummary {
            fields,
            narrative: String::new(),
        }
    }
}

pub fn intent_prompt(fragment_text: &str, children: &str) -> PromptEnvelope {
    PromptEnvelope::with_slots(
        TemplateId::IntentExtract,
        [
            ("fragment", fragment_text.to_string()),
            ("children", children.to_string()),
        ],
    )
}

#[derive(Deserialize)]
struct IntentReply {
    #[serde(default)]
    fields: Vec<FieldReply>,
    #[serde(default)]
    narrative: String,
}

#[derive(Deserialize)]
struct FieldReply {
    #[serde(default)]
    output_name: String,
    #[serde(default)]
    source_tables: Vec<String>,
    #[serde(default)]
    transformation: String,
    #[serde(default)]
    conditions: Vec<String>,
}

/// Summaries of every fragment, keyed by id, built innermost first.
pub fn extract_fragment_intents(
    a: &Analyzed,
    llm: &dyn LlmProvider,
) -> Result<BTreeMap<usize, IntentSummary>, VerifyError> {
    let mut done: BTreeMap<usize, IntentSummary> = BTreeMap::new();
    for frag in &a.tree.fragments {
        let children = a
            .tree
            .children(frag.id)
            .map(|c| format!("Fragment {}:\n{}", c.id, done[&c.id].render()))
            .collect::<Vec<_>>()
            .join("\n");
        let reply = llm.complete(&intent_prompt(&frag.text, &children))?;
        let value = extract_json(&reply).ok_or_else(|| rejected(TemplateId::IntentExtract, "no JSON found"))?;
        let parsed: IntentReply =
            serde_json::from_value(value).map_err(|e| rejected(TemplateId::IntentExtract, e.to_string()))?;
        let fields = parsed
            .fields
            .into_iter()
            .map(|f| FieldProvenance {
                output_name: f.output_name,
                source_tables: f.source_tables.iter().flat_map(|t| a.resolve_table(t)).collect(),
                transformation: f.transformation,
                conditions: f.conditions,
            })
            .collect();
        done.insert(
            frag.id,
            IntentSummary {
                fields,
                narrative: parsed.narrative,
            },
        );
    }
    Ok(done)
}

/// Intent of the whole query. An LLM answer with no fields falls back to
/// the structural summary; one with the wrong number of fields is rejected.
pub fn extract_intent_analyzed(a: &Analyzed, llm: &dyn LlmProvider) -> Result<IntentSummary, VerifyError> {
    let mut all = extract_fragment_intents(a, llm)?;
    let mut main = all.remove(&a.tree.root_id).expect("root summary");
    if main.fields.is_empty() {
        let narrative = std::mem::take(&mut main.narrative);
        main = a.structural_summary();
        main.narrative = narrative;
    }
    if let Some(n) = a.arity() {
        if main.fields.len() != n {
            return Err(rejected(
                TemplateId::IntentExtract,
                format!("summary has {} fields, query projects {n}", main.fields.len()),
            ));
        }
    }
    Ok(main)
}

pub fn extract_intent(query: &str, llm: &dyn LlmProvider) -> Result<IntentSummary, VerifyError> {
    extract_intent_analyzed(&Analyzed::new(query)?, llm)
}

/// Rejects pairs whose field counts or source-table sets differ.
pub fn prefilter(a: &IntentSummary, b: &IntentSummary) -> Option<EquivalenceVerdict> {
    if a.fields.len() != b.fields.len() {
        return Some(EquivalenceVerdict::rejected(format!(
            "output arity differs: {} vs {}",
            a.fields.len(),
            b.fields.len()
        )));
    }
    table_mismatch(&a.tables(), &b.tables())
}

fn table_mismatch(ta: &BTreeSet<String>, tb: &BTreeSet<String>) -> Option<EquivalenceVerdict> {
    if ta == tb {
        return None;
    }
    let only_a: Vec<&str> = ta.difference(tb).map(String::as_str).collect();
    let only_b: Vec<&str> = tb.difference(ta).map(String::as_str).collect();
    Some(EquivalenceVerdict::rejected(format!(
        "source tables differ: only left {{{}}}, only right {{{}}}",
        only_a.join(", "),
        only_b.join(", ")
    )))
}

/// The same checks on the parse alone; needs no provider. Arity is skipped
/// when either side projects `*`.
pub fn structural_prefilter(a: &Analyzed, b: &Analyzed) -> Option<EquivalenceVerdict> {
    if let (Some(x), Some(y)) = (a.arity(), b.arity()) {
        if x != y {
            return Some(EquivalenceVerdict::rejected(format!(
                "output arity differs: {x} vs {y}"
            )));
        }
    }
    table_mismatch(&a.qs.base_tables(), &b.qs.base_tables())
}

pub fn alignment_prompt(
    left: &str,
    left_intent: &IntentSummary,
    right: &str,
    right_intent: &IntentSummary,
) -> PromptEnvelope {
    let side = |sql: &str, intent: &IntentSummary| format!("{}\n\nIntent:\n{}", sql.trim(), intent.render());
    PromptEnvelope::with_slots(
        TemplateId::Alignment,
        [("left", side(left, left_intent)), ("right", side(right, right_intent))],
    )
}

#[derive(Deserialize)]
struct AlignmentEntry {
    left: usize,
    right: usize,
    #[serde(default)]
    equivalent: bool,
    #[serde(default)]
    confidence: f64,
}

#[derive(Deserialize)]
struct AlignmentReply {
    #[serde(default)]
    mapping: Vec<AlignmentEntry>,
    #[serde(default)]
    counterexample: Option<String>,
}

/// Turns an alignment answer over `n` output columns into a verdict.
fn judge(reply: AlignmentReply, n: usize, floor: f64) -> EquivalenceVerdict {
    let counterexample = reply.counterexample.filter(|c| !c.trim().is_empty());
    let confs: Vec<f64> = reply.mapping.iter().map(|m| m.confidence.clamp(0.0, 1.0)).collect();
    let min_conf = confs.iter().copied().fold(f64::INFINITY, f64::min);
    let min_conf = if min_conf.is_finite() { min_conf } else { 0.0 };

    let lefts: BTreeSet<usize> = reply.mapping.iter().map(|m| m.left).collect();
    let rights: BTreeSet<usize> = reply.mapping.iter().map(|m| m.right).collect();
    let full: BTreeSet<usize> = (1..=n).collect();
    let bijection = reply.mapping.len() == n && lefts == full && rights == full;
    let pairs: Vec<(usize, usize)> = reply.mapping.iter().map(|m| (m.left, m.right)).collect();

    if let Some(cx) = counterexample {
        let against = reply
            .mapping
            .iter()
            .filter(|m| !m.equivalent)
            .map(|m| m.confidence.clamp(0.0, 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        return EquivalenceVerdict {
            verdict: Verdict::NotEquivalent,
            confidence: if against.is_finite() { against } else { min_conf },
            field_mapping: bijection.then_some(pairs),
            counterexample: Some(cx),
            reason: None,
        };
    }
    let all_hold = reply.mapping.iter().all(|m| m.equivalent && m.confidence >= floor);
    let verdict = if bijection && all_hold {
        Verdict::Equivalent
    } else {
        Verdict::Undecided
    };
    EquivalenceVerdict {
        verdict,
        confidence: min_conf,
        field_mapping: bijection.then_some(pairs),
        counterexample: None,
        reason: (verdict == Verdict::Undecided).then(|| {
            if bijection {
                "some columns are unconfirmed or below the confidence floor".to_string()
            } else {
                "the alignment does not map every column both ways".to_string()
            }
        }),
    }
}

/// Full verification. Identical normal forms short-circuit, structurally
/// mismatched pairs are rejected without provider calls.
pub fn check_equivalence(
    a: &str,
    b: &str,
    llm: &dyn LlmProvider,
    floor: f64,
) -> Result<EquivalenceVerdict, VerifyError> {
    let left = Analyzed::new(a)?;
    let right = Analyzed::new(b)?;
    if normalize(a) == normalize(b) {
        let n = left.arity().unwrap_or(0);
        return Ok(EquivalenceVerdict {
            verdict: Verdict::Equivalent,
            confidence: 1.0,
            field_mapping: Some((1..=n).map(|i| (i, i)).collect()),
            counterexample: None,
            reason: Some("identical after normalisation".into()),
        });
    }
    if let Some(v) = structural_prefilter(&left, &right) {
        return Ok(v);
    }
    let li = extract_intent_analyzed(&left, llm)?;
    let ri = extract_intent_analyzed(&right, llm)?;
    if let Some(v) = prefilter(&li, &ri) {
        return Ok(v);
    }
    let reply = llm.complete(&alignment_prompt(a, &li, b, &ri))?;
    let value = extract_json(&reply).ok_or_else(|| rejected(TemplateId::Alignment, "no JSON found"))?;
    let parsed: AlignmentReply =
        serde_json::from_value(value).map_err(|e| rejected(TemplateId::Alignment, e.to_string()))?;
    Ok(judge(parsed, li.fields.len(), floor))
}
