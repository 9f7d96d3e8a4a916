//! Two-stage query optimisation.
//!
//! Evaluation walks the fragments in analysis order. A fragment that matches
//! verified rules goes to a rule-guided prompt asking which rules really
//! apply; a fragment without matches is checked against the efficiency
//! screen and, if it fails, goes to an exploratory prompt. Rewriting then
//! sends the whole query, the actionable suggestions and similar historical
//! cases to the LLM in one call.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fragmenter::{decompose, ClauseSite, Fragment, FragmentError, FragmentTree};
use crate::knowledge_base::{KbError, KnowledgeSnapshot, ToolId, DEFAULT_CASE_K};
use crate::lexer::normalize;
use crate::providers::response::strip_fences;
use crate::providers::{extract_json, EmbeddingProvider, LlmProvider, PromptEnvelope, ProviderError, TemplateId};
use crate::sql;
use crate::structure::{FragmentStructure, QueryStructure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    RuleGuided,
    Exploratory,
    AlreadyEfficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSuggestion {
    pub fragment_id: usize,
    /// First accepted rule; `rules` lists all of them.
    pub rule_index: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<String>,
    pub action: String,
    pub rationale: String,
    pub scenario: Scenario,
}

impl RewriteSuggestion {
    fn efficient(fragment_id: usize, rationale: String) -> Self {
        RewriteSuggestion {
            fragment_id,
            rule_index: None,
            rules: Vec::new(),
            action: String::new(),
            rationale,
            scenario: Scenario::AlreadyEfficient,
        }
    }

    pub fn is_actionable(&self) -> bool {
        self.scenario != Scenario::AlreadyEfficient
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub original: String,
    pub rewritten: String,
    pub suggestions_applied: Vec<RewriteSuggestion>,
    pub cases_consulted: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<crate::verifier::EquivalenceVerdict>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewriteError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("query cannot be decomposed: {0}")]
    UnparseableQuery(String),
    #[error("unusable LLM response for {template}: {detail}")]
    RejectedResponse { template: String, detail: String },
    #[error(transparent)]
    Kb(#[from] KbError),
}

impl From<FragmentError> for RewriteError {
    fn from(e: FragmentError) -> Self {
        RewriteError::UnparseableQuery(e.to_string())
    }
}

/// Checks a fragment must pass to count as already efficient. Each failed
/// check is reported as a short phrase.
pub fn efficiency_screen(qs: &QueryStructure, fragment_id: usize) -> Vec<&'static str> {
    let f: &FragmentStructure = qs.get(fragment_id);
    let mut failed = Vec::new();
    if f.from_inputs.len() > 1 {
        failed.push("reads more than one input in FROM");
    }
    if [ClauseSite::Where, ClauseSite::Having, ClauseSite::SelectList]
        .into_iter()
        .any(|s| f.children_at(s).next().is_some())
    {
        failed.push("contains a subquery outside FROM");
    }
    if f.has_outer_join_null_filter() {
        failed.push("filters the nullable side of an outer join with IS NOT NULL");
    }
    if qs.max_same_table_scans(fragment_id) > 1 {
        failed.push("scans the same table more than once");
    }
    if f.any_star_projection {
        failed.push("projects * instead of an explicit column list");
    }
    failed
}

fn one_line(text: &str) -> String {
    normalize(text)
}

fn rejected(template: TemplateId, detail: impl Into<String>) -> RewriteError {
    RewriteError::RejectedResponse {
        template: template.to_string(),
        detail: detail.into(),
    }
}

pub fn scenario_1_prompt(fragment: &Fragment, rules: &[(&str, &str)]) -> PromptEnvelope {
    let listed = rules
        .iter()
        .map(|(idx, desc)| format!("- {idx}: {desc}"))
        .collect::<Vec<_>>()
        .join("\n");
    PromptEnvelope::with_slots(
        TemplateId::Scenario1,
        [("fragment", fragment.text.clone()), ("rules", listed)],
    )
}

pub fn scenario_2_prompt(fragment: &Fragment, failed: &[&str]) -> PromptEnvelope {
    let screen = failed.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n");
    PromptEnvelope::with_slots(
        TemplateId::Scenario2,
        [("fragment", fragment.text.clone()), ("screen", screen)],
    )
}

#[derive(Deserialize)]
struct RuleVerdict {
    rule: String,
    #[serde(default)]
    applicable: bool,
    #[serde(default)]
    action: String,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct Scenario1Reply {
    #[serde(default)]
    rules: Vec<RuleVerdict>,
}

#[derive(Deserialize)]
struct Scenario2Reply {
    efficient: bool,
    #[serde(default)]
    action: String,
    #[serde(default)]
    rationale: String,
}

fn parse_reply<T: serde::de::DeserializeOwned>(template: TemplateId, text: &str) -> Result<T, RewriteError> {
    let value = extract_json(text).ok_or_else(|| rejected(template.clone(), "no JSON found"))?;
    serde_json::from_value(value).map_err(|e| rejected(template, e.to_string()))
}

fn evaluate_fragment(
    qs: &QueryStructure,
    fragment: &Fragment,
    kb: &KnowledgeSnapshot,
    llm: &dyn LlmProvider,
) -> Result<RewriteSuggestion, RewriteError> {
    let matched = kb.match_rules(qs, fragment.id, ToolId::Rewriter);
    if !matched.is_empty() {
        let pairs: Vec<(&str, &str)> = matched
            .iter()
            .map(|r| (r.index.as_str(), r.description.as_str()))
            .collect();
        let reply: Scenario1Reply = parse_reply(
            TemplateId::Scenario1,
            &llm.complete(&scenario_1_prompt(fragment, &pairs))?,
        )?;
        // keep the knowledge-base order, ignore rules the LLM invented
        let accepted: Vec<&RuleVerdict> = matched
            .iter()
            .filter_map(|r| reply.rules.iter().find(|v| v.rule == r.index && v.applicable))
            .collect();
        if !accepted.is_empty() {
            return Ok(RewriteSuggestion {
                fragment_id: fragment.id,
                rule_index: Some(accepted[0].rule.clone()),
                rules: accepted.iter().map(|v| v.rule.clone()).collect(),
                action: accepted.iter().map(|v| v.action.trim()).collect::<Vec<_>>().join("\n"),
                rationale: accepted
                    .iter()
                    .map(|v| v.rationale.trim())
                    .collect::<Vec<_>>()
                    .join("\n"),
                scenario: Scenario::RuleGuided,
            });
        }
    }

    let failed = efficiency_screen(qs, fragment.id);
    if failed.is_empty() {
        return Ok(RewriteSuggestion::efficient(
            fragment.id,
            "passes the efficiency screen".into(),
        ));
    }
    let reply: Scenario2Reply = parse_reply(
        TemplateId::Scenario2,
        &llm.complete(&scenario_2_prompt(fragment, &failed))?,
    )?;
    if reply.efficient || reply.action.trim().is_empty() {
        return Ok(RewriteSuggestion::efficient(fragment.id, reply.rationale));
    }
    Ok(RewriteSuggestion {
        fragment_id: fragment.id,
        rule_index: None,
        rules: Vec::new(),
        action: reply.action.trim().to_string(),
        rationale: reply.rationale.trim().to_string(),
        scenario: Scenario::Exploratory,
    })
}

/// One suggestion per fragment, in analysis order.
pub fn evaluate(
    query: &str,
    kb: &KnowledgeSnapshot,
    llm: &dyn LlmProvider,
) -> Result<Vec<RewriteSuggestion>, RewriteError> {
    let tree = decompose(query)?;
    let qs = QueryStructure::analyze(&tree);
    tree.fragments
        .iter()
        .map(|f| evaluate_fragment(&qs, f, kb, llm))
        .collect()
}

pub fn rewrite_prompt(
    query: &str,
    tree: &FragmentTree,
    actionable: &[&RewriteSuggestion],
    cases: &str,
) -> PromptEnvelope {
    let suggestions = actionable
        .iter()
        .map(|s| {
            let label = if s.rules.is_empty() {
                "exploratory".to_string()
            } else {
                s.rules.join(", ")
            };
            let text = tree.get(s.fragment_id).map(|f| one_line(&f.text)).unwrap_or_default();
            format!(
                "- Fragment {} ({label}): {}\n  Fragment SQL: {text}",
                s.fragment_id, s.action
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    PromptEnvelope::with_slots(
        TemplateId::Rewrite,
        [
            ("sql", query.to_string()),
            ("suggestions", suggestions),
            ("cases", cases.to_string()),
        ],
    )
}

/// Rewrites `query` following the actionable `suggestions`.
pub fn rewrite(
    query: &str,
    suggestions: &[RewriteSuggestion],
    kb: &KnowledgeSnapshot,
    llm: &dyn LlmProvider,
    embedder: &dyn EmbeddingProvider,
    k: usize,
) -> Result<RewriteResult, RewriteError> {
    let actionable: Vec<&RewriteSuggestion> = suggestions.iter().filter(|s| s.is_actionable()).collect();
    if actionable.is_empty() {
        return Ok(RewriteResult {
            original: query.to_string(),
            rewritten: query.to_string(),
            suggestions_applied: Vec::new(),
            cases_consulted: Vec::new(),
            verified: None,
        });
    }
    let tree = decompose(query)?;

    let mut tags: Vec<String> = Vec::new();
    for t in actionable.iter().flat_map(|s| &s.rules) {
        if !tags.contains(t) {
            tags.push(t.clone());
        }
    }
    let filter = (!tags.is_empty()).then_some(tags.as_slice());
    let hits = kb.retrieve_cases(query, ToolId::Rewriter, filter, k, embedder)?;
    let cases = hits
        .iter()
        .map(|(c, sim)| {
            format!(
                "[{}] similarity {:.3}, rules {}\n{}",
                c.index,
                sim,
                c.tag.join(", "),
                c.details.trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");

    let prompt = rewrite_prompt(query, &tree, &actionable, &cases);
    let reply = llm.complete(&prompt)?;
    let rewritten = strip_fences(&reply).to_string();
    if rewritten.is_empty() {
        return Err(rejected(TemplateId::Rewrite, "empty rewrite"));
    }
    sql::validate(&rewritten)
        .map_err(|e| rejected(TemplateId::Rewrite, format!("rewritten SQL does not parse: {e}")))?;
    Ok(RewriteResult {
        original: query.to_string(),
        rewritten,
        suggestions_applied: actionable.into_iter().cloned().collect(),
        cases_consulted: hits.iter().map(|(c, _)| c.index.clone()).collect(),
        verified: None,
    })
}

/// [`evaluate`] then [`rewrite`] with the default case count.
pub fn optimize(
    query: &str,
    kb: &KnowledgeSnapshot,
    llm: &dyn LlmProvider,
    embedder: &dyn EmbeddingProvider,
) -> Result<RewriteResult, RewriteError> {
    let suggestions = evaluate(query, kb, llm)?;
    rewrite(query, &suggestions, kb, llm, embedder, DEFAULT_CASE_K)
}
