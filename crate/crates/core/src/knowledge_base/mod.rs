//! Per-tool knowledge: rules, historical cases and error strategies.
//!
//! Rules are matched exactly, by structural [`Matcher`]s over a fragment.
//! Historical cases are retrieved by cosine similarity between template
//! embeddings and then filtered by their rule tags. Error strategies are
//! retrieved by similarity between masked error messages.
//!
//! A [`KnowledgeSnapshot`] is immutable once shared; writers clone it,
//! mutate the clone and publish the result.

mod matcher;
mod seed;
mod store;
mod template;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{EmbeddingProvider, ProviderError};
use crate::self_learning::CandidateRuleBatch;
use crate::structure::QueryStructure;

pub use matcher::{Matcher, Predicate};
pub use seed::{seed_rules, seed_strategy_specs, seed_time, StrategySpec};
pub use store::SCHEMA_VERSION;
pub use template::templatize;

pub const DEFAULT_CASE_K: usize = 5;
pub const DEFAULT_STRATEGY_THRESHOLD: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ToolId {
    Rewriter,
    Corrector,
    Modifier,
    Verifier,
}

impl ToolId {
    pub const ALL: [ToolId; 4] = [ToolId::Rewriter, ToolId::Corrector, ToolId::Modifier, ToolId::Verifier];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolId::Rewriter => "REWRITER",
            ToolId::Corrector => "CORRECTOR",
            ToolId::Modifier => "MODIFIER",
            ToolId::Verifier => "VERIFIER",
        }
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ToolId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown tool `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleStatus {
    Candidate,
    Verified,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEntry {
    /// Unique label such as `IN(SELECT)`.
    pub index: String,
    pub description: String,
    /// `None` for rules that only serve as prompt guidance.
    pub matcher: Option<Matcher>,
    pub tool: ToolId,
    pub status: RuleStatus,
    pub created_at: DateTime<Utc>,
    pub verified_at: Option<DateTime<Utc>>,
}

impl RuleEntry {
    pub fn is_live(&self) -> bool {
        matches!(self.status, RuleStatus::Candidate | RuleStatus::Verified)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalCase {
    pub index: String,
    pub tool: ToolId,
    pub details: String,
    /// Labels of the rules this case illustrates.
    pub tag: Vec<String>,
    pub template: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStrategy {
    pub index: String,
    /// Masked error key this strategy answers.
    pub message_pattern: String,
    pub needs_schema: bool,
    pub localized: bool,
    pub guidance: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolStats {
    pub last_update: Option<DateTime<Utc>>,
    /// Seconds between consecutive verified updates.
    pub update_intervals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KnowledgeSnapshot {
    pub rules: Vec<RuleEntry>,
    pub cases: Vec<HistoricalCase>,
    pub strategies: Vec<ErrorStrategy>,
    pub stats: BTreeMap<ToolId, ToolStats>,
    /// Candidate batches awaiting expert verification.
    pub pending: Vec<CandidateRuleBatch>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KbError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("malformed record in {file} line {line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("duplicate index `{0}`")]
    DuplicateIndex(String),
    #[error("case tag `{0}` does not name a rule")]
    UnknownTag(String),
    #[error("invalid entry: {0}")]
    Invalid(String),
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, KbError> {
    if a.len() != b.len() {
        return Err(KbError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(KbError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

impl KnowledgeSnapshot {
    /// Built-in rules, strategies and no cases.
    pub fn seeded(embedder: &dyn EmbeddingProvider) -> Result<Self, KbError> {
        let mut kb = KnowledgeSnapshot::default();
        for rule in seed_rules() {
            kb.add_rule(rule)?;
        }
        for spec in seed_strategy_specs() {
            kb.add_strategy(spec, embedder)?;
        }
        Ok(kb)
    }

    pub fn rule(&self, tool: ToolId, index: &str) -> Option<&RuleEntry> {
        self.rules
            .iter()
            .find(|r| r.tool == tool && r.index == index && r.is_live())
    }

    /// Number of verified rules for `tool`.
    pub fn n_current(&self, tool: ToolId) -> usize {
        self.rules
            .iter()
            .filter(|r| r.tool == tool && r.status == RuleStatus::Verified)
            .count()
    }

    pub fn pending_count(&self, tool: ToolId) -> usize {
        self.rules
            .iter()
            .filter(|r| r.tool == tool && r.status == RuleStatus::Candidate)
            .count()
    }

    pub fn add_rule(&mut self, rule: RuleEntry) -> Result<(), KbError> {
        if rule.index.trim().is_empty() {
            return Err(KbError::Invalid("rule index is empty".into()));
        }
        if rule.is_live() && self.rule(rule.tool, &rule.index).is_some() {
            return Err(KbError::DuplicateIndex(rule.index));
        }
        self.rules.push(rule);
        Ok(())
    }

    /// Stores a case for `sql`, computing its template and embedding.
    pub fn add_case(
        &mut self,
        index: &str,
        tool: ToolId,
        details: &str,
        tags: Vec<String>,
        sql: &str,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<(), KbError> {
        if self.cases.iter().any(|c| c.index == index) {
            return Err(KbError::DuplicateIndex(index.to_string()));
        }
        if let Some(missing) = tags.iter().find(|t| self.rule(tool, t).is_none()) {
            return Err(KbError::UnknownTag(missing.clone()));
        }
        let template = templatize(sql);
        let embedding = embedder.embed(&template)?;
        self.cases.push(HistoricalCase {
            index: index.to_string(),
            tool,
            details: details.to_string(),
            tag: tags,
            template,
            embedding,
        });
        Ok(())
    }

    pub fn add_strategy(&mut self, spec: StrategySpec, embedder: &dyn EmbeddingProvider) -> Result<(), KbError> {
        if spec.guidance.trim().is_empty() {
            return Err(KbError::Invalid(format!("strategy `{}` has no guidance", spec.index)));
        }
        if self.strategies.iter().any(|s| s.index == spec.index) {
            return Err(KbError::DuplicateIndex(spec.index));
        }
        let embedding = embedder.embed(&spec.message_pattern)?;
        self.strategies.push(ErrorStrategy {
            index: spec.index,
            message_pattern: spec.message_pattern,
            needs_schema: spec.needs_schema,
            localized: spec.localized,
            guidance: spec.guidance,
            embedding,
        });
        Ok(())
    }

    /// Verified rules of `tool` whose matcher holds on `fragment_id`, ordered
    /// by index label.
    pub fn match_rules(&self, qs: &QueryStructure, fragment_id: usize, tool: ToolId) -> Vec<&RuleEntry> {
        let mut hits: Vec<&RuleEntry> = self
            .rules
            .iter()
            .filter(|r| r.tool == tool && r.status == RuleStatus::Verified)
            .filter(|r| r.matcher.as_ref().is_some_and(|m| m.matches(qs, fragment_id)))
            .collect();
        hits.sort_by(|a, b| a.index.cmp(&b.index));
        hits
    }

    /// Top-`k` cases of `tool` by template similarity to `query`, restricted
    /// to cases sharing a tag with `tag_filter` when one is given. Ties are
    /// broken by case index.
    pub fn retrieve_cases(
        &self,
        query: &str,
        tool: ToolId,
        tag_filter: Option<&[String]>,
        k: usize,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<Vec<(&HistoricalCase, f64)>, KbError> {
        let candidates: Vec<&HistoricalCase> = self
            .cases
            .iter()
            .filter(|c| c.tool == tool)
            .filter(|c| tag_filter.is_none_or(|tags| c.tag.iter().any(|t| tags.contains(t))))
            .collect();
        if candidates.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let probe = embedder.embed(&templatize(query))?;
        let mut scored = candidates
            .into_iter()
            .map(|c| Ok((c, cosine_similarity(&probe, &c.embedding)?)))
            .collect::<Result<Vec<_>, KbError>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.index.cmp(&b.0.index)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Nearest strategy to `error_key`, if its similarity reaches `threshold`.
    pub fn retrieve_strategy(
        &self,
        error_key: &str,
        threshold: f64,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<Option<(&ErrorStrategy, f64)>, KbError> {
        if self.strategies.is_empty() {
            return Ok(None);
        }
        let probe = embedder.embed(error_key)?;
        let mut best: Option<(&ErrorStrategy, f64)> = None;
        for s in &self.strategies {
            let sim = cosine_similarity(&probe, &s.embedding)?;
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((s, sim));
            }
        }
        Ok(best.filter(|(_, sim)| *sim >= threshold))
    }

    pub(crate) fn stats_mut(&mut self, tool: ToolId) -> &mut ToolStats {
        self.stats.entry(tool).or_default()
    }

    pub fn verify_integrity(&self) -> Result<(), KbError> {
        for case in &self.cases {
            if let Some(t) = case.tag.iter().find(|t| self.rule(case.tool, t).is_none()) {
                return Err(KbError::UnknownTag(t.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::NESTED_REPORT;
    use crate::fragmenter::decompose;
    use crate::providers::HashingEmbedder;

    #[test]
    fn cosine_closed_forms() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(KbError::DimensionMismatch(1, 2))
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(KbError::ZeroVector));
    }

    #[test]
    fn seed_rules_on_nested_report() {
        let kb = KnowledgeSnapshot::seeded(&HashingEmbedder::default()).unwrap();
        let tree = decompose(NESTED_REPORT).unwrap();
        let qs = QueryStructure::analyze(&tree);
        let labels = |id| -> Vec<&str> {
            kb.match_rules(&qs, id, ToolId::Rewriter)
                .iter()
                .map(|r| r.index.as_str())
                .collect()
        };
        for id in [1, 2, 3, 5, 6] {
            assert!(labels(id).is_empty(), "fragment {id}: {:?}", labels(id));
        }
        assert_eq!(labels(4), ["SAME_TABLE_JOIN"]);
        assert_eq!(labels(7), ["LEFT_JOIN_IS_NOT_NULL"]);
    }

    #[test]
    fn retrieval_on_empty_store() {
        let kb = KnowledgeSnapshot::default();
        let e = HashingEmbedder::default();
        assert!(kb
            .retrieve_cases("SELECT 1", ToolId::Rewriter, None, 5, &e)
            .unwrap()
            .is_empty());
        assert!(kb.retrieve_strategy("anything", 0.5, &e).unwrap().is_none());
    }

    #[test]
    fn own_template_ranks_first() {
        let e = HashingEmbedder::default();
        let mut kb = KnowledgeSnapshot::seeded(&e).unwrap();
        kb.add_case(
            "c1",
            ToolId::Rewriter,
            "self join",
            vec!["SAME_TABLE_JOIN".into()],
            NESTED_REPORT,
            &e,
        )
        .unwrap();
        kb.add_case("c2", ToolId::Rewriter, "other", vec![], "SELECT a FROM t", &e)
            .unwrap();
        let hits = kb.retrieve_cases(NESTED_REPORT, ToolId::Rewriter, None, 5, &e).unwrap();
        assert_eq!(hits[0].0.index, "c1");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
        let filtered = kb
            .retrieve_cases(
                "SELECT a FROM t",
                ToolId::Rewriter,
                Some(&["SAME_TABLE_JOIN".into()]),
                5,
                &e,
            )
            .unwrap();
        assert_eq!(filtered.len(), 1);
        assert_eq!(filtered[0].0.index, "c1");
    }

    #[test]
    fn case_tags_must_resolve() {
        let e = HashingEmbedder::default();
        let mut kb = KnowledgeSnapshot::seeded(&e).unwrap();
        let err = kb.add_case("c", ToolId::Rewriter, "d", vec!["NOPE".into()], "SELECT 1", &e);
        assert_eq!(err, Err(KbError::UnknownTag("NOPE".into())));
    }

    #[test]
    fn live_rule_labels_are_unique() {
        let mut kb = KnowledgeSnapshot::default();
        let rule = seed_rules().remove(0);
        kb.add_rule(rule.clone()).unwrap();
        assert!(matches!(kb.add_rule(rule.clone()), Err(KbError::DuplicateIndex(_))));
        kb.add_rule(RuleEntry {
            status: RuleStatus::Retired,
            ..rule
        })
        .unwrap();
    }

    #[test]
    fn strategies_need_guidance() {
        let e = HashingEmbedder::default();
        let mut kb = KnowledgeSnapshot::default();
        let spec = StrategySpec {
            index: "x".into(),
            message_pattern: "boom".into(),
            needs_schema: false,
            localized: false,
            guidance: " ".into(),
        };
        assert!(matches!(kb.add_strategy(spec, &e), Err(KbError::Invalid(_))));
    }
}
