use serde::{Deserialize, Serialize};

use crate::knowledge_base::ToolId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntentHint {
    Efficiency,
    Semantic,
}

/// A SQL problem as reported by a user or an upstream system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<IntentHint>,
    /// Text around `sql` when it is part of a larger script.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    /// Second query, for equivalence checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
}

const PERFORMANCE_WORDS: &[&str] = &[
    "slow",
    "slower",
    "faster",
    "fast",
    "speed",
    "speedup",
    "performance",
    "efficient",
    "efficiency",
    "inefficient",
    "latency",
    "runtime",
    "expensive",
    "cost",
    "costly",
    "timeout",
];

/// Whether `request` talks about execution speed.
pub fn mentions_performance(request: &str) -> bool {
    let lower = request.to_lowercase();
    if lower.contains("execution time") || lower.contains("run time") || lower.contains("takes too long") {
        return true;
    }
    lower
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| PERFORMANCE_WORDS.contains(&w) || w.starts_with("optimi") || w.starts_with("speed"))
}

/// Picks the tool for an issue. An error log always wins; an explicit hint
/// beats the wording of the request.
pub fn route(issue: &Issue) -> ToolId {
    if issue.error_log.as_deref().is_some_and(|l| !l.trim().is_empty()) {
        return ToolId::Corrector;
    }
    match issue.hint {
        Some(IntentHint::Efficiency) => ToolId::Rewriter,
        Some(IntentHint::Semantic) => ToolId::Modifier,
        None if issue.request.as_deref().is_some_and(mentions_performance) => ToolId::Rewriter,
        None => ToolId::Modifier,
    }
}
