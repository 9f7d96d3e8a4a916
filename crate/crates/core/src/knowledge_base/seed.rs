use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Matcher, RuleEntry, RuleStatus, ToolId};
use crate::corrector::error_key;

const REWRITER_RULES: &str = include_str!("../../seeds/rewriter_rules.jsonl");
const STRATEGIES: &str = include_str!("../../seeds/strategies.jsonl");

/// Creation time stamped on built-in entries.
pub fn seed_time() -> DateTime<Utc> {
    DateTime::from_timestamp(1_704_067_200, 0).expect("valid timestamp")
}

#[derive(Deserialize)]
struct SeedRule {
    index: String,
    description: String,
    matcher: Matcher,
}

/// Input for a new error strategy. `message_pattern` is an error key as
/// produced by [`crate::corrector::error_key`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub index: String,
    pub message_pattern: String,
    pub needs_schema: bool,
    pub localized: bool,
    pub guidance: String,
}

#[derive(Deserialize)]
struct SeedStrategy {
    index: String,
    sample_log: String,
    needs_schema: bool,
    localized: bool,
    guidance: String,
}

pub fn seed_rules() -> Vec<RuleEntry> {
    REWRITER_RULES
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let s: SeedRule = serde_json::from_str(l).expect("built-in rule parses");
            RuleEntry {
                index: s.index,
                description: s.description,
                matcher: Some(s.matcher),
                tool: ToolId::Rewriter,
                status: RuleStatus::Verified,
                created_at: seed_time(),
                verified_at: Some(seed_time()),
            }
        })
        .collect()
}

/// Built-in strategies, keyed by the error key of a sample log.
pub fn seed_strategy_specs() -> Vec<StrategySpec> {
    STRATEGIES
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let s: SeedStrategy = serde_json::from_str(l).expect("built-in strategy parses");
            StrategySpec {
                index: s.index,
                message_pattern: error_key(&s.sample_log),
                needs_schema: s.needs_schema,
                localized: s.localized,
                guidance: s.guidance,
            }
        })
        .collect()
}
