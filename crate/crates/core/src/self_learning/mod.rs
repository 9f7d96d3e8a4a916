//! Knowledge-base growth: candidate rules are generated from problematic
//! execution records, held until an expert verifies them, and periodically
//! deduplicated by clustering their description embeddings.

mod cluster;

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::{templatize, KbError, KnowledgeSnapshot, RuleEntry, RuleStatus, ToolId};
use crate::providers::prompt::digest_of;
use crate::providers::{extract_json, EmbeddingProvider, LlmProvider, PromptEnvelope, ProviderError, TemplateId};

pub use cluster::{cluster_rules, dbscan, dedup, medoid, merge_cluster, DedupReport};

const DEMONSTRATION: &str = include_str!("../../seeds/rule_gen_demo.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub lambda: f64,
    pub beta_time: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// Percentile of batch runtimes above which a record counts as slow.
    pub slow_percentile: f64,
    /// Smallest batch for which the runtime percentile is computed.
    pub min_records_for_percentile: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            lambda: 2.5,
            beta_time: 1.3,
            dbscan_eps: 0.25,
            dbscan_min_pts: 2,
            slow_percentile: 0.9,
            min_records_for_percentile: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordStatus {
    Ok,
    Error,
    Slow,
}

impl RecordStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Ok => "OK",
            RecordStatus::Error => "ERROR",
            RecordStatus::Slow => "SLOW",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    /// Derived from the SQL text when absent.
    #[serde(default)]
    pub id: String,
    pub sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_query: Option<String>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<String>,
    pub elapsed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_digest: Option<String>,
}

impl ExecutionRecord {
    pub fn new(sql: &str, status: RecordStatus, elapsed: f64) -> Self {
        let mut r = ExecutionRecord {
            id: String::new(),
            sql: sql.to_string(),
            user_query: None,
            status,
            error_log: None,
            elapsed,
            result_digest: None,
        };
        r.ensure_id();
        r
    }

    pub fn ensure_id(&mut self) {
        if self.id.is_empty() {
            self.id = format!("rec-{}", &digest_of(&self.sql)[..12]);
        }
    }

    pub fn validate(&self) -> Result<(), LearningError> {
        if self.status == RecordStatus::Error && self.error_log.as_deref().is_none_or(|l| l.trim().is_empty()) {
            return Err(LearningError::InvalidRecord(format!(
                "{}: ERROR without error_log",
                self.id
            )));
        }
        if !self.elapsed.is_finite() || self.elapsed < 0.0 {
            return Err(LearningError::InvalidRecord(format!("{}: bad elapsed", self.id)));
        }
        Ok(())
    }

    fn outputs_text(&self) -> String {
        let mut out = format!("status: {}, elapsed: {}s", self.status.as_str(), self.elapsed);
        if let Some(log) = &self.error_log {
            out.push_str(&format!("\nerror log: {}", log.trim()));
        }
        if let Some(d) = &self.result_digest {
            out.push_str(&format!("\nresult: {d}"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRuleBatch {
    pub id: String,
    pub tool: ToolId,
    pub rules: Vec<RuleEntry>,
    pub source_records: Vec<String>,
    /// The records themselves, turned into cases when a rule is accepted.
    pub records: Vec<ExecutionRecord>,
    pub generated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("rule generation response is not a JSON object: {0}")]
    RejectedResponse(String),
    #[error("no update history")]
    NoHistory,
    #[error("decision for unknown rule `{0}`")]
    UnknownRule(String),
    #[error("no pending batch `{0}`")]
    UnknownBatch(String),
    #[error("nothing to learn from")]
    EmptyInput,
    #[error("invalid execution record: {0}")]
    InvalidRecord(String),
}

/// Linear-interpolation percentile of `values` (`q` in `[0, 1]`).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Keeps failed, slow-flagged and unusually long-running records, one per
/// query template (first occurrence wins).
pub fn filter_records(records: &[ExecutionRecord], cfg: &LearningConfig) -> Vec<ExecutionRecord> {
    let slow_cut = if records.len() >= cfg.min_records_for_percentile {
        let times: Vec<f64> = records.iter().map(|r| r.elapsed).collect();
        percentile(&times, cfg.slow_percentile)
    } else {
        None
    };
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| {
            matches!(r.status, RecordStatus::Error | RecordStatus::Slow) || slow_cut.is_some_and(|cut| r.elapsed > cut)
        })
        .filter(|r| seen.insert(templatize(&r.sql)))
        .cloned()
        .collect()
}

/// Rule-generation prompt for `records`.
pub fn rule_gen_prompt(records: &[ExecutionRecord]) -> PromptEnvelope {
    let numbered = |f: &dyn Fn(&ExecutionRecord) -> String| {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| format!("[{}] {}", i + 1, f(r)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let question = numbered(&|r| match &r.user_query {
        Some(q) => format!("{}\n    intent: {}", r.sql.trim(), q.trim()),
        None => r.sql.trim().to_string(),
    });
    let outputs = numbered(&|r| r.outputs_text());
    PromptEnvelope::with_slots(
        TemplateId::RuleGen,
        [
            ("demonstrations", DEMONSTRATION.trim_end().to_string()),
            ("question", question),
            ("outputs", outputs),
        ],
    )
}

fn parse_rule_json(text: &str) -> Option<Vec<(String, String)>> {
    let value = extract_json(text)?;
    let obj = value.as_object()?;
    Some(
        obj.iter()
            .filter(|(k, _)| !k.trim().is_empty())
            .map(|(k, v)| {
                let desc = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.trim().to_string(), desc)
            })
            .collect(),
    )
}

/// Asks the LLM for rules explaining `records`. A malformed reply is retried
/// once.
pub fn generate_rules(
    records: &[ExecutionRecord],
    tool: ToolId,
    llm: &dyn LlmProvider,
    now: DateTime<Utc>,
) -> Result<CandidateRuleBatch, LearningError> {
    if records.is_empty() {
        return Err(LearningError::EmptyInput);
    }
    let mut records = records.to_vec();
    for r in &mut records {
        r.ensure_id();
        r.validate()?;
    }
    let prompt = rule_gen_prompt(&records);
    let mut reply = llm.complete(&prompt)?;
    let mut parsed = parse_rule_json(&reply);
    if parsed.is_none() {
        reply = llm.complete(&prompt)?;
        parsed = parse_rule_json(&reply);
    }
    let pairs = parsed.ok_or_else(|| LearningError::RejectedResponse(reply.chars().take(200).collect()))?;
    let rules = pairs
        .into_iter()
        .map(|(index, description)| RuleEntry {
            index,
            description,
            matcher: None,
            tool,
            status: RuleStatus::Candidate,
            created_at: now,
            verified_at: None,
        })
        .collect();
    let source_records: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let id = format!(
        "batch-{}",
        &digest_of(&format!("{}|{}", source_records.join(","), now.to_rfc3339()))[..12]
    );
    Ok(CandidateRuleBatch {
        id,
        tool,
        rules,
        source_records,
        records,
        generated_at: now,
    })
}

/// `⌊λ·√n⌋`.
pub fn count_threshold(n_current: usize, cfg: &LearningConfig) -> usize {
    (cfg.lambda * (n_current as f64).sqrt()).floor() as usize
}

/// `β · mean(intervals)`, in the intervals' unit.
pub fn time_threshold(intervals: &[f64], cfg: &LearningConfig) -> Result<f64, LearningError> {
    if intervals.is_empty() {
        return Err(LearningError::NoHistory);
    }
    Ok(cfg.beta_time * intervals.iter().sum::<f64>() / intervals.len() as f64)
}

pub fn should_trigger_verification(
    pending_count: usize,
    elapsed_since_update: f64,
    n_current: usize,
    intervals: &[f64],
    cfg: &LearningConfig,
) -> bool {
    let by_count = pending_count > count_threshold(n_current, cfg);
    let by_time = time_threshold(intervals, cfg).is_ok_and(|t2| elapsed_since_update > t2);
    by_count || by_time
}

/// Whether `tool`'s pending rules are due for expert review at `now`.
pub fn verification_due(kb: &KnowledgeSnapshot, tool: ToolId, now: DateTime<Utc>, cfg: &LearningConfig) -> bool {
    let stats = kb.stats.get(&tool).cloned().unwrap_or_default();
    let elapsed = stats
        .last_update
        .map_or(0.0, |t| (now - t).num_milliseconds() as f64 / 1000.0);
    should_trigger_verification(
        kb.pending_count(tool),
        elapsed,
        kb.n_current(tool),
        &stats.update_intervals,
        cfg,
    )
}

/// Adds a batch's candidates to the store. Candidates whose label is already
/// live for the tool are dropped from the batch.
pub fn stage_batch(kb: &KnowledgeSnapshot, mut batch: CandidateRuleBatch) -> Result<KnowledgeSnapshot, LearningError> {
    let mut next = kb.clone();
    let mut kept = Vec::new();
    for rule in batch.rules {
        if next.rule(rule.tool, &rule.index).is_none() {
            next.add_rule(rule.clone())?;
            kept.push(rule);
        }
    }
    batch.rules = kept;
    if !batch.rules.is_empty() {
        next.pending.push(batch);
    }
    Ok(next)
}

fn case_details(record: &ExecutionRecord, rule: &str) -> String {
    format!(
        "SQL:\n{}\nOutcome: {}\nRule: {rule}",
        record.sql.trim(),
        record.outputs_text()
    )
}

/// Applies expert decisions to one pending batch. Accepted rules become
/// verified and every source record becomes a case tagged with them;
/// rejected rules are retired; undecided ones stay pending.
pub fn apply_verification(
    kb: &KnowledgeSnapshot,
    batch_id: &str,
    decisions: &BTreeMap<String, Decision>,
    embedder: &dyn EmbeddingProvider,
    now: DateTime<Utc>,
) -> Result<KnowledgeSnapshot, LearningError> {
    let pos = kb
        .pending
        .iter()
        .position(|b| b.id == batch_id)
        .ok_or_else(|| LearningError::UnknownBatch(batch_id.to_string()))?;
    let batch = kb.pending[pos].clone();
    if let Some(unknown) = decisions.keys().find(|k| !batch.rules.iter().any(|r| &r.index == *k)) {
        return Err(LearningError::UnknownRule(unknown.clone()));
    }

    let mut next = kb.clone();
    let mut accepted_any = false;
    for (index, decision) in decisions {
        let slot = next
            .rules
            .iter_mut()
            .find(|r| r.tool == batch.tool && &r.index == index && r.status == RuleStatus::Candidate)
            .ok_or_else(|| LearningError::UnknownRule(index.clone()))?;
        match decision {
            Decision::Reject => slot.status = RuleStatus::Retired,
            Decision::Accept => {
                slot.status = RuleStatus::Verified;
                slot.verified_at = Some(now);
                accepted_any = true;
                for record in &batch.records {
                    let case_id = format!("case-{}", record.id);
                    if let Some(case) = next.cases.iter_mut().find(|c| c.index == case_id) {
                        if !case.tag.contains(index) {
                            case.tag.push(index.clone());
                        }
                    } else {
                        next.add_case(
                            &case_id,
                            batch.tool,
                            &case_details(record, index),
                            vec![index.clone()],
                            &record.sql,
                            embedder,
                        )?;
                    }
                }
            }
        }
    }

    if accepted_any {
        let stats = next.stats_mut(batch.tool);
        if let Some(prev) = stats.last_update {
            stats
                .update_intervals
                .push((now - prev).num_milliseconds() as f64 / 1000.0);
        }
        stats.last_update = Some(now);
    }

    let remaining: Vec<RuleEntry> = batch
        .rules
        .into_iter()
        .filter(|r| !decisions.contains_key(&r.index))
        .collect();
    if remaining.is_empty() {
        next.pending.remove(pos);
    } else {
        next.pending[pos].rules = remaining;
    }
    Ok(next)
}

#[cfg(test)]
mod tests;
