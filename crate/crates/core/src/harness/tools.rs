//! Uniform tool interface and the registry the CLI dispatches through.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::route::{route, Issue};
use crate::catalog::Catalog;
use crate::corrector::{self, CorrectError};
use crate::knowledge_base::{KnowledgeSnapshot, ToolId, DEFAULT_CASE_K};
use crate::modifier::{self, IntentCategory, ModifierConfig, ModifyError};
use crate::providers::prompt::digest_of;
use crate::providers::{EmbeddingProvider, LlmProvider};
use crate::rewriter::{self, RewriteError};
use crate::verifier::{self, Verdict, VerifyError, DEFAULT_CONFIDENCE_FLOOR};

/// Everything a tool may need besides the issue itself.
pub struct ToolContext<'a> {
    pub kb: &'a KnowledgeSnapshot,
    pub llm: &'a dyn LlmProvider,
    pub embedder: &'a dyn EmbeddingProvider,
    pub catalog: &'a Catalog,
    pub categories: &'a [IntentCategory],
    pub modifier: ModifierConfig,
    pub history_counts: BTreeMap<String, usize>,
    pub now: DateTime<Utc>,
    pub confidence_floor: f64,
    pub case_k: usize,
    /// Check rewrites for equivalence before reporting them.
    pub verify_rewrites: bool,
    pub max_rounds: usize,
}

impl<'a> ToolContext<'a> {
    pub fn new(
        kb: &'a KnowledgeSnapshot,
        llm: &'a dyn LlmProvider,
        embedder: &'a dyn EmbeddingProvider,
        catalog: &'a Catalog,
        categories: &'a [IntentCategory],
    ) -> Self {
        ToolContext {
            kb,
            llm,
            embedder,
            catalog,
            categories,
            modifier: ModifierConfig::default(),
            history_counts: BTreeMap::new(),
            now: Utc::now(),
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
            case_k: DEFAULT_CASE_K,
            verify_rewrites: false,
            max_rounds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolReport {
    pub tool: ToolId,
    /// SHA-256 of the issue's JSON form.
    pub input_digest: String,
    pub output: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies_used: Vec<String>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// The tool ran but its answer is negative (e.g. not equivalent).
    #[serde(default)]
    pub negative: bool,
}

impl ToolReport {
    fn new(tool: ToolId, issue: &Issue, output: Value) -> Self {
        ToolReport {
            tool,
            input_digest: digest_of(&serde_json::to_string(issue).expect("issue serializes")),
            output,
            rules_used: Vec::new(),
            cases_used: Vec::new(),
            strategies_used: Vec::new(),
            timings: BTreeMap::new(),
            negative: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
    #[error(transparent)]
    Modify(#[from] ModifyError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("{tool} needs {what}")]
    MissingInput { tool: ToolId, what: &'static str },
    #[error("no tool registered for {0}")]
    NotRegistered(ToolId),
}

impl ToolError {
    /// A refusal the caller should report as a negative answer rather than
    /// an operational failure.
    pub fn is_negative(&self) -> bool {
        matches!(
            self,
            ToolError::Modify(ModifyError::Rejected { .. } | ModifyError::ContractViolation { .. })
                | ToolError::Correct(CorrectError::StillInvalid { .. })
        )
    }
}

pub trait Tool: Send + Sync {
    fn id(&self) -> ToolId;
    fn run(&self, issue: &Issue, ctx: &ToolContext) -> Result<ToolReport, ToolError>;
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("tool output serializes")
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    out
}

pub struct RewriterTool;

impl Tool for RewriterTool {
    fn id(&self) -> ToolId {
        ToolId::Rewriter
    }

    fn run(&self, issue: &Issue, ctx: &ToolContext) -> Result<ToolReport, ToolError> {
        let mut t = BTreeMap::new();
        let suggestions = timed(&mut t, "evaluate", || rewriter::evaluate(&issue.sql, ctx.kb, ctx.llm))?;
        let mut result = timed(&mut t, "rewrite", || {
            rewriter::rewrite(&issue.sql, &suggestions, ctx.kb, ctx.llm, ctx.embedder, ctx.case_k)
        })?;
        if ctx.verify_rewrites {
            let verdict = timed(&mut t, "verify", || {
                verifier::check_equivalence(&result.original, &result.rewritten, ctx.llm, ctx.confidence_floor)
            })?;
            result.verified = Some(verdict);
        }
        let mut rules: Vec<String> = Vec::new();
        for s in &result.suggestions_applied {
            for r in &s.rules {
                if !rules.contains(r) {
                    rules.push(r.clone());
                }
            }
        }
        let mut report = ToolReport::new(ToolId::Rewriter, issue, to_value(&result));
        report.negative = result
            .verified
            .as_ref()
            .is_some_and(|v| v.verdict == Verdict::NotEquivalent);
        report.rules_used = rules;
        report.cases_used = result.cases_consulted.clone();
        report.timings = t;
        Ok(report)
    }
}

pub struct CorrectorTool;

impl Tool for CorrectorTool {
    fn id(&self) -> ToolId {
        ToolId::Corrector
    }

    fn run(&self, issue: &Issue, ctx: &ToolContext) -> Result<ToolReport, ToolError> {
        let log = issue.error_log.as_deref().ok_or(ToolError::MissingInput {
            tool: ToolId::Corrector,
            what: "an error log",
        })?;
        let mut t = BTreeMap::new();
        let c = timed(&mut t, "correct", || {
            corrector::fix_syntax_rounds(
                &issue.sql,
                log,
                ctx.kb,
                ctx.catalog,
                ctx.llm,
                ctx.embedder,
                ctx.max_rounds,
            )
        })?;
        let mut report = ToolReport::new(ToolId::Corrector, issue, to_value(&c));
        report.strategies_used = c.strategy.into_iter().collect();
        report.timings = t;
        Ok(report)
    }
}

pub struct ModifierTool;

impl Tool for ModifierTool {
    fn id(&self) -> ToolId {
        ToolId::Modifier
    }

    fn run(&self, issue: &Issue, ctx: &ToolContext) -> Result<ToolReport, ToolError> {
        let request = issue.request.as_deref().ok_or(ToolError::MissingInput {
            tool: ToolId::Modifier,
            what: "a request",
        })?;
        let mut t = BTreeMap::new();
        let mctx = timed(&mut t, "metadata", || {
            modifier::prepare_metadata(
                &issue.sql,
                issue.context.as_deref().unwrap_or(""),
                ctx.catalog,
                &ctx.history_counts,
                &ctx.modifier,
                ctx.now,
            )
        });
        let (classification, out) = timed(&mut t, "modify", || {
            modifier::handle_request(request, &mctx, ctx.categories, ctx.embedder, ctx.llm, &ctx.modifier)
        })?;
        let mut report = ToolReport::new(
            ToolId::Modifier,
            issue,
            serde_json::json!({ "classification": classification, "result": out }),
        );
        report.timings = t;
        Ok(report)
    }
}

pub struct VerifierTool;

impl Tool for VerifierTool {
    fn id(&self) -> ToolId {
        ToolId::Verifier
    }

    fn run(&self, issue: &Issue, ctx: &ToolContext) -> Result<ToolReport, ToolError> {
        let other = issue.candidate.as_deref().ok_or(ToolError::MissingInput {
            tool: ToolId::Verifier,
            what: "a second query",
        })?;
        let mut t = BTreeMap::new();
        let v = timed(&mut t, "verify", || {
            verifier::check_equivalence(&issue.sql, other, ctx.llm, ctx.confidence_floor)
        })?;
        let mut report = ToolReport::new(ToolId::Verifier, issue, to_value(&v));
        report.negative = v.verdict != Verdict::Equivalent;
        report.timings = t;
        Ok(report)
    }
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: BTreeMap<ToolId, Box<dyn Tool>>,
}

impl ToolRegistry {
    /// All four built-in tools.
    pub fn standard() -> Self {
        let mut r = ToolRegistry::default();
        r.register(Box::new(RewriterTool));
        r.register(Box::new(CorrectorTool));
        r.register(Box::new(ModifierTool));
        r.register(Box::new(VerifierTool));
        r
    }

    /// Replaces any tool already registered under the same id.
    pub fn register(&mut self, tool: Box<dyn Tool>) {
        self.tools.insert(tool.id(), tool);
    }

    pub fn ids(&self) -> impl Iterator<Item = ToolId> + '_ {
        self.tools.keys().copied()
    }

    pub fn run(&self, id: ToolId, issue: &Issue, ctx: &ToolContext) -> Result<ToolReport, ToolError> {
        self.tools.get(&id).ok_or(ToolError::NotRegistered(id))?.run(issue, ctx)
    }

    /// Routes the issue and runs the chosen tool.
    pub fn dispatch(&self, issue: &Issue, ctx: &ToolContext) -> (ToolId, Result<ToolReport, ToolError>) {
        let id = route(issue);
        (id, self.run(id, issue, ctx))
    }
}
