//! Syntax repair in three stages: clarify the error into a plan, prepare
//! the prompt inputs the plan asks for, then correct.

mod error;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use error::{error_key, mask_message, parse_error_log, ErrorLocation, ParsedError, UNKNOWN_EXCEPTION};

use crate::catalog::Catalog;
use crate::fragmenter::{decompose, decompose_lenient, ClauseSite, FragmentError, FragmentTree};
use crate::knowledge_base::{ErrorStrategy, KbError, KnowledgeSnapshot, DEFAULT_STRATEGY_THRESHOLD};
use crate::modifier::referenced_tables;
use crate::providers::response::strip_fences;
use crate::providers::{EmbeddingProvider, LlmProvider, PromptEnvelope, ProviderError, TemplateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchemaSlice {
    /// No schema in the prompt.
    Omit,
    Tables(BTreeSet<String>),
    /// Every table in the catalog.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPlan {
    pub error: ParsedError,
    /// Index of the strategy used, with its similarity.
    pub strategy: Option<(String, f64)>,
    pub scope: Scope,
    pub schema_slice: SchemaSlice,
    pub target_fragment: Option<usize>,
    pub guidance: String,
}

impl CorrectionPlan {
    fn fallback(error: ParsedError, strategy: Option<(&ErrorStrategy, f64)>) -> Self {
        CorrectionPlan {
            error,
            strategy: strategy.map(|(s, sim)| (s.index.clone(), sim)),
            scope: Scope::Global,
            schema_slice: SchemaSlice::Full,
            target_fragment: None,
            guidance: strategy.map(|(s, _)| s.guidance.clone()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionInputs {
    pub scope: Scope,
    pub target_fragment: Option<usize>,
    /// Byte span the reply replaces; the whole query for global scope.
    pub span: (usize, usize),
    /// Set when a local plan had to be widened because its fragment was missing.
    pub widened: bool,
    pub prompt: PromptEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub original: String,
    pub corrected: String,
    pub scope: Scope,
    pub target_fragment: Option<usize>,
    pub strategy: Option<String>,
}

#[derive(Debug, Error)]
pub enum CorrectError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("query is empty")]
    EmptyQuery,
    #[error("error log is empty")]
    EmptyLog,
    #[error("corrected SQL is still invalid ({diagnostic})\n  original:  {original}\n  corrected: {corrected}")]
    StillInvalid {
        original: String,
        corrected: String,
        diagnostic: String,
    },
}

/// Turns a parsed error into a correction plan. Never fails for lack of a
/// strategy or location; those degrade to a global plan over the full schema.
pub fn clarify(
    error: ParsedError,
    query: &str,
    kb: &KnowledgeSnapshot,
    embedder: &dyn EmbeddingProvider,
) -> Result<CorrectionPlan, CorrectError> {
    let hit = kb.retrieve_strategy(&error.key(), DEFAULT_STRATEGY_THRESHOLD, embedder)?;
    let Some((strategy, sim)) = hit else {
        return Ok(CorrectionPlan::fallback(error, None));
    };
    let schema_slice = if strategy.needs_schema {
        SchemaSlice::Tables(referenced_tables(query))
    } else {
        SchemaSlice::Omit
    };
    let (scope, target_fragment) = if strategy.localized {
        let offset = error.location.as_ref().and_then(|l| l.resolve(query));
        let target = offset.and_then(|o| {
            let tree = decompose_lenient(query).ok()?;
            tree.fragment_at(o).ok().map(|f| f.id)
        });
        match target {
            Some(id) => (Scope::Local, Some(id)),
            None => return Ok(CorrectionPlan::fallback(error, Some((strategy, sim)))),
        }
    } else {
        (Scope::Global, None)
    };
    Ok(CorrectionPlan {
        error,
        strategy: Some((strategy.index.clone(), sim)),
        scope,
        schema_slice,
        target_fragment,
        guidance: strategy.guidance.clone(),
    })
}

fn site_keyword(site: ClauseSite) -> &'static str {
    match site {
        ClauseSite::From => "FROM",
        ClauseSite::Where => "WHERE",
        ClauseSite::Having => "HAVING",
        ClauseSite::SelectList => "SELECT list",
        ClauseSite::OrderBy => "ORDER BY",
        ClauseSite::CteBody => "WITH",
        ClauseSite::None => "",
    }
}

/// The parent's clause header: where the fragment sits, nothing more.
fn enclosing_context(tree: &FragmentTree, id: usize) -> String {
    let Some(frag) = tree.get(id) else {
        return String::new();
    };
    if frag.parent_id.is_none() {
        return String::new();
    }
    match frag.clause_site {
        ClauseSite::None => "Nested inside an enclosing query.".to_string(),
        ClauseSite::CteBody => "Body of a common table expression: WITH name AS ( <SQL> )".to_string(),
        site => format!(
            "Subquery in the {} clause of an enclosing query: ( <SQL> )",
            site_keyword(site)
        ),
    }
}

fn render_schema(slice: &SchemaSlice, catalog: &Catalog) -> String {
    let lines: Vec<String> = match slice {
        SchemaSlice::Omit => Vec::new(),
        SchemaSlice::Tables(names) => names.iter().map(|n| catalog.describe(n).render()).collect(),
        SchemaSlice::Full => catalog.tables().map(|t| t.render()).collect(),
    };
    lines.join("\n")
}

/// Builds the correction prompt. A local plan whose fragment is not in
/// `tree` is widened to the whole query.
pub fn prepare_data(plan: &CorrectionPlan, query: &str, tree: &FragmentTree, catalog: &Catalog) -> CorrectionInputs {
    let local = match (plan.scope, plan.target_fragment) {
        (Scope::Local, Some(id)) => tree.get(id).filter(|f| f.span.1 <= query.len()),
        _ => None,
    };
    let widened = plan.scope == Scope::Local && local.is_none();
    let (scope, span, sql, context, slice) = match local {
        Some(f) => (
            Scope::Local,
            f.span,
            &query[f.span.0..f.span.1],
            enclosing_context(tree, f.id),
            &plan.schema_slice,
        ),
        None => (
            Scope::Global,
            (0, query.len()),
            query,
            String::new(),
            if widened {
                &SchemaSlice::Full
            } else {
                &plan.schema_slice
            },
        ),
    };
    let error = format!("{}: {}", plan.error.exception_type, plan.error.message);
    let prompt = PromptEnvelope::with_slots(
        TemplateId::Correct,
        [
            ("error", error),
            ("guidance", plan.guidance.clone()),
            ("context", context),
            ("sql", sql.to_string()),
            ("schema", render_schema(slice, catalog)),
        ],
    );
    CorrectionInputs {
        scope,
        target_fragment: local.map(|f| f.id),
        span,
        widened,
        prompt,
    }
}

/// Asks the LLM for the fix and splices it in; the result must parse.
pub fn correct(query: &str, inputs: &CorrectionInputs, llm: &dyn LlmProvider) -> Result<String, CorrectError> {
    let reply = llm.complete(&inputs.prompt)?;
    let replacement = strip_fences(&reply);
    let (lo, hi) = inputs.span;
    let corrected = format!("{}{}{}", &query[..lo], replacement, &query[hi..]);
    match decompose(&corrected) {
        Ok(_) => Ok(corrected),
        Err(FragmentError::Unparseable { diagnostic, .. }) => Err(CorrectError::StillInvalid {
            original: query.to_string(),
            corrected,
            diagnostic,
        }),
        Err(e) => Err(CorrectError::StillInvalid {
            original: query.to_string(),
            corrected,
            diagnostic: e.to_string(),
        }),
    }
}

/// One full clarify, prepare, correct pass.
pub fn fix_syntax(
    query: &str,
    log: &str,
    kb: &KnowledgeSnapshot,
    catalog: &Catalog,
    llm: &dyn LlmProvider,
    embedder: &dyn EmbeddingProvider,
) -> Result<Correction, CorrectError> {
    if log.trim().is_empty() {
        return Err(CorrectError::EmptyLog);
    }
    let tree = decompose_lenient(query).map_err(|_| CorrectError::EmptyQuery)?;
    let plan = clarify(parse_error_log(log), query, kb, embedder)?;
    let inputs = prepare_data(&plan, query, &tree, catalog);
    let corrected = correct(query, &inputs, llm)?;
    Ok(Correction {
        original: query.to_string(),
        corrected,
        scope: inputs.scope,
        target_fragment: inputs.target_fragment,
        strategy: plan.strategy.map(|(s, _)| s),
    })
}

/// Runs up to `max_rounds` passes. Later rounds use the parser diagnostic of
/// the previous attempt as their error log.
pub fn fix_syntax_rounds(
    query: &str,
    log: &str,
    kb: &KnowledgeSnapshot,
    catalog: &Catalog,
    llm: &dyn LlmProvider,
    embedder: &dyn EmbeddingProvider,
    max_rounds: usize,
) -> Result<Correction, CorrectError> {
    let mut current = query.to_string();
    let mut log = log.to_string();
    let mut last = None;
    for _ in 0..max_rounds.max(1) {
        match fix_syntax(&current, &log, kb, catalog, llm, embedder) {
            Ok(mut c) => {
                c.original = query.to_string();
                return Ok(c);
            }
            Err(CorrectError::StillInvalid {
                corrected, diagnostic, ..
            }) => {
                last = Some((corrected.clone(), diagnostic.clone()));
                current = corrected;
                log = diagnostic;
            }
            Err(e) => return Err(e),
        }
    }
    let (corrected, diagnostic) = last.expect("at least one round ran");
    Err(CorrectError::StillInvalid {
        original: query.to_string(),
        corrected,
        diagnostic,
    })
}
