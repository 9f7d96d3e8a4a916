//! Natural-language modification requests.
//!
//! A request is classified into an intent category by a weighted sum of a
//! keyword score and the cosine similarity between the request embedding and
//! the category centroid. Low-scoring requests are rejected as unsupported.
//! Accepted requests are answered with a category-specific prompt carrying
//! the target SQL, the metadata it touches, the user's frequently used tables
//! and the current time.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use chrono::{DateTime, SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ColumnMeta, TableMeta};
use crate::fragmenter::decompose_lenient;
use crate::knowledge_base::{cosine_similarity, KbError};
use crate::lexer::{normalize, tokenize, TokenKind};
use crate::providers::response::strip_fences;
use crate::providers::{extract_json, EmbeddingProvider, LlmProvider, PromptEnvelope, ProviderError, TemplateId};
use crate::structure::{ident_name, QueryStructure};

pub const EXPLAIN_SQL: &str = "EXPLAIN_SQL";

/// Instruction given to instruction-aware embedders.
pub const EMBED_INSTRUCTION: &str = "Classify the kind of change this SQL modification request asks for";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentCategory {
    pub id: String,
    pub keywords: Vec<Keyword>,
    /// Labelled requests the centroid is built from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPathway {
    /// Embed the request with a task instruction.
    #[default]
    Instruction,
    /// Mask constants and identifiers, then embed.
    Masking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModifierConfig {
    pub alpha: f64,
    pub beta_sim: f64,
    pub theta: f64,
    pub top_k_tables: usize,
    pub pathway: EmbeddingPathway,
}

impl Default for ModifierConfig {
    fn default() -> Self {
        ModifierConfig {
            alpha: 0.4,
            beta_sim: 0.6,
            theta: 0.35,
            top_k_tables: 5,
            pathway: EmbeddingPathway::Instruction,
        }
    }
}

impl ModifierConfig {
    pub fn validate(&self) -> Result<(), ModifyError> {
        let ok = self.alpha >= 0.0
            && self.beta_sim >= 0.0
            && self.alpha + self.beta_sim > 0.0
            && (0.0..=1.0).contains(&self.theta)
            && self.top_k_tables > 0;
        if ok {
            Ok(())
        } else {
            Err(ModifyError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModificationContext {
    pub target_sql: String,
    pub surrounding_context: String,
    pub referenced_metadata: Vec<TableMeta>,
    pub frequent_tables: Vec<TableMeta>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    Accepted { category: String, score: f64 },
    Rejected { best: String, score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub decision: Classification,
    /// F_j per category, in declaration order.
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifyOutput {
    pub category: String,
    pub sql: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModifyError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("category {0} has no centroid")]
    MissingCentroid(String),
    #[error("category {0} has no keywords")]
    NoKeywords(String),
    #[error("no categories configured")]
    NoCategories,
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("request is not a supported modification (best {best} at {score:.3})")]
    Rejected { best: String, score: f64 },
    #[error("the explanation changed the query logic:\n  before: {before}\n  after:  {after}")]
    ContractViolation { before: String, after: String },
    #[error("invalid modifier configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid categories file: {0}")]
    InvalidCategories(String),
}

/// Categories shipped with the crate, without centroids.
pub fn default_category_specs() -> Vec<IntentCategory> {
    serde_json::from_str(include_str!("../../seeds/categories.json")).expect("bundled categories parse")
}

pub fn parse_categories(text: &str) -> Result<Vec<IntentCategory>, ModifyError> {
    let cats: Vec<IntentCategory> =
        serde_json::from_str(text).map_err(|e| ModifyError::InvalidCategories(e.to_string()))?;
    if cats.is_empty() {
        return Err(ModifyError::NoCategories);
    }
    if let Some(c) = cats.iter().find(|c| c.keywords.is_empty()) {
        return Err(ModifyError::NoKeywords(c.id.clone()));
    }
    Ok(cats)
}

fn mask_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"'(?:[^']|'')*'|"[^"]*"|`[^`]*`|\b\w+(?:\.\w+)+\b|\b[A-Za-z]\w*_\w*\b|\b\d+(?:\.\d+)?\b"#)
            .expect("mask regex")
    })
}

/// Replaces quoted text, numbers and identifier-like words with `[MASK]`.
pub fn mask_request(request: &str) -> String {
    mask_re().replace_all(request, "[MASK]").into_owned()
}

pub fn embed_request(
    request: &str,
    embedder: &dyn EmbeddingProvider,
    pathway: EmbeddingPathway,
) -> Result<Vec<f64>, ProviderError> {
    match pathway {
        EmbeddingPathway::Instruction => embedder.embed_with_instruction(EMBED_INSTRUCTION, request),
        EmbeddingPathway::Masking => embedder.embed(&mask_request(request)),
    }
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    if phrase.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(phrase) {
        let start = from + pos;
        let end = start + phrase.len();
        let before_ok = haystack[..start].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            return true;
        }
        from = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Weighted share of the category's keywords found in the request, matched
/// case-insensitively as whole phrases.
pub fn keyword_score(request: &str, category: &IntentCategory) -> f64 {
    let n = category.keywords.len();
    if n == 0 {
        return 0.0;
    }
    let hay = request.to_lowercase();
    let sum: f64 = category
        .keywords
        .iter()
        .filter(|k| contains_phrase(&hay, &k.text.to_lowercase()))
        .map(|k| k.weight)
        .fold(0.0, |a, w| a + w);
    sum / n as f64
}

/// Scores every category and picks the best; first declared wins ties.
pub fn classify_with_embedding(
    request: &str,
    e_q: &[f64],
    categories: &[IntentCategory],
    cfg: &ModifierConfig,
) -> Result<ClassifyReport, ModifyError> {
    if categories.is_empty() {
        return Err(ModifyError::NoCategories);
    }
    let mut scores = Vec::with_capacity(categories.len());
    for c in categories {
        let centroid = c
            .centroid
            .as_ref()
            .ok_or_else(|| ModifyError::MissingCentroid(c.id.clone()))?;
        let f = cfg.alpha * keyword_score(request, c) + cfg.beta_sim * cosine_similarity(e_q, centroid)?;
        scores.push((c.id.clone(), f));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.1 > scores[best].1 {
            best = i;
        }
    }
    let (id, score) = scores[best].clone();
    let decision = if score < cfg.theta {
        Classification::Rejected { best: id, score }
    } else {
        Classification::Accepted { category: id, score }
    };
    Ok(ClassifyReport { decision, scores })
}

pub fn classify_intent(
    request: &str,
    categories: &[IntentCategory],
    embedder: &dyn EmbeddingProvider,
    cfg: &ModifierConfig,
) -> Result<ClassifyReport, ModifyError> {
    let e_q = embed_request(request, embedder, cfg.pathway)?;
    classify_with_embedding(request, &e_q, categories, cfg)
}

/// Normalised mean of `vectors`; `None` when the mean vanishes.
pub fn normalized_mean(vectors: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = vectors.first()?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| mean.into_iter().map(|x| x / norm).collect())
}

/// Recomputes centroids from labelled requests. Categories without any
/// example keep their previous centroid and are listed in the second value.
pub fn build_centroids(
    categories: &[IntentCategory],
    labeled: &[(String, String)],
    embedder: &dyn EmbeddingProvider,
    pathway: EmbeddingPathway,
) -> Result<(Vec<IntentCategory>, Vec<String>), ModifyError> {
    if let Some((_, cat)) = labeled.iter().find(|(_, c)| !categories.iter().any(|k| &k.id == c)) {
        return Err(ModifyError::UnknownCategory(cat.clone()));
    }
    let mut out = categories.to_vec();
    let mut empty = Vec::new();
    for c in &mut out {
        let members: Vec<Vec<f64>> = labeled
            .iter()
            .filter(|(_, id)| id == &c.id)
            .map(|(text, _)| embed_request(text, embedder, pathway))
            .collect::<Result<_, _>>()?;
        match normalized_mean(&members) {
            Some(v) => c.centroid = Some(v),
            None => empty.push(c.id.clone()),
        }
    }
    Ok((out, empty))
}

/// Builds centroids from each category's own examples.
pub fn with_centroids(
    categories: Vec<IntentCategory>,
    embedder: &dyn EmbeddingProvider,
    pathway: EmbeddingPathway,
) -> Result<(Vec<IntentCategory>, Vec<String>), ModifyError> {
    let labeled: Vec<(String, String)> = categories
        .iter()
        .flat_map(|c| c.examples.iter().map(|e| (e.clone(), c.id.clone())))
        .collect();
    build_centroids(&categories, &labeled, embedder, pathway)
}

/// Tables read by `sql`, best effort on invalid input.
pub fn referenced_tables(sql: &str) -> BTreeSet<String> {
    match decompose_lenient(sql) {
        Ok(tree) => QueryStructure::analyze(&tree).base_tables(),
        Err(_) => BTreeSet::new(),
    }
}

/// Number of history queries touching each table.
pub fn table_frequencies<S: AsRef<str>>(history: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for sql in history {
        for t in referenced_tables(sql.as_ref()) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

/// The `k` most frequent tables; equal counts go alphabetically.
pub fn top_tables(counts: &BTreeMap<String, usize>, k: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(t, _)| t.clone()).collect()
}

pub fn prepare_metadata(
    target_sql: &str,
    context: &str,
    catalog: &Catalog,
    history_counts: &BTreeMap<String, usize>,
    cfg: &ModifierConfig,
    now: DateTime<Utc>,
) -> ModificationContext {
    let words: BTreeSet<String> = tokenize(target_sql)
        .iter()
        .filter(|t| matches!(t.kind, TokenKind::Ident { .. }))
        .map(|t| ident_name(t, target_sql))
        .collect();
    let referenced_metadata = referenced_tables(target_sql)
        .into_iter()
        .map(|t| {
            let mut meta = catalog.describe(&t);
            let used: Vec<ColumnMeta> = meta
                .columns
                .iter()
                .filter(|c| words.contains(&c.name.to_ascii_lowercase()))
                .cloned()
                .collect();
            if !used.is_empty() {
                meta.columns = used;
            }
            meta
        })
        .collect();
    let frequent_tables = top_tables(history_counts, cfg.top_k_tables)
        .iter()
        .map(|t| catalog.describe(t))
        .collect();
    ModificationContext {
        target_sql: target_sql.to_string(),
        surrounding_context: context.to_string(),
        referenced_metadata,
        frequent_tables,
        timestamp: now,
    }
}

pub fn render_metadata(ctx: &ModificationContext) -> String {
    let mut out = String::from("Referenced tables:\n");
    for t in &ctx.referenced_metadata {
        out.push_str(&format!("- {}\n", t.render()));
    }
    if !ctx.frequent_tables.is_empty() {
        out.push_str("Frequently used tables:\n");
        for t in &ctx.frequent_tables {
            out.push_str(&format!("- {}\n", t.render()));
        }
    }
    out.trim_end().to_string()
}

pub fn modify_prompt(request: &str, ctx: &ModificationContext, category: &str) -> PromptEnvelope {
    PromptEnvelope::with_slots(
        TemplateId::Modify(category.to_string()),
        [
            ("sql", ctx.target_sql.clone()),
            ("context", ctx.surrounding_context.clone()),
            ("metadata", render_metadata(ctx)),
            ("timestamp", ctx.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true)),
            ("request", request.to_string()),
        ],
    )
}

#[derive(Deserialize)]
struct ModifyReply {
    sql: String,
    #[serde(default)]
    explanation: String,
}

/// Whether `after` is `before` with only comments and layout changed.
pub fn same_logic(before: &str, after: &str) -> bool {
    normalize(before) == normalize(after)
}

pub fn modify(
    request: &str,
    ctx: &ModificationContext,
    category: &str,
    llm: &dyn LlmProvider,
) -> Result<ModifyOutput, ModifyError> {
    let reply = llm.complete(&modify_prompt(request, ctx, category))?;
    let (sql, explanation) = match extract_json(&reply).and_then(|v| serde_json::from_value::<ModifyReply>(v).ok()) {
        Some(r) => (r.sql, r.explanation),
        None => (strip_fences(&reply).to_string(), String::new()),
    };
    if category == EXPLAIN_SQL && !same_logic(&ctx.target_sql, &sql) {
        return Err(ModifyError::ContractViolation {
            before: normalize(&ctx.target_sql),
            after: normalize(&sql),
        });
    }
    Ok(ModifyOutput {
        category: category.to_string(),
        sql,
        explanation,
    })
}

/// Classifies `request` and fulfils it unless rejected.
pub fn handle_request(
    request: &str,
    ctx: &ModificationContext,
    categories: &[IntentCategory],
    embedder: &dyn EmbeddingProvider,
    llm: &dyn LlmProvider,
    cfg: &ModifierConfig,
) -> Result<(ClassifyReport, ModifyOutput), ModifyError> {
    cfg.validate()?;
    let report = classify_intent(request, categories, embedder, cfg)?;
    match &report.decision {
        Classification::Rejected { best, score } => Err(ModifyError::Rejected {
            best: best.clone(),
            score: *score,
        }),
        Classification::Accepted { category, .. } => {
            let out = modify(request, ctx, category, llm)?;
            Ok((report, out))
        }
    }
}
