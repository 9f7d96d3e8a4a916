//! Fragment-based SQL governance toolkit.
//!
//! Queries are decomposed into fragments ([`fragmenter`]) and handed to four
//! tools: the [`rewriter`], the [`corrector`] for syntax errors, the
//! [`modifier`] for natural-language change requests and the [`verifier`] for
//! semantic equivalence. Each tool consults a per-tool [`knowledge_base`] that
//! grows through [`self_learning`]. External services (LLM completion, text
//! embedding, query execution) sit behind the traits in [`providers`].

pub mod catalog;
pub mod corrector;
pub mod fragmenter;
pub mod harness;
pub mod knowledge_base;
pub mod lexer;
pub mod modifier;
pub mod providers;
pub mod rewriter;
pub mod self_learning;
pub mod sql;
pub mod structure;
pub mod verifier;

#[cfg(test)]
pub(crate) mod fixtures {
    pub const NESTED_REPORT: &str = include_str!("../tests/fixtures/nested_report.sql");
    pub const NESTED_REPORT_REWRITTEN: &str = include_str!("../tests/fixtures/nested_report_rewritten.sql");
    pub const UNION_SCAN: &str = include_str!("../tests/fixtures/union_scan.sql");
}
