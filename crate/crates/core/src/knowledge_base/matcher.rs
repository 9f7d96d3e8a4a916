use serde::{Deserialize, Serialize};

use crate::fragmenter::ClauseSite;
use crate::structure::QueryStructure;

/// A structural test on one fragment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// Word sequence (keywords or operators) present in the fragment's own
    /// tokens, e.g. `"NOT IN"` or `"DISTINCT"`.
    ContainsOperator(String),
    /// At least this many FROM inputs scan one common base table, looking
    /// through derived tables and CTE references.
    SameTableScanned(usize),
    /// Outer join whose nullable side is filtered with `IS NOT NULL` in WHERE.
    OuterJoinWithNullFilter,
    /// `IN (SELECT ...)`.
    InSubquery,
    /// `UNION ALL` whose arms project `*`.
    UnionAllUnprojected,
    ScalarSubqueryInSelect,
}

impl Predicate {
    pub fn holds(&self, qs: &QueryStructure, fragment_id: usize) -> bool {
        let f = qs.get(fragment_id);
        match self {
            Predicate::ContainsOperator(op) => f.contains_words(op),
            Predicate::SameTableScanned(min) => qs.max_same_table_scans(fragment_id) >= *min,
            Predicate::OuterJoinWithNullFilter => f.has_outer_join_null_filter(),
            Predicate::InSubquery => f.has_in_subquery(),
            Predicate::UnionAllUnprojected => f.has_union_all && f.any_star_projection,
            Predicate::ScalarSubqueryInSelect => f.children_at(ClauseSite::SelectList).next().is_some(),
        }
    }
}

/// Conjunction of predicates. An empty matcher never matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Matcher(pub Vec<Predicate>);

impl Matcher {
    pub fn new(preds: impl IntoIterator<Item = Predicate>) -> Self {
        Matcher(preds.into_iter().collect())
    }

    pub fn matches(&self, qs: &QueryStructure, fragment_id: usize) -> bool {
        !self.0.is_empty() && self.0.iter().all(|p| p.holds(qs, fragment_id))
    }
}
