//! Recursive decomposition of a SQL query into analysable fragments.
//!
//! A query splits into its main body, its CTE bodies and every parenthesised
//! subquery, recursively. Fragments are numbered in post-order so that inner
//! fragments are always analysed before the fragments that contain them:
//!
//! * within one fragment, child subqueries are visited by clause
//!   (`FROM`, `WHERE`, `HAVING`, select list, `ORDER BY`, anything else) and
//!   left to right inside a clause;
//! * CTE bodies are visited after the subqueries of the body that owns them;
//! * the owning fragment is numbered after all of its children.
//!
//! Set-operation arms stay inside their enclosing fragment.
//!
//! Decomposition works at token level and tolerates invalid SQL: unbalanced
//! parentheses are sliced best-effort and the tree carries a diagnostic. The
//! strict entry point [`decompose`] reports such trees as
//! [`FragmentError::Unparseable`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::{tokenize, Token, TokenKind};
use crate::sql;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FragmentKind {
    Main,
    Cte,
    Subquery,
}

/// The clause of the parent fragment in which a fragment appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClauseSite {
    From,
    Where,
    Having,
    SelectList,
    OrderBy,
    CteBody,
    None,
}

impl ClauseSite {
    /// Visiting priority among siblings; lower goes first.
    fn priority(self) -> u8 {
        match self {
            ClauseSite::From => 0,
            ClauseSite::Where => 1,
            ClauseSite::Having => 2,
            ClauseSite::SelectList => 3,
            ClauseSite::OrderBy => 4,
            ClauseSite::None => 5,
            ClauseSite::CteBody => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub id: usize,
    pub kind: FragmentKind,
    pub depth: usize,
    /// Byte offsets `[start, end)` into the original query.
    pub span: (usize, usize),
    pub parent_id: Option<usize>,
    pub clause_site: ClauseSite,
    pub text: String,
}

impl Fragment {
    pub fn contains(&self, offset: usize) -> bool {
        self.span.0 <= offset && offset < self.span.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentTree {
    /// Ordered by id.
    pub fragments: Vec<Fragment>,
    pub root_id: usize,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FragmentError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("query could not be parsed: {diagnostic}")]
    Unparseable {
        tree: Box<FragmentTree>,
        diagnostic: String,
    },
    #[error("offset {offset} is outside the query (length {len})")]
    OutOfRange { offset: usize, len: usize },
}

/// One finding produced while analysing a fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: Option<String>,
    pub narrative: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub fragment_id: usize,
    pub findings: Vec<Finding>,
}

/// Decomposes `query`, failing with [`FragmentError::Unparseable`] (which
/// still carries the best-effort tree) when the query is not valid SQL.
pub fn decompose(query: &str) -> Result<FragmentTree, FragmentError> {
    let tree = decompose_lenient(query)?;
    match &tree.diagnostic {
        Some(d) => Err(FragmentError::Unparseable {
            diagnostic: d.clone(),
            tree: Box::new(tree),
        }),
        None => Ok(tree),
    }
}

/// Decomposes `query` without rejecting invalid SQL. The returned tree has
/// `diagnostic` set when the query failed to parse.
pub fn decompose_lenient(query: &str) -> Result<FragmentTree, FragmentError> {
    let tokens = tokenize(query);
    if tokens.is_empty() {
        return Err(FragmentError::EmptyQuery);
    }
    let groups = Groups::match_parens(&tokens);

    let mut builder = Builder {
        src: query,
        tokens: &tokens,
        groups: &groups,
        nodes: Vec::new(),
    };
    let root = builder.visit(0, tokens.len(), FragmentKind::Main, ClauseSite::None, 1, true);
    let fragments = builder.finish(root);

    let diagnostic = groups.diagnostic.clone().or_else(|| sql::validate(query).err());
    Ok(FragmentTree {
        root_id: fragments.len(),
        fragments,
        source: query.to_string(),
        diagnostic,
    })
}

impl FragmentTree {
    pub fn get(&self, id: usize) -> Option<&Fragment> {
        id.checked_sub(1).and_then(|i| self.fragments.get(i))
    }

    pub fn root(&self) -> &Fragment {
        &self.fragments[self.root_id - 1]
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn is_parseable(&self) -> bool {
        self.diagnostic.is_none()
    }

    /// Direct children of `id`, in id order.
    pub fn children(&self, id: usize) -> impl Iterator<Item = &Fragment> {
        self.fragments.iter().filter(move |f| f.parent_id == Some(id))
    }

    pub fn max_depth(&self) -> usize {
        self.fragments.iter().map(|f| f.depth).max().unwrap_or(0)
    }

    /// The deepest fragment whose span contains `offset`.
    pub fn fragment_at(&self, offset: usize) -> Result<&Fragment, FragmentError> {
        let len = self.source.len();
        if offset >= len {
            return Err(FragmentError::OutOfRange { offset, len });
        }
        Ok(self
            .fragments
            .iter()
            .filter(|f| f.contains(offset))
            .max_by_key(|f| f.depth)
            .unwrap_or_else(|| self.root()))
    }

    /// Rebuilds the source text of `id` by substituting each child's span
    /// with its own reassembled text.
    pub fn reassemble(&self, id: usize) -> String {
        let frag = self.get(id).expect("fragment id");
        let mut children: Vec<&Fragment> = self.children(id).collect();
        children.sort_by_key(|c| c.span.0);
        let mut out = String::new();
        let mut cursor = frag.span.0;
        for child in children {
            out.push_str(&self.source[cursor..child.span.0]);
            out.push_str(&self.reassemble(child.id));
            cursor = child.span.1;
        }
        out.push_str(&self.source[cursor..frag.span.1]);
        out
    }
}

/// Matching-parenthesis table over a token slice.
pub(crate) struct Groups {
    /// For each `(` token index, the index of its `)` (or `tokens.len()` when
    /// unclosed).
    close: Vec<Option<usize>>,
    pub(crate) diagnostic: Option<String>,
}

impl Groups {
    pub(crate) fn match_parens(tokens: &[Token]) -> Groups {
        let mut close = vec![None; tokens.len()];
        let mut stack = Vec::new();
        let mut diagnostic = None;
        for (i, t) in tokens.iter().enumerate() {
            match t.kind {
                TokenKind::LParen => stack.push(i),
                TokenKind::RParen => match stack.pop() {
                    Some(open) => close[open] = Some(i),
                    None => {
                        diagnostic.get_or_insert_with(|| format!("unmatched ')' at offset {}", t.start));
                    }
                },
                _ => {}
            }
        }
        for open in stack {
            close[open] = Some(tokens.len());
            diagnostic.get_or_insert_with(|| format!("unclosed '(' at offset {}", tokens[open].start));
        }
        Groups { close, diagnostic }
    }

    /// End (exclusive of the closing paren) of the group opened at `open`.
    pub(crate) fn close_of(&self, open: usize) -> usize {
        self.close[open].expect("open paren")
    }

    /// Index just past the group opened at `open`.
    pub(crate) fn after(&self, open: usize, len: usize) -> usize {
        (self.close_of(open) + 1).min(len)
    }
}

/// Shape of one fragment body: its CTE bodies and its direct subqueries,
/// as token ranges, in visiting order.
#[derive(Debug, Default)]
pub(crate) struct ScopeShape {
    pub(crate) ctes: Vec<(usize, usize)>,
    /// Token indices of the CTE names, parallel to `ctes`.
    pub(crate) cte_names: Vec<usize>,
    pub(crate) subqueries: Vec<(ClauseSite, usize, usize)>,
    /// Start of the main body after any `WITH` list.
    pub(crate) body_start: usize,
}

pub(crate) fn starts_query(tokens: &[Token], lo: usize, hi: usize) -> bool {
    lo < hi && (tokens[lo].is_keyword("SELECT") || tokens[lo].is_keyword("WITH"))
}

/// Splits the token range `[lo, hi)` into CTE bodies and subqueries.
pub(crate) fn scope_shape(tokens: &[Token], groups: &Groups, lo: usize, hi: usize) -> ScopeShape {
    let mut shape = ScopeShape {
        body_start: lo,
        ..Default::default()
    };
    let mut i = lo;
    if i < hi && tokens[i].is_keyword("WITH") {
        i += 1;
        if i < hi && tokens[i].is_keyword("RECURSIVE") {
            i += 1;
        }
        let mut name = None;
        loop {
            // name [ (cols) ] AS [NOT] [MATERIALIZED] ( body )
            if name.is_none() && i < hi && tokens[i].is_ident() {
                name = Some(i);
            }
            while i < hi && tokens[i].kind != TokenKind::LParen && !tokens[i].is_keyword("AS") {
                i += 1;
            }
            if i < hi && tokens[i].kind == TokenKind::LParen {
                // column list
                i = groups.after(i, hi);
                continue;
            }
            i += 1;
            while i < hi && (tokens[i].is_keyword("NOT") || tokens[i].is_keyword("MATERIALIZED")) {
                i += 1;
            }
            if i >= hi || tokens[i].kind != TokenKind::LParen {
                break;
            }
            let close = groups.close_of(i).min(hi);
            shape.ctes.push((i + 1, close));
            shape.cte_names.push(name.take().unwrap_or(i));
            i = groups.after(i, hi);
            if i < hi && tokens[i].kind == TokenKind::Comma {
                i += 1;
                continue;
            }
            break;
        }
        shape.body_start = i.min(hi);
    }

    let mut site = ClauseSite::None;
    let mut i = shape.body_start;
    while i < hi {
        let t = &tokens[i];
        match &t.kind {
            TokenKind::Keyword(k) => {
                site = match k.as_str() {
                    "SELECT" => ClauseSite::SelectList,
                    "FROM" | "JOIN" | "ON" | "USING" | "LATERAL" => ClauseSite::From,
                    "WHERE" => ClauseSite::Where,
                    "HAVING" => ClauseSite::Having,
                    "ORDER" => ClauseSite::OrderBy,
                    "GROUP" | "LIMIT" | "OFFSET" | "QUALIFY" | "WINDOW" | "UNION" | "INTERSECT" | "EXCEPT"
                    | "MINUS" | "VALUES" | "SET" => ClauseSite::None,
                    _ => site,
                };
                i += 1;
            }
            TokenKind::LParen => {
                collect_subqueries(tokens, groups, i, hi, site, &mut shape.subqueries);
                i = groups.after(i, hi);
            }
            _ => i += 1,
        }
    }
    shape
        .subqueries
        .sort_by_key(|(site, start, _)| (site.priority(), *start));
    shape
}

fn collect_subqueries(
    tokens: &[Token],
    groups: &Groups,
    open: usize,
    hi: usize,
    site: ClauseSite,
    out: &mut Vec<(ClauseSite, usize, usize)>,
) {
    let inner_lo = open + 1;
    let inner_hi = groups.close_of(open).min(hi);
    if starts_query(tokens, inner_lo, inner_hi) {
        out.push((site, inner_lo, inner_hi));
        return;
    }
    let mut i = inner_lo;
    while i < inner_hi {
        if tokens[i].kind == TokenKind::LParen {
            collect_subqueries(tokens, groups, i, inner_hi, site, out);
            i = groups.after(i, inner_hi);
        } else {
            i += 1;
        }
    }
}

struct Node {
    kind: FragmentKind,
    site: ClauseSite,
    depth: usize,
    span: (usize, usize),
    children: Vec<usize>,
}

struct Builder<'a> {
    src: &'a str,
    tokens: &'a [Token],
    groups: &'a Groups,
    /// Nodes in post-order; position + 1 is the fragment id.
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn visit(
        &mut self,
        lo: usize,
        hi: usize,
        kind: FragmentKind,
        site: ClauseSite,
        depth: usize,
        is_root: bool,
    ) -> usize {
        let shape = scope_shape(self.tokens, self.groups, lo, hi);
        let mut children = Vec::new();
        for &(child_site, clo, chi) in &shape.subqueries {
            children.push(self.visit(clo, chi, FragmentKind::Subquery, child_site, depth + 1, false));
        }
        for &(clo, chi) in &shape.ctes {
            if clo < chi {
                children.push(self.visit(clo, chi, FragmentKind::Cte, ClauseSite::CteBody, depth + 1, false));
            }
        }
        let span = if is_root {
            (0, self.src.len())
        } else {
            (self.tokens[lo].start, self.tokens[hi - 1].end)
        };
        self.nodes.push(Node {
            kind,
            site,
            depth,
            span,
            children,
        });
        self.nodes.len() - 1
    }

    fn finish(self, root: usize) -> Vec<Fragment> {
        let mut parent = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                parent[c] = Some(idx + 1);
            }
        }
        debug_assert_eq!(root + 1, self.nodes.len());
        self.nodes
            .iter()
            .enumerate()
            .map(|(idx, n)| Fragment {
                id: idx + 1,
                kind: n.kind,
                depth: n.depth,
                span: n.span,
                parent_id: parent[idx],
                clause_site: n.site,
                text: self.src[n.span.0..n.span.1].to_string(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::NESTED_REPORT;

    #[test]
    fn single_select_is_one_main_fragment() {
        let tree = decompose("SELECT 1").unwrap();
        assert_eq!(tree.len(), 1);
        let f = tree.root();
        assert_eq!((f.id, f.kind, f.depth), (1, FragmentKind::Main, 1));
        assert_eq!(tree.root_id, 1);
    }

    #[test]
    fn blank_query_is_rejected() {
        assert_eq!(decompose("   \n\t"), Err(FragmentError::EmptyQuery));
        assert_eq!(decompose("-- only a comment"), Err(FragmentError::EmptyQuery));
    }

    #[test]
    fn nested_report_numbering() {
        let tree = decompose(NESTED_REPORT).unwrap();
        assert_eq!(tree.len(), 7);
        assert_eq!(tree.max_depth(), 4);
        let parents: Vec<Option<usize>> = tree.fragments.iter().map(|f| f.parent_id).collect();
        assert_eq!(parents, [Some(2), Some(4), Some(4), Some(7), Some(7), Some(7), None]);
        let sites: Vec<ClauseSite> = tree.fragments.iter().map(|f| f.clause_site).collect();
        use ClauseSite as S;
        assert_eq!(
            sites,
            [
                S::From,
                S::From,
                S::From,
                S::Where,
                S::SelectList,
                S::SelectList,
                S::None
            ]
        );
        assert!(tree.get(1).unwrap().text.starts_with("SELECT COUNT(*) AS c, ds"));
        assert!(tree.get(3).unwrap().text.ends_with("WHERE ds = '1016'"));
        assert!(tree.get(5).unwrap().text.starts_with("SELECT tb3.c1 - tb3.c2"));
    }

    #[test]
    fn fragment_at_picks_deepest() {
        let tree = decompose(NESTED_REPORT).unwrap();
        let at = |needle: &str| {
            let off = NESTED_REPORT.find(needle).unwrap();
            tree.fragment_at(off).unwrap().id
        };
        assert_eq!(at("WHERE ds = '1016'"), 3);
        assert_eq!(at("GROUP BY ds"), 1);
        assert_eq!(at("LEFT JOIN"), 7);
        assert_eq!(at("AVG(tb4.c3)"), 6);
        assert!(matches!(
            tree.fragment_at(NESTED_REPORT.len()),
            Err(FragmentError::OutOfRange { .. })
        ));
    }

    #[test]
    fn ctes_follow_main_subqueries() {
        let q = "WITH a AS (SELECT x FROM (SELECT x FROM t) s), b AS (SELECT y FROM u) \
                 SELECT * FROM a WHERE a.x IN (SELECT y FROM b)";
        let tree = decompose(q).unwrap();
        let kinds: Vec<(FragmentKind, Option<usize>)> = tree.fragments.iter().map(|f| (f.kind, f.parent_id)).collect();
        use FragmentKind::*;
        assert_eq!(
            kinds,
            [
                (Subquery, Some(5)),
                (Subquery, Some(3)),
                (Cte, Some(5)),
                (Cte, Some(5)),
                (Main, None)
            ]
        );
        assert_eq!(tree.get(2).unwrap().text, "SELECT x FROM t");
        assert_eq!(tree.get(4).unwrap().text, "SELECT y FROM u");
    }

    #[test]
    fn union_arms_stay_in_one_fragment() {
        let q = "SELECT AVG(d) FROM (SELECT * FROM t0 UNION ALL SELECT * FROM t1) a";
        let tree = decompose(q).unwrap();
        assert_eq!(tree.len(), 2);
        assert_eq!(tree.get(1).unwrap().text, "SELECT * FROM t0 UNION ALL SELECT * FROM t1");
    }

    #[test]
    fn subqueries_inside_function_calls_are_found() {
        let q = "SELECT IFNULL((SELECT MAX(a) FROM t), 0) FROM u WHERE EXISTS (SELECT 1 FROM v)";
        let tree = decompose(q).unwrap();
        let sites: Vec<ClauseSite> = tree.fragments.iter().map(|f| f.clause_site).collect();
        assert_eq!(sites, [ClauseSite::Where, ClauseSite::SelectList, ClauseSite::None]);
    }

    #[test]
    fn window_and_in_lists_are_not_fragments() {
        let q = "SELECT ROW_NUMBER() OVER (PARTITION BY a ORDER BY b) FROM t WHERE c IN (1, 2)";
        assert_eq!(decompose(q).unwrap().len(), 1);
    }

    #[test]
    fn unbalanced_query_yields_partial_tree() {
        let q = "SELECT a FROM (SELECT b FROM t WHERE x = 1";
        let err = decompose(q).unwrap_err();
        let FragmentError::Unparseable { tree, diagnostic } = err else {
            panic!("expected unparseable");
        };
        assert!(diagnostic.contains("unclosed"));
        assert_eq!(tree.len(), 2);
        assert_eq!(tree.get(1).unwrap().text, "SELECT b FROM t WHERE x = 1");
    }

    #[test]
    fn syntax_error_is_reported_but_tree_is_kept() {
        let q = "SELECT a b c FROM t";
        let tree = decompose_lenient(q).unwrap();
        assert!(tree.diagnostic.is_some());
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn reassembly_reproduces_source() {
        let tree = decompose(NESTED_REPORT).unwrap();
        assert_eq!(tree.reassemble(tree.root_id), NESTED_REPORT);
    }
}
