//! Clause-level structure of each fragment.
//!
//! Works on the fragment's *own* tokens: the tokens inside its span with every
//! child fragment collapsed to a single [`Item::Child`] reference. Nothing here
//! needs the query to be valid SQL.

use std::collections::{BTreeMap, BTreeSet};

use crate::fragmenter::{scope_shape, ClauseSite, FragmentTree, Groups};
use crate::lexer::{tokenize, Token, TokenKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Tok(Token),
    Child(usize),
}

impl Item {
    fn keyword(&self) -> Option<&str> {
        match self {
            Item::Tok(t) => t.keyword(),
            Item::Child(_) => None,
        }
    }

    fn kind(&self) -> Option<&TokenKind> {
        match self {
            Item::Tok(t) => Some(&t.kind),
            Item::Child(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinKind {
    /// Comma-separated FROM list entry, or the first input.
    Implicit,
    Inner,
    Left,
    Right,
    Full,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputSource {
    /// Base table or CTE reference, normalised (unquoted, lower-case).
    Table(String),
    Fragment(usize),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FromInput {
    pub source: InputSource,
    pub alias: Option<String>,
    /// How this input is joined to the inputs before it.
    pub join: JoinKind,
}

impl FromInput {
    /// Name the rest of the query uses to refer to this input.
    pub fn visible_name(&self) -> Option<&str> {
        self.alias.as_deref().or(match &self.source {
            InputSource::Table(t) => Some(t.rsplit('.').next().unwrap_or(t)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectItem {
    pub text: String,
    pub alias: Option<String>,
    pub is_star: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FragmentStructure {
    pub id: usize,
    /// Projection of the first SELECT arm.
    pub select_items: Vec<SelectItem>,
    /// FROM inputs across all set-operation arms.
    pub from_inputs: Vec<FromInput>,
    /// `qualifier.column IS NOT NULL` predicates found in WHERE.
    pub not_null_filters: Vec<(String, String)>,
    pub has_union_all: bool,
    pub any_star_projection: bool,
    pub child_sites: Vec<(usize, ClauseSite)>,
    /// Upper-cased own token texts, children rendered as `(?)`.
    pub words: Vec<String>,
    /// Normalised names of CTEs declared directly in this fragment.
    pub cte_names: Vec<(String, usize)>,
}

impl FragmentStructure {
    pub fn has_outer_join_null_filter(&self) -> bool {
        self.from_inputs.iter().enumerate().any(|(idx, input)| {
            let nullable: Vec<&FromInput> = match input.join {
                JoinKind::Left => vec![input],
                JoinKind::Right => self.from_inputs[..idx].iter().collect(),
                JoinKind::Full => self.from_inputs[..=idx].iter().collect(),
                _ => Vec::new(),
            };
            nullable.iter().any(|n| {
                n.visible_name()
                    .is_some_and(|name| self.not_null_filters.iter().any(|(q, _)| q.eq_ignore_ascii_case(name)))
            })
        })
    }

    /// Whether the upper-cased word sequence `op` occurs in the own tokens.
    pub fn contains_words(&self, op: &str) -> bool {
        let needle: Vec<String> = op.split_whitespace().map(str::to_ascii_uppercase).collect();
        !needle.is_empty()
            && self
                .words
                .windows(needle.len())
                .any(|w| w.iter().zip(&needle).all(|(a, b)| a == b))
    }

    pub fn has_in_subquery(&self) -> bool {
        self.words.windows(2).any(|w| w[0] == "IN" && w[1] == "(?)")
    }

    pub fn children_at(&self, site: ClauseSite) -> impl Iterator<Item = usize> + '_ {
        self.child_sites
            .iter()
            .filter(move |(_, s)| *s == site)
            .map(|(id, _)| *id)
    }
}

/// Per-fragment structure for a whole tree, indexed by fragment id.
#[derive(Debug, Clone)]
pub struct QueryStructure {
    pub fragments: Vec<FragmentStructure>,
    /// All CTE names in the query, mapped to the CTE fragment id.
    pub ctes: BTreeMap<String, usize>,
}

impl QueryStructure {
    pub fn analyze(tree: &FragmentTree) -> QueryStructure {
        let src = tree.source.as_str();
        let tokens = tokenize(src);
        let groups = Groups::match_parens(&tokens);
        let mut ctes = BTreeMap::new();

        let fragments = tree
            .fragments
            .iter()
            .map(|frag| {
                let (lo, hi) = token_range(&tokens, frag.span);
                let mut children: Vec<_> = tree.children(frag.id).collect();
                children.sort_by_key(|c| c.span.0);
                let mut items = Vec::new();
                let mut i = lo;
                let mut next_child = children.iter().peekable();
                while i < hi {
                    if let Some(c) = next_child.peek().filter(|c| c.span.0 == tokens[i].start) {
                        items.push(Item::Child(c.id));
                        while i < hi && tokens[i].end <= c.span.1 {
                            i += 1;
                        }
                        next_child.next();
                    } else {
                        items.push(Item::Tok(tokens[i].clone()));
                        i += 1;
                    }
                }

                let shape = scope_shape(&tokens, &groups, lo, hi);
                let cte_names: Vec<(String, usize)> = shape
                    .ctes
                    .iter()
                    .zip(&shape.cte_names)
                    .filter_map(|(&(blo, _), &name_idx)| {
                        let start = tokens.get(blo)?.start;
                        let cte = children.iter().find(|c| c.span.0 == start)?;
                        Some((ident_name(&tokens[name_idx], src), cte.id))
                    })
                    .collect();
                ctes.extend(cte_names.iter().cloned());

                let mut s = build(frag.id, src, &items);
                s.child_sites = children.iter().map(|c| (c.id, c.clause_site)).collect();
                s.child_sites.sort();
                s.cte_names = cte_names;
                s
            })
            .collect();
        QueryStructure { fragments, ctes }
    }

    pub fn get(&self, id: usize) -> &FragmentStructure {
        &self.fragments[id - 1]
    }

    /// Base tables each FROM input of `id` scans, following derived tables
    /// and CTE references.
    pub fn input_scans(&self, id: usize) -> Vec<BTreeSet<String>> {
        self.get(id)
            .from_inputs
            .iter()
            .map(|input| self.source_scans(&input.source, &mut BTreeSet::new()))
            .collect()
    }

    fn source_scans(&self, source: &InputSource, seen: &mut BTreeSet<usize>) -> BTreeSet<String> {
        match source {
            InputSource::Table(t) => match self.ctes.get(t) {
                Some(&cte) => self.fragment_scans(cte, seen),
                None => BTreeSet::from([t.clone()]),
            },
            InputSource::Fragment(id) => self.fragment_scans(*id, seen),
            InputSource::Unknown => BTreeSet::new(),
        }
    }

    fn fragment_scans(&self, id: usize, seen: &mut BTreeSet<usize>) -> BTreeSet<String> {
        if !seen.insert(id) {
            return BTreeSet::new();
        }
        let out = self
            .get(id)
            .from_inputs
            .iter()
            .flat_map(|input| self.source_scans(&input.source, seen))
            .collect();
        seen.remove(&id);
        out
    }

    /// Largest number of FROM inputs of `id` that scan one common base table.
    pub fn max_same_table_scans(&self, id: usize) -> usize {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for scans in self.input_scans(id) {
            for t in scans {
                *counts.entry(t).or_default() += 1;
            }
        }
        counts.into_values().max().unwrap_or(0)
    }

    /// Every base table referenced anywhere in the query, CTE names resolved
    /// away.
    pub fn base_tables(&self) -> BTreeSet<String> {
        self.fragments
            .iter()
            .flat_map(|f| &f.from_inputs)
            .filter_map(|input| match &input.source {
                InputSource::Table(t) if !self.ctes.contains_key(t) => Some(t.clone()),
                _ => None,
            })
            .collect()
    }
}

fn token_range(tokens: &[Token], span: (usize, usize)) -> (usize, usize) {
    let lo = tokens.partition_point(|t| t.start < span.0);
    let hi = tokens.partition_point(|t| t.end <= span.1);
    (lo, hi.max(lo))
}

/// Unquoted, lower-cased identifier text.
pub fn ident_name(tok: &Token, src: &str) -> String {
    let text = tok.text(src);
    match tok.kind {
        TokenKind::Ident { quoted: true } => {
            let inner = &text[1..text.len().saturating_sub(1).max(1)];
            inner.to_string()
        }
        _ => text.to_ascii_lowercase(),
    }
}

const CLAUSE_END: &[&str] = &[
    "WHERE",
    "GROUP",
    "HAVING",
    "ORDER",
    "LIMIT",
    "OFFSET",
    "QUALIFY",
    "WINDOW",
    "UNION",
    "INTERSECT",
    "EXCEPT",
    "MINUS",
];

fn build(id: usize, src: &str, items: &[Item]) -> FragmentStructure {
    let mut s = FragmentStructure {
        id,
        ..Default::default()
    };
    s.words = items
        .iter()
        .map(|it| match it {
            Item::Tok(t) => match &t.kind {
                TokenKind::Keyword(k) => k.clone(),
                _ => t.text(src).to_ascii_uppercase(),
            },
            Item::Child(_) => "(?)".to_string(),
        })
        .collect();
    // collapse `( (?) )` to a single marker so IN-subquery detection sees it
    let mut words = Vec::with_capacity(s.words.len());
    let mut k = 0;
    while k < s.words.len() {
        if s.words[k] == "("
            && s.words.get(k + 1).map(String::as_str) == Some("(?)")
            && s.words.get(k + 2).map(String::as_str) == Some(")")
        {
            words.push("(?)".to_string());
            k += 3;
        } else {
            words.push(s.words[k].clone());
            k += 1;
        }
    }
    s.words = words;

    // depth-0 clause walk
    let mut depth = 0i32;
    let mut first_select_done = false;
    let mut i = 0;
    while i < items.len() {
        let item = &items[i];
        match item.kind() {
            Some(TokenKind::LParen) => depth += 1,
            Some(TokenKind::RParen) => depth -= 1,
            _ => {}
        }
        if depth != 0 {
            i += 1;
            continue;
        }
        match item.keyword() {
            Some("SELECT") => {
                let end = clause_end(items, i + 1, &["FROM"]);
                let list = parse_select_list(src, &items[i + 1..end]);
                if list.iter().any(|it| it.is_star) {
                    s.any_star_projection = true;
                }
                if !first_select_done {
                    s.select_items = list;
                    first_select_done = true;
                }
                i = end;
                continue;
            }
            Some("FROM") => {
                let end = clause_end(items, i + 1, &[]);
                s.from_inputs.extend(parse_from(src, &items[i + 1..end]));
                i = end;
                continue;
            }
            Some("WHERE") => {
                let end = clause_end(items, i + 1, &[]);
                s.not_null_filters.extend(not_null_filters(src, &items[i + 1..end]));
                i = end;
                continue;
            }
            Some("UNION") if items.get(i + 1).and_then(Item::keyword) == Some("ALL") => s.has_union_all = true,
            _ => {}
        }
        i += 1;
    }
    s
}

/// Index of the next depth-0 clause keyword at or after `from`.
fn clause_end(items: &[Item], from: usize, extra: &[&str]) -> usize {
    let mut depth = 0i32;
    for (j, item) in items.iter().enumerate().skip(from) {
        match item.kind() {
            Some(TokenKind::LParen) => depth += 1,
            Some(TokenKind::RParen) => {
                depth -= 1;
                if depth < 0 {
                    return j;
                }
            }
            Some(TokenKind::Semicolon) if depth == 0 => return j,
            _ => {}
        }
        if depth == 0 {
            if let Some(k) = item.keyword() {
                if CLAUSE_END.contains(&k) || extra.contains(&k) || k == "SELECT" && j > from {
                    return j;
                }
            }
        }
    }
    items.len()
}

fn split_depth0(items: &[Item], is_sep: impl Fn(&Item) -> bool) -> Vec<&[Item]> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (j, item) in items.iter().enumerate() {
        match item.kind() {
            Some(TokenKind::LParen) => depth += 1,
            Some(TokenKind::RParen) => depth -= 1,
            _ => {}
        }
        if depth == 0 && is_sep(item) {
            parts.push(&items[start..j]);
            start = j + 1;
        }
    }
    parts.push(&items[start..]);
    parts
}

fn render(src: &str, items: &[Item]) -> String {
    let toks: Vec<(TokenKind, String)> = items
        .iter()
        .map(|it| match it {
            Item::Tok(t) => (t.kind.clone(), t.text(src).to_string()),
            Item::Child(id) => (TokenKind::Op, format!("<fragment {id}>")),
        })
        .collect();
    crate::lexer::join_tokens(&toks)
}

fn parse_select_list(src: &str, items: &[Item]) -> Vec<SelectItem> {
    let mut items = items;
    while let Some(k) = items.first().and_then(Item::keyword) {
        if k == "DISTINCT" || k == "ALL" {
            items = &items[1..];
        } else {
            break;
        }
    }
    if items.is_empty() {
        return Vec::new();
    }
    split_depth0(items, |it| it.kind() == Some(&TokenKind::Comma))
        .into_iter()
        .filter(|part| !part.is_empty())
        .map(|part| {
            let is_star = match part {
                [Item::Tok(t)] => t.text(src) == "*",
                [.., Item::Tok(d), Item::Tok(t)] => d.kind == TokenKind::Dot && t.text(src) == "*",
                _ => false,
            };
            let alias = match part {
                [.., Item::Tok(a), Item::Tok(name)] if a.is_keyword("AS") && name.is_ident() => {
                    Some(ident_name(name, src))
                }
                [.., prev, Item::Tok(name)]
                    if part.len() >= 2
                        && name.is_ident()
                        && !matches!(prev, Item::Tok(p) if p.kind == TokenKind::Dot || matches!(p.kind, TokenKind::Op)) =>
                {
                    Some(ident_name(name, src))
                }
                _ => None,
            };
            SelectItem {
                text: render(src, part),
                alias,
                is_star,
            }
        })
        .collect()
}

fn parse_from(src: &str, items: &[Item]) -> Vec<FromInput> {
    let mut inputs = Vec::new();
    let mut depth = 0i32;
    let mut j = 0;
    let mut pending_join = JoinKind::Implicit;
    let mut in_condition = false;
    let mut seg_start = Some(0usize);

    let flush = |start: usize, end: usize, join: JoinKind, out: &mut Vec<FromInput>| {
        if start < end {
            if let Some(input) = parse_input(src, &items[start..end], join) {
                out.push(input);
            }
        }
    };

    while j < items.len() {
        let item = &items[j];
        match item.kind() {
            Some(TokenKind::LParen) => depth += 1,
            Some(TokenKind::RParen) => depth -= 1,
            _ => {}
        }
        if depth == 0 {
            let kw = item.keyword();
            let join_word = matches!(
                kw,
                Some("JOIN" | "LEFT" | "RIGHT" | "FULL" | "INNER" | "CROSS" | "NATURAL" | "OUTER")
            );
            if item.kind() == Some(&TokenKind::Comma) || join_word {
                if let Some(start) = seg_start.take() {
                    flush(start, j, pending_join, &mut inputs);
                }
                in_condition = false;
                if item.kind() == Some(&TokenKind::Comma) {
                    pending_join = JoinKind::Implicit;
                    seg_start = Some(j + 1);
                } else {
                    // read the full join operator
                    let mut kind = JoinKind::Inner;
                    while j < items.len() {
                        match items[j].keyword() {
                            Some("LEFT") => kind = JoinKind::Left,
                            Some("RIGHT") => kind = JoinKind::Right,
                            Some("FULL") => kind = JoinKind::Full,
                            Some("CROSS") => kind = JoinKind::Cross,
                            Some("INNER" | "OUTER" | "NATURAL") => {}
                            Some("JOIN") => {
                                j += 1;
                                break;
                            }
                            _ => break,
                        }
                        j += 1;
                    }
                    pending_join = kind;
                    seg_start = Some(j);
                    continue;
                }
            } else if matches!(kw, Some("ON" | "USING")) && !in_condition {
                if let Some(start) = seg_start.take() {
                    flush(start, j, pending_join, &mut inputs);
                }
                in_condition = true;
            }
        }
        j += 1;
    }
    if let Some(start) = seg_start {
        flush(start, items.len(), pending_join, &mut inputs);
    }
    inputs
}

fn parse_input(src: &str, seg: &[Item], join: JoinKind) -> Option<FromInput> {
    let mut seg = seg;
    if seg.first().and_then(Item::keyword) == Some("LATERAL") {
        seg = &seg[1..];
    }
    let (source, rest) = match seg {
        [Item::Tok(l), Item::Child(id), Item::Tok(r), rest @ ..]
            if l.kind == TokenKind::LParen && r.kind == TokenKind::RParen =>
        {
            (InputSource::Fragment(*id), rest)
        }
        [Item::Tok(first), ..] if first.is_ident() => {
            let mut name = ident_name(first, src);
            let mut k = 1;
            while let [Item::Tok(dot), Item::Tok(part), ..] = &seg[k..] {
                if dot.kind == TokenKind::Dot && part.is_ident() {
                    name.push('.');
                    name.push_str(&ident_name(part, src));
                    k += 2;
                } else {
                    break;
                }
            }
            (InputSource::Table(name), &seg[k..])
        }
        [] => return None,
        _ => (InputSource::Unknown, &seg[seg.len()..]),
    };
    let alias = match rest {
        [Item::Tok(a), Item::Tok(name), ..] if a.is_keyword("AS") && name.is_ident() => Some(ident_name(name, src)),
        [Item::Tok(name), ..] if name.is_ident() => Some(ident_name(name, src)),
        _ => None,
    };
    Some(FromInput { source, alias, join })
}

fn not_null_filters(src: &str, items: &[Item]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for w in items.windows(6) {
        if let [Item::Tok(q), Item::Tok(dot), Item::Tok(col), is, not, null] = w {
            if q.is_ident()
                && dot.kind == TokenKind::Dot
                && col.is_ident()
                && is.keyword() == Some("IS")
                && not.keyword() == Some("NOT")
                && null.keyword() == Some("NULL")
            {
                out.push((ident_name(q, src), ident_name(col, src)));
            }
        }
    }
    out
}
