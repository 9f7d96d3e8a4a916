//! SQL template extraction.
//!
//! Table names become `[TBL]`, column names `[COL]` and literals `[VAL]`.
//! Keywords are upper-cased, function names upper-cased and kept, comments
//! dropped and whitespace normalised. Masking works token by token, so
//! invalid SQL is handled too.

use crate::lexer::{join_tokens, tokenize, TokenKind};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Clause {
    /// Table position: after FROM / JOIN / INTO / UPDATE / TABLE, or a comma
    /// inside a FROM list.
    Tables,
    /// Inside a `WITH` list, where bare names are CTE names.
    With,
    Other,
}

/// Masks identifiers and literals in `sql`.
pub fn templatize(sql: &str) -> String {
    let tokens = tokenize(sql);
    let mut out: Vec<(TokenKind, String)> = Vec::with_capacity(tokens.len());
    // clause context per parenthesis depth
    let mut stack = vec![Clause::Other];

    for (i, t) in tokens.iter().enumerate() {
        let clause = *stack.last().expect("non-empty stack");
        let next_is_paren = tokens.get(i + 1).is_some_and(|n| n.kind == TokenKind::LParen);
        let prev_is_dot = i > 0 && tokens[i - 1].kind == TokenKind::Dot;
        let next_is_dot = tokens.get(i + 1).is_some_and(|n| n.kind == TokenKind::Dot);

        let rendered = match &t.kind {
            TokenKind::Keyword(k) => {
                let top = stack.last_mut().expect("non-empty stack");
                match k.as_str() {
                    "FROM" | "JOIN" | "INTO" | "UPDATE" | "TABLE" => *top = Clause::Tables,
                    "WITH" => *top = Clause::With,
                    "AS" if clause == Clause::With => {}
                    "ON" | "USING" | "WHERE" | "SELECT" | "GROUP" | "HAVING" | "ORDER" | "LIMIT" | "SET" | "VALUES"
                    | "UNION" | "INTERSECT" | "EXCEPT" | "QUALIFY" | "WINDOW" => *top = Clause::Other,
                    _ => {}
                }
                k.clone()
            }
            TokenKind::LParen => {
                stack.push(Clause::Other);
                "(".into()
            }
            TokenKind::RParen => {
                if stack.len() > 1 {
                    stack.pop();
                }
                ")".into()
            }
            TokenKind::Ident { .. } if next_is_paren && !prev_is_dot && clause != Clause::With => {
                t.text(sql).to_uppercase()
            }
            TokenKind::Ident { .. } => {
                let is_table = match clause {
                    Clause::Tables | Clause::With => true,
                    // qualifier of a qualified column
                    Clause::Other => next_is_dot && !prev_is_dot,
                };
                if is_table { "[TBL]" } else { "[COL]" }.to_string()
            }
            TokenKind::Str | TokenKind::Number => "[VAL]".into(),
            _ => t.text(sql).to_string(),
        };
        let kind = match t.kind {
            TokenKind::Str | TokenKind::Number => TokenKind::Placeholder,
            TokenKind::Ident { .. } if !rendered.starts_with('[') => t.kind.clone(),
            TokenKind::Ident { .. } => TokenKind::Placeholder,
            _ => t.kind.clone(),
        };
        out.push((kind, rendered));
    }
    join_tokens(&out)
}
