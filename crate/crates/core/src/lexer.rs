//! A forgiving SQL tokenizer.
//!
//! The tokenizer never fails: unterminated strings and comments run to the end
//! of input, and unknown characters become single-character operators. Every
//! token records its byte span in the source so callers can slice the original
//! text back out.

use std::fmt;

/// Reserved words recognised by the structural passes. Anything else that
/// looks like a word is an identifier.
const KEYWORDS: &[&str] = &[
    "ALL",
    "ALTER",
    "AND",
    "ANY",
    "AS",
    "ASC",
    "BETWEEN",
    "BY",
    "CASE",
    "CREATE",
    "CROSS",
    "DELETE",
    "DESC",
    "DISTINCT",
    "DROP",
    "ELSE",
    "END",
    "EXCEPT",
    "EXISTS",
    "FALSE",
    "FROM",
    "FULL",
    "GROUP",
    "HAVING",
    "ILIKE",
    "IN",
    "INNER",
    "INSERT",
    "INTERSECT",
    "INTERVAL",
    "INTO",
    "IS",
    "JOIN",
    "LATERAL",
    "LEFT",
    "LIKE",
    "LIMIT",
    "MATERIALIZED",
    "MINUS",
    "NATURAL",
    "NOT",
    "NULL",
    "NULLS",
    "OFFSET",
    "ON",
    "OR",
    "ORDER",
    "OUTER",
    "OVER",
    "PARTITION",
    "QUALIFY",
    "RECURSIVE",
    "RIGHT",
    "SELECT",
    "SET",
    "SOME",
    "TABLE",
    "THEN",
    "TRUE",
    "UNION",
    "UPDATE",
    "USING",
    "VALUES",
    "WHEN",
    "WHERE",
    "WINDOW",
    "WITH",
];

/// Placeholders emitted by template masking. They lex as a single token so
/// masking is idempotent.
pub const PLACEHOLDERS: &[&str] = &["[TBL]", "[COL]", "[VAL]", "[MASK]", "[N]", "[ID]"];

pub fn is_keyword(word: &str) -> bool {
    let upper = word.to_ascii_uppercase();
    KEYWORDS.binary_search(&upper.as_str()).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    /// Upper-cased reserved word.
    Keyword(String),
    /// Bare or quoted identifier. `quoted` marks `"x"`, `` `x` `` or `[x]`.
    Ident {
        quoted: bool,
    },
    Placeholder,
    Str,
    Number,
    LParen,
    RParen,
    Comma,
    Dot,
    Semicolon,
    Op,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.start..self.end]
    }

    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.kind, TokenKind::Keyword(k) if k == kw)
    }

    pub fn keyword(&self) -> Option<&str> {
        match &self.kind {
            TokenKind::Keyword(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_ident(&self) -> bool {
        matches!(self.kind, TokenKind::Ident { .. })
    }

    pub fn is_trivia(&self) -> bool {
        self.kind == TokenKind::Comment
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Keyword(k) => write!(f, "keyword {k}"),
            other => write!(f, "{other:?}"),
        }
    }
}

/// Tokenizes `src`, comments included.
pub fn tokenize_with_comments(src: &str) -> Vec<Token> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let n = bytes.len();

    while i < n {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < n && bytes[i] != b'\n' {
                    i += 1;
                }
                TokenKind::Comment
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i < n && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                    i += 1;
                }
                i = (i + 2).min(n);
                TokenKind::Comment
            }
            b'\'' => {
                i = scan_quoted(bytes, i, b'\'');
                TokenKind::Str
            }
            b'"' => {
                i = scan_quoted(bytes, i, b'"');
                TokenKind::Ident { quoted: true }
            }
            b'`' => {
                i = scan_quoted(bytes, i, b'`');
                TokenKind::Ident { quoted: true }
            }
            b'[' => {
                if let Some(p) = PLACEHOLDERS.iter().find(|p| src[i..].starts_with(**p)) {
                    i += p.len();
                    TokenKind::Placeholder
                } else {
                    i = scan_quoted(bytes, i, b']');
                    TokenKind::Ident { quoted: true }
                }
            }
            b'(' => {
                i += 1;
                TokenKind::LParen
            }
            b')' => {
                i += 1;
                TokenKind::RParen
            }
            b',' => {
                i += 1;
                TokenKind::Comma
            }
            b';' => {
                i += 1;
                TokenKind::Semicolon
            }
            b'.' if !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                i += 1;
                TokenKind::Dot
            }
            b'0'..=b'9' | b'.' => {
                i = scan_number(bytes, i);
                TokenKind::Number
            }
            _ if is_word_start(src, i) => {
                while i < n && is_word_continue(src, i) {
                    i += char_len(src, i);
                }
                let word = &src[start..i];
                if is_keyword(word) {
                    TokenKind::Keyword(word.to_ascii_uppercase())
                } else {
                    TokenKind::Ident { quoted: false }
                }
            }
            _ => {
                i = scan_operator(src, i);
                TokenKind::Op
            }
        };
        tokens.push(Token { kind, start, end: i });
    }
    tokens
}

/// Tokenizes `src`, dropping comments.
pub fn tokenize(src: &str) -> Vec<Token> {
    tokenize_with_comments(src)
        .into_iter()
        .filter(|t| !t.is_trivia())
        .collect()
}

/// Canonical token rendering: comments dropped, keywords upper-cased,
/// whitespace collapsed. Two queries with equal normal forms differ only in
/// layout, comments and keyword case.
pub fn normalize(src: &str) -> String {
    let toks = tokenize(src);
    let words: Vec<(TokenKind, String)> = toks
        .iter()
        .map(|t| {
            let text = match &t.kind {
                TokenKind::Keyword(k) => k.clone(),
                _ => t.text(src).to_string(),
            };
            (t.kind.clone(), text)
        })
        .collect();
    join_tokens(&words)
}

/// Joins rendered tokens with single spaces, omitting the space around dots,
/// before commas/closing parens/semicolons, after opening parens, and
/// between a function name and its argument list.
pub fn join_tokens(tokens: &[(TokenKind, String)]) -> String {
    let mut out = String::new();
    for (idx, (kind, text)) in tokens.iter().enumerate() {
        if idx > 0 {
            let prev = &tokens[idx - 1].0;
            let glue = matches!(
                kind,
                TokenKind::Comma | TokenKind::RParen | TokenKind::Dot | TokenKind::Semicolon
            ) || matches!(prev, TokenKind::LParen | TokenKind::Dot)
                || (*kind == TokenKind::LParen && matches!(prev, TokenKind::Ident { .. }));
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(text);
    }
    out
}

fn scan_quoted(bytes: &[u8], start: usize, close: u8) -> usize {
    let mut i = start + 1;
    while i < bytes.len() {
        if bytes[i] == close {
            // doubled quote is an escape
            if close != b']' && bytes.get(i + 1) == Some(&close) {
                i += 2;
                continue;
            }
            return i + 1;
        }
        if bytes[i] == b'\\' && close == b'\'' {
            i += 2;
            continue;
        }
        i += 1;
    }
    bytes.len()
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    let n = bytes.len();
    while i < n && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
        i += 1;
    }
    if i < n && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < n && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        if j < n && bytes[j].is_ascii_digit() {
            i = j;
            while i < n && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    i
}

fn scan_operator(src: &str, start: usize) -> usize {
    const TWO_CHAR: &[&str] = &["<=", ">=", "<>", "!=", "||", "::", "=>", "->"];
    if TWO_CHAR.iter().any(|op| src[start..].starts_with(op)) {
        start + 2
    } else {
        start + char_len(src, start)
    }
}

fn char_len(src: &str, i: usize) -> usize {
    src[i..].chars().next().map_or(1, char::len_utf8)
}

fn is_word_start(src: &str, i: usize) -> bool {
    src[i..]
        .chars()
        .next()
        .is_some_and(|c| c.is_alphabetic() || c == '_' || c == '@' || c == '$')
}

fn is_word_continue(src: &str, i: usize) -> bool {
    src[i..]
        .chars()
        .next()
        .is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '$')
}
