use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const UNKNOWN_EXCEPTION: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLocation {
    /// 1-based line and column.
    LineColumn { line: usize, column: usize },
    /// 0-based byte offset.
    Offset(usize),
    /// Text the DBMS quoted as the failure point.
    Near(String),
}

impl ErrorLocation {
    /// Byte offset into `query`, if the location can be resolved.
    pub fn resolve(&self, query: &str) -> Option<usize> {
        let offset = match self {
            ErrorLocation::Offset(o) => *o,
            ErrorLocation::Near(text) => query
                .find(text.as_str())
                .or_else(|| query.to_lowercase().find(&text.to_lowercase()))?,
            ErrorLocation::LineColumn { line, column } => {
                let line_start = if *line <= 1 {
                    0
                } else {
                    query.match_indices('\n').nth(line - 2)?.0 + 1
                };
                let line_text = query[line_start..].split('\n').next().unwrap_or("");
                // columns count characters, not bytes
                let col = column.saturating_sub(1);
                line_start
                    + line_text
                        .char_indices()
                        .nth(col)
                        .map(|(i, _)| i)
                        .unwrap_or(line_text.len())
            }
        };
        (offset < query.len()).then_some(offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedError {
    pub exception_type: String,
    pub location: Option<ErrorLocation>,
    pub message: String,
    pub raw_log: String,
}

impl ParsedError {
    /// Retrieval key: type and message with locations, names and numbers masked.
    pub fn key(&self) -> String {
        format!("{}: {}", self.exception_type, mask_message(&self.message))
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

fn exception_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(
        &RE,
        r"(?:[A-Za-z_][\w$]*\.)*([A-Za-z_][\w$]*(?:Exception|Error))(?::|\s*$)",
    )
}

fn code_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(
        &RE,
        r"\b(ORA-\d{5}|SQLSTATE\[?\s*[0-9A-Z]{5}\]?|ERROR\s+\d{3,5}(?:\s*\([0-9A-Z]{5}\))?|ERROR)\b:?",
    )
}

fn line_col_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?i)\bline\s+(\d+)\s*,?\s*col(?:umn)?\s+(\d+)")
}

fn offset_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"(?i)\bat\s+(?:character|position|offset)\s+(\d+)")
}

fn near_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r#"(?i)\bat or near\s+"([^"]*)"|\bnear\s+'([^']*)'"#)
}

fn location_phrase_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(
        &RE,
        r#"(?i)(?:\b(?:from\s+)?(?:at\s+)?line\s+\d+\s*,?\s*col(?:umn)?\s+\d+(?:\s+to\s+line\s+\d+\s*,?\s*col(?:umn)?\s+\d+)?\s*:?)|(?:\bat\s+(?:character|position|offset)\s+\d+)|(?:\bat or near\s+"[^"]*")"#,
    )
}

/// Extracts exception type, location and message from a raw DBMS log.
///
/// The deepest (last) exception in a chain wins. Logs without a recognised
/// exception or error code get type `UNKNOWN` and their first non-empty line
/// as message.
pub fn parse_error_log(log: &str) -> ParsedError {
    let location = find_location(log);
    let lines: Vec<&str> = log.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let first_line = lines.first().copied().unwrap_or("").to_string();

    let mut found: Option<(String, String)> = None;
    for (n, line) in lines.iter().enumerate() {
        if line.starts_with("at ") {
            // stack frame
            continue;
        }
        let hit = exception_re()
            .captures_iter(line)
            .last()
            .map(|c| (c[1].to_string(), c.get(0).expect("match").end()))
            .or_else(|| {
                code_re()
                    .captures(line)
                    .map(|c| (c[1].to_string(), c.get(0).expect("match").end()))
            });
        let Some((ty, end)) = hit else { continue };
        let mut message = first_sentence(&strip_locations(&line[end..]));
        if message.is_empty() {
            message = lines
                .get(n + 1)
                .map(|l| first_sentence(&strip_locations(l)))
                .unwrap_or_default();
        }
        if !message.is_empty() || found.is_none() {
            found = Some((ty, message));
        }
    }

    match found {
        Some((ty, message)) if !message.is_empty() => ParsedError {
            exception_type: ty,
            location,
            message,
            raw_log: log.to_string(),
        },
        Some((ty, _)) => ParsedError {
            exception_type: ty,
            location,
            message: first_line,
            raw_log: log.to_string(),
        },
        None => ParsedError {
            exception_type: UNKNOWN_EXCEPTION.to_string(),
            location,
            message: first_line,
            raw_log: log.to_string(),
        },
    }
}

fn find_location(log: &str) -> Option<ErrorLocation> {
    if let Some(c) = line_col_re().captures(log) {
        return Some(ErrorLocation::LineColumn {
            line: c[1].parse().ok()?,
            column: c[2].parse().ok()?,
        });
    }
    if let Some(c) = offset_re().captures(log) {
        // DBMS positions are 1-based
        let pos: usize = c[1].parse().ok()?;
        return Some(ErrorLocation::Offset(pos.saturating_sub(1)));
    }
    near_re().captures(log).and_then(|c| {
        c.get(1)
            .or_else(|| c.get(2))
            .map(|m| m.as_str().to_string())
            .filter(|s| !s.is_empty())
            .map(ErrorLocation::Near)
    })
}

fn strip_locations(text: &str) -> String {
    location_phrase_re().replace_all(text, " ").to_string()
}

fn first_sentence(text: &str) -> String {
    let text = text.trim().trim_start_matches([':', '-']).trim();
    let mut end = text.len();
    let bytes = text.as_bytes();
    for (i, ch) in text.char_indices() {
        if ch == '.' && bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace()) {
            end = i;
            break;
        }
    }
    collapse_ws(&text[..end])
}

fn collapse_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Masks quoted names as `[ID]` and numbers as `[N]`.
pub fn mask_message(message: &str) -> String {
    static QUOTED: OnceLock<Regex> = OnceLock::new();
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let stripped = strip_locations(message);
    let quoted = re(&QUOTED, r#"'[^']*'|"[^"]*"|`[^`]*`"#).replace_all(&stripped, "[ID]");
    let numbered = re(&NUMBER, r"\b\d+(?:\.\d+)?\b").replace_all(&quoted, "[N]");
    collapse_ws(&numbered)
}

/// Retrieval key for a raw log.
pub fn error_key(log: &str) -> String {
    parse_error_log(log).key()
}
