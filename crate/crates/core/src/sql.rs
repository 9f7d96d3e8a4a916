//! Syntax validation backed by `sqlparser`.
//!
//! A query counts as valid when any of the supported dialects accepts it.

use sqlparser::dialect::{Dialect, GenericDialect, MySqlDialect, PostgreSqlDialect};
use sqlparser::parser::Parser;

/// Returns the first dialect's diagnostic when no dialect parses `query`.
pub fn validate(query: &str) -> Result<(), String> {
    let dialects: [&dyn Dialect; 3] = [&GenericDialect {}, &MySqlDialect {}, &PostgreSqlDialect {}];
    let mut first_err = None;
    for dialect in dialects {
        match Parser::parse_sql(dialect, query) {
            Ok(stmts) if !stmts.is_empty() => return Ok(()),
            Ok(_) => {
                first_err.get_or_insert_with(|| "no statement found".to_string());
            }
            Err(e) => {
                first_err.get_or_insert_with(|| e.to_string());
            }
        }
    }
    Err(first_err.unwrap_or_default())
}

pub fn is_valid(query: &str) -> bool {
    validate(query).is_ok()
}
