//! JSON-Lines persistence.
//!
//! A store directory holds `rules.jsonl`, `cases.jsonl`, `strategies.jsonl`,
//! `pending.jsonl` and `meta.json`. Missing record files load as empty;
//! `meta.json` is required and carries the schema version.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{KbError, KnowledgeSnapshot, ToolId, ToolStats};

pub const SCHEMA_VERSION: u32 = 1;

const RULES: &str = "rules.jsonl";
const CASES: &str = "cases.jsonl";
const STRATEGIES: &str = "strategies.jsonl";
const PENDING: &str = "pending.jsonl";
const META: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    #[serde(default)]
    stats: BTreeMap<ToolId, ToolStats>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> KbError {
    KbError::Io(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), KbError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("knowledge records serialize"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: DeserializeOwned>(dir: &Path, file: &str) -> Result<Vec<T>, KbError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| KbError::Malformed {
                file: file.to_string(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

impl KnowledgeSnapshot {
    pub fn save(&self, dir: &Path) -> Result<(), KbError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_atomic(&dir.join(RULES), &to_jsonl(&self.rules))?;
        write_atomic(&dir.join(CASES), &to_jsonl(&self.cases))?;
        write_atomic(&dir.join(STRATEGIES), &to_jsonl(&self.strategies))?;
        write_atomic(&dir.join(PENDING), &to_jsonl(&self.pending))?;
        let meta = Meta {
            schema_version: SCHEMA_VERSION,
            stats: self.stats.clone(),
        };
        let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        text.push('\n');
        write_atomic(&dir.join(META), &text)
    }

    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let meta_path = dir.join(META);
        let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| KbError::Malformed {
            file: META.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let found = raw
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| KbError::Malformed {
                file: META.into(),
                line: 1,
                message: "missing schema_version".into(),
            })?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(KbError::SchemaVersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: SCHEMA_VERSION,
            });
        }
        let meta: Meta = serde_json::from_value(raw).map_err(|e| KbError::Malformed {
            file: META.into(),
            line: 1,
            message: e.to_string(),
        })?;
        Ok(KnowledgeSnapshot {
            rules: read_jsonl(dir, RULES)?,
            cases: read_jsonl(dir, CASES)?,
            strategies: read_jsonl(dir, STRATEGIES)?,
            stats: meta.stats,
            pending: read_jsonl(dir, PENDING)?,
        })
    }
}
