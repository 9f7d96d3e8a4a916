//! Schema catalog: table name to ordered columns, with optional descriptions.
//!
//! The JSON form maps each table either to a column list or to an object
//! with a description and a column list. A column is a bare name or an
//! object with `name` and `description`:
//!
//! ```json
//! {"orders": ["id", {"name": "amount", "description": "gross, in cents"}],
//!  "users": {"description": "one row per account", "columns": ["id"]}}
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub columns: Vec<ColumnMeta>,
}

impl TableMeta {
    pub fn name_only(name: &str) -> Self {
        TableMeta {
            name: name.to_string(),
            description: None,
            columns: Vec::new(),
        }
    }

    /// `name(col, col -- description, ...)` followed by the table description;
    /// a bare name when no columns are known.
    pub fn render(&self) -> String {
        let cols: Vec<String> = self
            .columns
            .iter()
            .map(|c| match &c.description {
                Some(d) => format!("{} -- {d}", c.name),
                None => c.name.clone(),
            })
            .collect();
        let mut out = if cols.is_empty() {
            self.name.clone()
        } else {
            format!("{}({})", self.name, cols.join(", "))
        };
        if let Some(d) = &self.description {
            out.push_str(&format!(": {d}"));
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawColumn {
    Name(String),
    Full { name: String, description: Option<String> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTable {
    Columns(Vec<RawColumn>),
    Full {
        #[serde(default)]
        description: Option<String>,
        #[serde(default)]
        columns: Vec<RawColumn>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    tables: BTreeMap<String, TableMeta>,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let raw: BTreeMap<String, RawTable> = serde_json::from_str(text)?;
        let tables = raw
            .into_iter()
            .map(|(name, t)| {
                let (description, cols) = match t {
                    RawTable::Columns(c) => (None, c),
                    RawTable::Full { description, columns } => (description, columns),
                };
                let columns = cols
                    .into_iter()
                    .map(|c| match c {
                        RawColumn::Name(name) => ColumnMeta {
                            name,
                            description: None,
                        },
                        RawColumn::Full { name, description } => ColumnMeta { name, description },
                    })
                    .collect();
                (
                    name.to_ascii_lowercase(),
                    TableMeta {
                        name,
                        description,
                        columns,
                    },
                )
            })
            .collect();
        Ok(Catalog { tables })
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn insert(&mut self, table: TableMeta) {
        self.tables.insert(table.name.to_ascii_lowercase(), table);
    }

    /// Case-insensitive lookup; a schema-qualified name also matches on its
    /// last part.
    pub fn get(&self, name: &str) -> Option<&TableMeta> {
        let key = name.to_ascii_lowercase();
        self.tables
            .get(&key)
            .or_else(|| key.rsplit('.').next().and_then(|short| self.tables.get(short)))
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableMeta> {
        self.tables.values()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Catalog entry for `name`, or a name-only stand-in.
    pub fn describe(&self, name: &str) -> TableMeta {
        self.get(name).cloned().unwrap_or_else(|| TableMeta::name_only(name))
    }
}
