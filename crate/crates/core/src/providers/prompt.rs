//! Prompt templates and the rendered prompt envelope.
//!
//! Templates are plain-text resources under `templates/v1/`. A template is a
//! list of sections separated by a `  -` line; each section is a `Name:`
//! heading followed by a body indented by four spaces. Bodies may contain
//! `{slot}` placeholders. A heading written as `Name?:` marks an optional
//! section, dropped when every slot it uses is empty.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::OnceLock;

pub const TEMPLATE_VERSION: &str = "v1";

const SECTION_SEPARATOR: &str = "\n  -\n";
const INDENT: &str = "    ";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    RuleGen,
    Scenario1,
    Scenario2,
    Rewrite,
    IntentExtract,
    Alignment,
    /// Modification prompt for an intent category id, e.g. `EXPLAIN_SQL`.
    Modify(String),
    Correct,
}

impl TemplateId {
    pub fn all_builtin() -> Vec<TemplateId> {
        let mut ids = vec![
            TemplateId::RuleGen,
            TemplateId::Scenario1,
            TemplateId::Scenario2,
            TemplateId::Rewrite,
            TemplateId::IntentExtract,
            TemplateId::Alignment,
            TemplateId::Correct,
        ];
        ids.extend(
            ["REALIZE_SEMANTICS", "EXPLAIN_SQL", "ADOPT_SYNTAX", "OTHER"]
                .into_iter()
                .map(|c| TemplateId::Modify(c.to_string())),
        );
        ids
    }

    fn source(&self) -> &'static str {
        match self {
            TemplateId::RuleGen => include_str!("../../templates/v1/rule_gen.txt"),
            TemplateId::Scenario1 => include_str!("../../templates/v1/scenario_1.txt"),
            TemplateId::Scenario2 => include_str!("../../templates/v1/scenario_2.txt"),
            TemplateId::Rewrite => include_str!("../../templates/v1/rewrite.txt"),
            TemplateId::IntentExtract => include_str!("../../templates/v1/intent_extract.txt"),
            TemplateId::Alignment => include_str!("../../templates/v1/alignment.txt"),
            TemplateId::Correct => include_str!("../../templates/v1/correct.txt"),
            TemplateId::Modify(cat) => match cat.as_str() {
                "REALIZE_SEMANTICS" => include_str!("../../templates/v1/modify_realize_semantics.txt"),
                "EXPLAIN_SQL" => include_str!("../../templates/v1/modify_explain_sql.txt"),
                "ADOPT_SYNTAX" => include_str!("../../templates/v1/modify_adopt_syntax.txt"),
                // custom categories share the generic prompt
                _ => include_str!("../../templates/v1/modify_other.txt"),
            },
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateId::RuleGen => f.write_str("RULE_GEN"),
            TemplateId::Scenario1 => f.write_str("SCENARIO_1"),
            TemplateId::Scenario2 => f.write_str("SCENARIO_2"),
            TemplateId::Rewrite => f.write_str("REWRITE"),
            TemplateId::IntentExtract => f.write_str("INTENT_EXTRACT"),
            TemplateId::Alignment => f.write_str("ALIGNMENT"),
            TemplateId::Modify(cat) => write!(f, "MODIFY_{cat}"),
            TemplateId::Correct => f.write_str("CORRECT"),
        }
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "RULE_GEN" => TemplateId::RuleGen,
            "SCENARIO_1" => TemplateId::Scenario1,
            "SCENARIO_2" => TemplateId::Scenario2,
            "REWRITE" => TemplateId::Rewrite,
            "INTENT_EXTRACT" => TemplateId::IntentExtract,
            "ALIGNMENT" => TemplateId::Alignment,
            "CORRECT" => TemplateId::Correct,
            other => match other.strip_prefix("MODIFY_") {
                Some(cat) if !cat.is_empty() => TemplateId::Modify(cat.to_string()),
                _ => return Err(format!("unknown template id `{other}`")),
            },
        })
    }
}

impl Serialize for TemplateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A fully rendered prompt: template id plus ordered, filled-in sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnvelope {
    pub template_id: TemplateId,
    pub sections: Vec<(String, String)>,
    pub digest: String,
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("slot regex"))
}

impl PromptEnvelope {
    /// Fills the template for `id` with `slots`. Missing slots render empty.
    pub fn build(id: TemplateId, slots: &BTreeMap<&str, String>) -> PromptEnvelope {
        let mut sections = Vec::new();
        for raw in id.source().trim_end_matches('\n').split(SECTION_SEPARATOR) {
            let (heading, body) = raw.split_once('\n').unwrap_or((raw, ""));
            let heading = heading.trim_end_matches(':');
            let (name, optional) = match heading.strip_suffix('?') {
                Some(n) => (n, true),
                None => (heading, false),
            };
            let body: String = body
                .lines()
                .map(|l| l.strip_prefix(INDENT).unwrap_or(l))
                .collect::<Vec<_>>()
                .join("\n");
            let mut any_filled = false;
            let mut any_slot = false;
            let filled = slot_re().replace_all(&body, |caps: &regex::Captures<'_>| {
                any_slot = true;
                let value = slots.get(&caps[1]).map(String::as_str).unwrap_or("");
                if !value.trim().is_empty() {
                    any_filled = true;
                }
                value.to_string()
            });
            if optional && any_slot && !any_filled {
                continue;
            }
            sections.push((name.to_string(), filled.into_owned()));
        }
        let mut env = PromptEnvelope {
            template_id: id,
            sections,
            digest: String::new(),
        };
        env.digest = digest_of(&env.render());
        env
    }

    /// Convenience wrapper over [`PromptEnvelope::build`].
    pub fn with_slots<'a>(id: TemplateId, slots: impl IntoIterator<Item = (&'a str, String)>) -> PromptEnvelope {
        let map: BTreeMap<&str, String> = slots.into_iter().collect();
        PromptEnvelope::build(id, &map)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (idx, (name, body)) in self.sections.iter().enumerate() {
            if idx > 0 {
                out.push_str(SECTION_SEPARATOR);
            }
            out.push_str(name);
            out.push_str(":\n");
            let indented: Vec<String> = body
                .lines()
                .map(|l| {
                    if l.is_empty() {
                        String::new()
                    } else {
                        format!("{INDENT}{l}")
                    }
                })
                .collect();
            out.push_str(&indented.join("\n"));
        }
        out.push('\n');
        out
    }

    pub fn section(&self, name: &str) -> Option<&str> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_str())
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.section(name).is_some()
    }
}

pub fn digest_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
