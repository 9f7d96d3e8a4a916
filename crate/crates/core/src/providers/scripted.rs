use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::prompt::{PromptEnvelope, TemplateId};
use super::{LlmProvider, ProviderError};

/// One playbook line: `{"template_id": ..., "digest": ..., "response": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookEntry {
    pub template_id: TemplateId,
    pub digest: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaybookMode {
    /// Unknown digests fail with [`ProviderError::MockMiss`].
    Strict,
    /// Unknown digests get a template-specific default answer.
    Permissive,
}

/// LLM stand-in that answers from a playbook keyed by template and digest.
pub struct ScriptedLlm {
    entries: HashMap<(TemplateId, String), String>,
    mode: PlaybookMode,
    calls: AtomicUsize,
    misses: Mutex<Vec<(TemplateId, String)>>,
}

impl ScriptedLlm {
    pub fn new(entries: Vec<PlaybookEntry>, mode: PlaybookMode) -> Self {
        ScriptedLlm {
            entries: entries
                .into_iter()
                .map(|e| ((e.template_id, e.digest), e.response))
                .collect(),
            mode,
            calls: AtomicUsize::new(0),
            misses: Mutex::new(Vec::new()),
        }
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<PlaybookEntry>, ProviderError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| ProviderError::Failure(format!("playbook line {}: {e}", n + 1)))
            })
            .collect()
    }

    pub fn from_path(path: &Path, mode: PlaybookMode) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Failure(format!("reading {}: {e}", path.display())))?;
        Ok(Self::new(Self::parse_jsonl(&text)?, mode))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Prompts that had no playbook entry, in call order.
    pub fn misses(&self) -> Vec<(TemplateId, String)> {
        self.misses.lock().expect("miss lock").clone()
    }
}

/// What a permissive playbook answers when it has no scripted response.
pub fn default_response(prompt: &PromptEnvelope) -> String {
    let section = |name: &str| prompt.section(name).unwrap_or_default().to_string();
    match &prompt.template_id {
        TemplateId::RuleGen => "{}".into(),
        TemplateId::Scenario1 => r#"{"rules": []}"#.into(),
        TemplateId::Scenario2 => r#"{"efficient": true, "action": "", "rationale": ""}"#.into(),
        TemplateId::Rewrite => section("Original SQL"),
        TemplateId::IntentExtract => r#"{"fields": [], "narrative": ""}"#.into(),
        TemplateId::Alignment => r#"{"mapping": [], "counterexample": null}"#.into(),
        TemplateId::Modify(_) => serde_json::json!({
            "sql": section("Target SQL"),
            "explanation": ""
        })
        .to_string(),
        TemplateId::Correct => section("SQL"),
    }
}

impl LlmProvider for ScriptedLlm {
    fn name(&self) -> &str {
        match self.mode {
            PlaybookMode::Strict => "scripted",
            PlaybookMode::Permissive => "scripted-permissive",
        }
    }

    fn complete(&self, prompt: &PromptEnvelope) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = (prompt.template_id.clone(), prompt.digest.clone());
        if let Some(resp) = self.entries.get(&key) {
            return Ok(resp.clone());
        }
        self.misses.lock().expect("miss lock").push(key);
        match self.mode {
            PlaybookMode::Strict => Err(ProviderError::MockMiss {
                template_id: prompt.template_id.to_string(),
                digest: prompt.digest.clone(),
            }),
            PlaybookMode::Permissive => Ok(default_response(prompt)),
        }
    }
}
