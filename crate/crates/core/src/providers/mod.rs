//! Contracts for external services and their offline implementations.
//!
//! Three services are abstracted: LLM completion ([`LlmProvider`]), text
//! embedding ([`EmbeddingProvider`]) and query execution ([`Executor`]).
//! Concrete providers are registered by name in a [`ProviderRegistry`] and
//! selected at runtime from a [`ProviderConfig`].

mod embedding;
mod executor;
pub mod prompt;
pub mod response;
mod scripted;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{HashingEmbedder, DEFAULT_EMBEDDING_DIM};
pub use executor::{ExecFixture, ExecOutcome, ExecStatus, SimulatedExecutor};
pub use prompt::{PromptEnvelope, TemplateId};
pub use response::extract_json;
pub use scripted::{default_response, PlaybookEntry, PlaybookMode, ScriptedLlm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider failure: {0}")]
    Failure(String),
    #[error("no playbook entry for {template_id} with digest {digest}")]
    MockMiss { template_id: String, digest: String },
    #[error("cannot embed empty text")]
    EmptyText,
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &PromptEnvelope) -> Result<String, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Unit-length embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;

    /// Embedding steered by a task instruction. Providers without instruction
    /// support embed the text alone.
    fn embed_with_instruction(&self, _instruction: &str, text: &str) -> Result<Vec<f64>, ProviderError> {
        self.embed(text)
    }
}

pub trait Executor: Send + Sync {
    fn name(&self) -> &str;
    fn execute(&self, sql: &str) -> ExecOutcome;
}

impl<T: LlmProvider + ?Sized> LlmProvider for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, prompt: &PromptEnvelope) -> Result<String, ProviderError> {
        (**self).complete(prompt)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        (**self).embed(text)
    }
    fn embed_with_instruction(&self, instruction: &str, text: &str) -> Result<Vec<f64>, ProviderError> {
        (**self).embed_with_instruction(instruction, text)
    }
}

/// LLM answered by a closure. Used to author playbooks and in tests.
pub struct FnLlm<F>(pub F);

impl<F> LlmProvider for FnLlm<F>
where
    F: Fn(&PromptEnvelope) -> String + Send + Sync,
{
    fn name(&self) -> &str {
        "closure"
    }

    fn complete(&self, prompt: &PromptEnvelope) -> Result<String, ProviderError> {
        Ok((self.0)(prompt))
    }
}

/// One recorded LLM exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub template_id: TemplateId,
    pub digest: String,
    pub prompt: String,
    pub response: Result<String, String>,
}

/// Wraps an LLM provider and records every call.
pub struct RecordingLlm<P> {
    inner: P,
    log: Mutex<Vec<Exchange>>,
}

impl<P: LlmProvider> RecordingLlm<P> {
    pub fn new(inner: P) -> Self {
        RecordingLlm {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.log.lock().expect("log lock").len()
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().expect("log lock").clone()
    }
}

impl<P: LlmProvider> LlmProvider for RecordingLlm<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, prompt: &PromptEnvelope) -> Result<String, ProviderError> {
        let result = self.inner.complete(prompt);
        self.log.lock().expect("log lock").push(Exchange {
            template_id: prompt.template_id.clone(),
            digest: prompt.digest.clone(),
            prompt: prompt.render(),
            response: result.clone().map_err(|e| e.to_string()),
        });
        result
    }
}

/// Runtime provider selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// Registered LLM provider name.
    pub llm: String,
    pub playbook: Option<PathBuf>,
    pub embedding: String,
    pub embedding_dim: usize,
    pub executor: String,
    pub executor_fixtures: Option<PathBuf>,
    pub executor_seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            llm: "scripted".into(),
            playbook: None,
            embedding: "hashing".into(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            executor: "simulated".into(),
            executor_fixtures: None,
            executor_seed: 7,
        }
    }
}

type LlmFactory = Box<dyn Fn(&ProviderConfig) -> Result<Arc<dyn LlmProvider>, ProviderError> + Send + Sync>;
type EmbedFactory = Box<dyn Fn(&ProviderConfig) -> Result<Arc<dyn EmbeddingProvider>, ProviderError> + Send + Sync>;
type ExecFactory = Box<dyn Fn(&ProviderConfig) -> Result<Arc<dyn Executor>, ProviderError> + Send + Sync>;

/// Name-keyed factories for every provider kind.
pub struct ProviderRegistry {
    llms: BTreeMap<String, LlmFactory>,
    embedders: BTreeMap<String, EmbedFactory>,
    executors: BTreeMap<String, ExecFactory>,
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        ProviderRegistry {
            llms: BTreeMap::new(),
            embedders: BTreeMap::new(),
            executors: BTreeMap::new(),
        }
    }

    /// Registry with the built-in offline providers.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        for (name, mode) in [
            ("scripted", PlaybookMode::Strict),
            ("scripted-permissive", PlaybookMode::Permissive),
        ] {
            reg.register_llm(name, move |cfg| {
                let llm = match &cfg.playbook {
                    Some(path) => ScriptedLlm::from_path(path, mode)?,
                    None if mode == PlaybookMode::Permissive => ScriptedLlm::new(Vec::new(), mode),
                    None => return Err(ProviderError::Failure("the scripted provider needs a playbook".into())),
                };
                Ok(Arc::new(llm))
            });
        }
        reg.register_embedder("hashing", |cfg| Ok(Arc::new(HashingEmbedder::new(cfg.embedding_dim))));
        reg.register_executor("simulated", |cfg| {
            let exec = match &cfg.executor_fixtures {
                Some(path) => SimulatedExecutor::from_path(path, cfg.executor_seed)?,
                None => SimulatedExecutor::new(Vec::new(), cfg.executor_seed),
            };
            Ok(Arc::new(exec))
        });
        reg
    }

    pub fn register_llm(
        &mut self,
        name: &str,
        f: impl Fn(&ProviderConfig) -> Result<Arc<dyn LlmProvider>, ProviderError> + Send + Sync + 'static,
    ) {
        self.llms.insert(name.to_string(), Box::new(f));
    }

    pub fn register_embedder(
        &mut self,
        name: &str,
        f: impl Fn(&ProviderConfig) -> Result<Arc<dyn EmbeddingProvider>, ProviderError> + Send + Sync + 'static,
    ) {
        self.embedders.insert(name.to_string(), Box::new(f));
    }

    pub fn register_executor(
        &mut self,
        name: &str,
        f: impl Fn(&ProviderConfig) -> Result<Arc<dyn Executor>, ProviderError> + Send + Sync + 'static,
    ) {
        self.executors.insert(name.to_string(), Box::new(f));
    }

    pub fn llm_names(&self) -> Vec<&str> {
        self.llms.keys().map(String::as_str).collect()
    }

    pub fn llm(&self, cfg: &ProviderConfig) -> Result<Arc<dyn LlmProvider>, ProviderError> {
        lookup(&self.llms, "LLM provider", &cfg.llm)?(cfg)
    }

    pub fn embedder(&self, cfg: &ProviderConfig) -> Result<Arc<dyn EmbeddingProvider>, ProviderError> {
        lookup(&self.embedders, "embedding provider", &cfg.embedding)?(cfg)
    }

    pub fn executor(&self, cfg: &ProviderConfig) -> Result<Arc<dyn Executor>, ProviderError> {
        lookup(&self.executors, "executor", &cfg.executor)?(cfg)
    }
}

fn lookup<'a, F>(map: &'a BTreeMap<String, F>, kind: &str, name: &str) -> Result<&'a F, ProviderError> {
    map.get(name).ok_or_else(|| {
        let known: Vec<&str> = map.keys().map(String::as_str).collect();
        ProviderError::Failure(format!("unknown {kind} `{name}` (known: {})", known.join(", ")))
    })
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_resolves_defaults() {
        let reg = ProviderRegistry::with_builtins();
        let cfg = ProviderConfig::default();
        assert!(reg.llm(&cfg).is_err(), "strict replay needs a playbook");
        let permissive = ProviderConfig {
            llm: "scripted-permissive".into(),
            ..Default::default()
        };
        assert_eq!(reg.llm(&permissive).unwrap().name(), "scripted-permissive");
        assert_eq!(reg.embedder(&cfg).unwrap().dim(), 768);
        assert_eq!(reg.executor(&cfg).unwrap().name(), "simulated");
        assert_eq!(reg.llm_names(), ["scripted", "scripted-permissive"]);
    }

    #[test]
    fn unknown_provider_is_an_error() {
        let reg = ProviderRegistry::with_builtins();
        let cfg = ProviderConfig {
            llm: "hosted".into(),
            ..Default::default()
        };
        let err = reg.llm(&cfg).err().unwrap().to_string();
        assert!(err.contains("scripted-permissive"), "{err}");
    }

    #[test]
    fn recording_counts_calls() {
        let rec = RecordingLlm::new(ScriptedLlm::new(Vec::new(), PlaybookMode::Permissive));
        let env = PromptEnvelope::with_slots(TemplateId::RuleGen, []);
        rec.complete(&env).unwrap();
        rec.complete(&env).unwrap();
        assert_eq!(rec.calls(), 2);
        assert_eq!(rec.exchanges()[0].digest, env.digest);
    }
}
