mod bench;
mod kb;
mod query;

use std::io::{Read, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sqlgov::catalog::Catalog;
use sqlgov::harness::{ToolContext, ToolError};
use sqlgov::knowledge_base::KnowledgeSnapshot;
use sqlgov::modifier::{default_category_specs, parse_categories, with_centroids, EmbeddingPathway, IntentCategory};
use std::sync::Arc;

use sqlgov::providers::{EmbeddingProvider, Executor, LlmProvider, ProviderConfig, ProviderRegistry};

use crate::settings::{Overrides, Settings};
use crate::Command;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The tool ran and answered no.
    Negative,
}

impl Outcome {
    pub fn code(self) -> ExitCode {
        match self {
            Outcome::Success => ExitCode::SUCCESS,
            Outcome::Negative => ExitCode::from(1),
        }
    }

    fn negative_if(cond: bool) -> Self {
        if cond {
            Outcome::Negative
        } else {
            Outcome::Success
        }
    }
}

pub struct Output {
    pub json: bool,
}

impl Output {
    pub fn emit<T: Serialize>(&self, value: &T) {
        // a closed pipe is not worth a panic
        let _ = writeln!(
            std::io::stdout(),
            "{}",
            serde_json::to_string_pretty(value).expect("output serializes")
        );
    }

    pub fn error(&self, e: &anyhow::Error) {
        if self.json {
            self.emit(&serde_json::json!({ "error": format!("{e:#}") }));
        } else {
            eprintln!("error: {e:#}");
        }
    }

    /// Reports a tool refusal and maps it to exit code 1; anything else is
    /// passed on as an operational error.
    fn refusal(&self, e: ToolError) -> Result<Outcome> {
        if !e.is_negative() {
            return Err(e.into());
        }
        if self.json {
            self.emit(&serde_json::json!({ "negative": true, "error": e.to_string() }));
        } else {
            eprintln!("{e}");
        }
        Ok(Outcome::Negative)
    }
}

pub fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
        return Ok(s);
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Non-empty lines of a JSONL file, parsed.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_input(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
        .collect()
}

pub struct Runtime {
    pub settings: Settings,
    registry: ProviderRegistry,
    pub embedder: Arc<dyn EmbeddingProvider>,
}

impl Runtime {
    fn new(settings: Settings) -> Result<Self> {
        let registry = ProviderRegistry::with_builtins();
        let embedder = registry.embedder(&provider_config(&settings))?;
        Ok(Runtime {
            settings,
            registry,
            embedder,
        })
    }

    pub fn llm(&self) -> Result<Arc<dyn LlmProvider>> {
        Ok(self.registry.llm(&provider_config(&self.settings))?)
    }

    pub fn executor(&self, fixtures: Option<&Path>, seed: Option<u64>) -> Result<Arc<dyn Executor>> {
        let mut cfg = provider_config(&self.settings);
        match fixtures.map(Path::to_path_buf).or(cfg.executor_fixtures.take()) {
            Some(f) => cfg.executor_fixtures = Some(f),
            None => bail!("the executor needs fixtures; pass --fixtures or set exec_fixtures"),
        }
        if let Some(s) = seed {
            cfg.executor_seed = s;
        }
        Ok(self.registry.executor(&cfg)?)
    }

    /// The store at the configured directory, or the seed when none is set.
    pub fn kb(&self) -> Result<KnowledgeSnapshot> {
        match &self.settings.kb_dir {
            Some(dir) => {
                if !dir.join("meta.json").is_file() {
                    bail!("no knowledge base at {} (run `sqlgov kb init`)", dir.display());
                }
                Ok(KnowledgeSnapshot::load(dir)?)
            }
            None => Ok(KnowledgeSnapshot::seeded(self.embedder.as_ref())?),
        }
    }

    pub fn kb_dir(&self) -> Result<&Path> {
        self.settings
            .kb_dir
            .as_deref()
            .context("this command writes to the store; pass --kb <dir> or set SQLGOV_KB_DIR")
    }

    pub fn catalog(&self, flag: Option<&Path>) -> Result<Catalog> {
        match flag.or(self.settings.schema.as_deref()) {
            Some(p) => Catalog::load(p).with_context(|| format!("loading catalog {}", p.display())),
            None => Ok(Catalog::default()),
        }
    }

    pub fn categories(&self, flag: Option<&Path>, pathway: EmbeddingPathway) -> Result<Vec<IntentCategory>> {
        let specs = match flag.or(self.settings.categories.as_deref()) {
            Some(p) => parse_categories(&read_input(p)?)?,
            None => default_category_specs(),
        };
        let (cats, empty) = with_centroids(specs, self.embedder.as_ref(), pathway)?;
        if !empty.is_empty() {
            eprintln!("warning: categories without examples: {}", empty.join(", "));
        }
        Ok(cats)
    }

    pub fn context<'a>(
        &'a self,
        kb: &'a KnowledgeSnapshot,
        llm: &'a dyn LlmProvider,
        catalog: &'a Catalog,
        categories: &'a [IntentCategory],
    ) -> ToolContext<'a> {
        let mut ctx = ToolContext::new(kb, llm, self.embedder.as_ref(), catalog, categories);
        ctx.modifier = self.settings.modifier.clone();
        ctx.now = self.settings.now;
        ctx.confidence_floor = self.settings.confidence_floor;
        ctx.case_k = self.settings.case_k;
        ctx
    }
}

fn provider_config(s: &Settings) -> ProviderConfig {
    ProviderConfig {
        llm: s.provider.clone(),
        playbook: s.playbook.clone(),
        embedding: s.embedder.clone(),
        executor: s.executor.clone(),
        executor_fixtures: s.exec_fixtures.clone(),
        executor_seed: s.seed,
        ..ProviderConfig::default()
    }
}

pub fn run(command: Command, overrides: Overrides, out: &Output) -> Result<Outcome> {
    let rt = Runtime::new(Settings::resolve(overrides)?)?;
    match command {
        Command::Fragment { sql } => query::fragment(&sql, out),
        Command::Rewrite { sql, verify } => query::rewrite(&rt, &sql, verify, out),
        Command::Verify(args) => query::verify(&rt, args, out),
        Command::Modify(args) => query::modify(&rt, args, out),
        Command::FixSyntax(args) => query::fix_syntax(&rt, args, out),
        Command::Kb { command } => kb::run(&rt, command, out),
        Command::Bench(args) => bench::bench(&rt, args, out),
        Command::Route(args) => bench::route(&rt, args, out),
    }
}
