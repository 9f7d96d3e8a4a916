//! Settings from flags, environment and `sqlgov.toml`, in that order of
//! precedence.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::Deserialize;
use sqlgov::modifier::ModifierConfig;
use sqlgov::self_learning::LearningConfig;
use sqlgov::verifier::DEFAULT_CONFIDENCE_FLOOR;

pub const CONFIG_FILE: &str = "sqlgov.toml";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub kb_dir: Option<PathBuf>,
    pub provider: Option<String>,
    pub playbook: Option<PathBuf>,
    pub embedder: Option<String>,
    pub executor: Option<String>,
    pub exec_fixtures: Option<PathBuf>,
    pub seed: Option<u64>,
    pub confidence_floor: Option<f64>,
    pub case_k: Option<usize>,
    pub schema: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub modifier: Option<ModifierConfig>,
    pub learning: Option<LearningConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.kb_dir,
            &mut cfg.playbook,
            &mut cfg.exec_fixtures,
            &mut cfg.schema,
            &mut cfg.categories,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Values given on the command line (or through their environment variables).
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub kb_dir: Option<PathBuf>,
    pub provider: Option<String>,
    pub playbook: Option<PathBuf>,
    pub now: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub kb_dir: Option<PathBuf>,
    pub provider: String,
    pub playbook: Option<PathBuf>,
    pub embedder: String,
    pub executor: String,
    pub exec_fixtures: Option<PathBuf>,
    pub seed: u64,
    pub confidence_floor: f64,
    pub case_k: usize,
    pub schema: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub modifier: ModifierConfig,
    pub learning: LearningConfig,
    pub now: DateTime<Utc>,
}

impl Settings {
    pub fn resolve(o: Overrides) -> Result<Self> {
        let file = match &o.config {
            Some(p) => FileConfig::load(p)?,
            None if Path::new(CONFIG_FILE).is_file() => FileConfig::load(Path::new(CONFIG_FILE))?,
            None => FileConfig::default(),
        };
        let playbook = o.playbook.or(file.playbook);
        // a playbook implies strict replay unless a provider is named
        let provider = o.provider.or(file.provider).unwrap_or_else(|| {
            if playbook.is_some() {
                "scripted"
            } else {
                "scripted-permissive"
            }
            .to_string()
        });
        Ok(Settings {
            kb_dir: o.kb_dir.or(file.kb_dir),
            provider,
            playbook,
            embedder: file.embedder.unwrap_or_else(|| "hashing".into()),
            executor: file.executor.unwrap_or_else(|| "simulated".into()),
            exec_fixtures: file.exec_fixtures,
            seed: file.seed.unwrap_or(0),
            confidence_floor: file.confidence_floor.unwrap_or(DEFAULT_CONFIDENCE_FLOOR),
            case_k: file.case_k.unwrap_or(sqlgov::knowledge_base::DEFAULT_CASE_K),
            schema: file.schema,
            categories: file.categories,
            modifier: file.modifier.unwrap_or_default(),
            learning: file.learning.unwrap_or_default(),
            now: o.now.unwrap_or_else(Utc::now),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_and_paths_are_relative_to_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sqlgov.toml");
        std::fs::write(
            &path,
            "kb_dir = \"kb\"\nprovider = \"scripted\"\nplaybook = \"p.jsonl\"\n[modifier]\ntheta = 0.5\n",
        )
        .unwrap();
        let s = Settings::resolve(Overrides {
            config: Some(path.clone()),
            provider: Some("scripted-permissive".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(s.provider, "scripted-permissive");
        assert_eq!(s.kb_dir, Some(dir.path().join("kb")));
        assert_eq!(s.playbook, Some(dir.path().join("p.jsonl")));
        assert_eq!(s.modifier.theta, 0.5);
        assert_eq!(s.modifier.alpha, 0.4);
    }

    #[test]
    fn playbook_alone_selects_strict_replay() {
        let s = Settings::resolve(Overrides {
            config: None,
            playbook: Some("x.jsonl".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(s.provider, "scripted");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sqlgov.toml");
        std::fs::write(&path, "kbdir = \"x\"\n").unwrap();
        assert!(FileConfig::load(&path).is_err());
    }
}
