use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Executor, ProviderError};
use crate::knowledge_base::templatize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<u64>,
    /// Result header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<String>,
    /// Seconds.
    pub elapsed: f64,
}

impl ExecOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

/// One executor fixture line. Either `template` or `sql` identifies the
/// query; `sql` is templatized on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    pub status: ExecStatus,
    pub elapsed: f64,
    /// Relative run-to-run noise: each run takes `elapsed * (1 + spread * u)`
    /// with `u` uniform in `[-1, 1)`.
    #[serde(default)]
    pub spread: f64,
    /// Extra seconds added to the first run only (cold caches).
    #[serde(default)]
    pub cold_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<String>,
}

impl ExecFixture {
    pub fn ok(sql: &str, elapsed: f64) -> Self {
        ExecFixture {
            template: None,
            sql: Some(sql.to_string()),
            status: ExecStatus::Ok,
            elapsed,
            spread: 0.0,
            cold_penalty: 0.0,
            rows: None,
            columns: None,
            error_log: None,
        }
    }

    fn key(&self) -> String {
        match (&self.template, &self.sql) {
            (Some(t), _) => t.clone(),
            (None, Some(sql)) => templatize(sql),
            (None, None) => String::new(),
        }
    }
}

/// Executes nothing: answers from fixtures keyed by query template, with
/// seeded timing noise.
pub struct SimulatedExecutor {
    fixtures: HashMap<String, ExecFixture>,
    rng: Mutex<ChaCha8Rng>,
    warmed: Mutex<HashSet<String>>,
}

impl SimulatedExecutor {
    pub fn new(fixtures: Vec<ExecFixture>, seed: u64) -> Self {
        SimulatedExecutor {
            fixtures: fixtures.into_iter().map(|f| (f.key(), f)).collect(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            warmed: Mutex::new(HashSet::new()),
        }
    }

    pub fn from_path(path: &Path, seed: u64) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Failure(format!("reading {}: {e}", path.display())))?;
        let fixtures = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| ProviderError::Failure(format!("fixture line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(fixtures, seed))
    }
}

impl Executor for SimulatedExecutor {
    fn name(&self) -> &str {
        "simulated"
    }

    fn execute(&self, sql: &str) -> ExecOutcome {
        let key = templatize(sql);
        let Some(fx) = self.fixtures.get(&key) else {
            return ExecOutcome {
                status: ExecStatus::Error,
                rows: None,
                columns: None,
                error_log: Some(format!("ERROR: no execution fixture for query template `{key}`")),
                elapsed: 0.0,
            };
        };
        let noise = if fx.spread > 0.0 {
            let u: f64 = self.rng.lock().expect("rng lock").random_range(-1.0..1.0);
            fx.spread * u
        } else {
            0.0
        };
        let cold = if self.warmed.lock().expect("warm lock").insert(key) {
            fx.cold_penalty
        } else {
            0.0
        };
        let error_log = match fx.status {
            ExecStatus::Error => Some(
                fx.error_log
                    .clone()
                    .unwrap_or_else(|| "ERROR: query failed".to_string()),
            ),
            ExecStatus::Ok => None,
        };
        ExecOutcome {
            status: fx.status,
            rows: fx.rows,
            columns: fx.columns.clone(),
            error_log,
            elapsed: fx.elapsed * (1.0 + noise) + cold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::NESTED_REPORT;

    #[test]
    fn scripted_timing() {
        let exec = SimulatedExecutor::new(vec![ExecFixture::ok(NESTED_REPORT, 100.0)], 1);
        let out = exec.execute(NESTED_REPORT);
        assert_eq!(out.status, ExecStatus::Ok);
        assert_eq!(out.elapsed, 100.0);
    }

    #[test]
    fn literal_changes_share_a_fixture() {
        let exec = SimulatedExecutor::new(vec![ExecFixture::ok("SELECT a FROM t WHERE x = 1", 2.0)], 1);
        assert!(exec.execute("select a from t where x = 99").is_ok());
    }

    #[test]
    fn unknown_query_is_an_error_outcome() {
        let exec = SimulatedExecutor::new(Vec::new(), 1);
        let out = exec.execute("SELECT 1");
        assert_eq!(out.status, ExecStatus::Error);
        assert!(out.error_log.unwrap().contains("no execution fixture"));
    }

    #[test]
    fn noise_is_reproducible_under_a_seed() {
        let fx = ExecFixture {
            spread: 0.2,
            cold_penalty: 5.0,
            ..ExecFixture::ok("SELECT a FROM t", 10.0)
        };
        let run = |seed| {
            let exec = SimulatedExecutor::new(vec![fx.clone()], seed);
            (0..5)
                .map(|_| exec.execute("SELECT a FROM t").elapsed)
                .collect::<Vec<_>>()
        };
        let a = run(42);
        assert_eq!(a, run(42));
        assert_ne!(a, run(43));
        assert!(a[0] >= 13.0, "first run pays the cold penalty: {a:?}");
        assert!(a[1..].iter().all(|t| (8.0..12.0).contains(t)));
    }
}
