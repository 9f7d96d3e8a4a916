//! Before/after execution-time comparison for rewritten queries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::Executor;

pub const DEFAULT_TRIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPair {
    pub query_id: String,
    pub original: String,
    pub rewritten: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trials {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub query_id: String,
    /// Seconds.
    pub et_pre: f64,
    pub et_post: f64,
    pub ets: f64,
    /// Percent of `et_pre` saved; absent when `et_pre` is zero.
    pub etog: Option<f64>,
    pub trials: Trials,
}

impl BenchResult {
    pub fn from_times(query_id: &str, et_pre: f64, et_post: f64, trials: Trials) -> Self {
        let ets = et_pre - et_post;
        BenchResult {
            query_id: query_id.to_string(),
            et_pre,
            et_post,
            ets,
            etog: (et_pre > 0.0).then(|| ets / et_pre * 100.0),
            trials,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Original,
    Rewritten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecFailure {
    pub query_id: String,
    pub side: Side,
    pub error_log: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub pairs: usize,
    pub mean_etog: Option<f64>,
    pub total_ets: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub excluded: Vec<ExecFailure>,
    pub aggregate: BenchAggregate,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("trials must be at least 1")]
    NoTrials,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Runs `sql` `trials` times. With more than one trial the first run is a
/// warm-up and is left out of the median.
fn measure(executor: &dyn Executor, sql: &str, trials: usize) -> Result<(f64, Vec<f64>), String> {
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let out = executor.execute(sql);
        if !out.is_ok() {
            return Err(out.error_log.unwrap_or_else(|| "execution failed".to_string()));
        }
        times.push(out.elapsed);
    }
    let counted = if trials > 1 { &times[1..] } else { &times[..] };
    Ok((median(counted).expect("at least one timing"), times))
}

fn bench_pair(pair: &BenchPair, executor: &dyn Executor, trials: usize) -> Result<BenchResult, ExecFailure> {
    let fail = |side, error_log| ExecFailure {
        query_id: pair.query_id.clone(),
        side,
        error_log,
    };
    let (et_pre, pre) = measure(executor, &pair.original, trials).map_err(|e| fail(Side::Original, e))?;
    let (et_post, post) = measure(executor, &pair.rewritten, trials).map_err(|e| fail(Side::Rewritten, e))?;
    Ok(BenchResult::from_times(
        &pair.query_id,
        et_pre,
        et_post,
        Trials { pre, post },
    ))
}

pub fn aggregate(results: &[BenchResult]) -> BenchAggregate {
    let etogs: Vec<f64> = results.iter().filter_map(|r| r.etog).collect();
    BenchAggregate {
        pairs: results.len(),
        mean_etog: (!etogs.is_empty()).then(|| etogs.iter().sum::<f64>() / etogs.len() as f64),
        total_ets: results.iter().map(|r| r.ets).sum(),
    }
}

fn collect(outcomes: Vec<Result<BenchResult, ExecFailure>>) -> BenchReport {
    let mut results = Vec::new();
    let mut excluded = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => excluded.push(f),
        }
    }
    let aggregate = aggregate(&results);
    BenchReport {
        results,
        excluded,
        aggregate,
    }
}

/// Benchmarks each pair in turn on the same executor. Pairs where either
/// side fails are excluded and listed.
pub fn bench(pairs: &[BenchPair], executor: &dyn Executor, trials: usize) -> Result<BenchReport, BenchError> {
    if trials == 0 {
        return Err(BenchError::NoTrials);
    }
    Ok(collect(pairs.iter().map(|p| bench_pair(p, executor, trials)).collect()))
}

/// Like [`bench`] but one thread per pair. Only meaningful for simulated
/// executors, where timings do not interfere.
pub fn bench_parallel(pairs: &[BenchPair], executor: &dyn Executor, trials: usize) -> Result<BenchReport, BenchError> {
    if trials == 0 {
        return Err(BenchError::NoTrials);
    }
    let outcomes = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|p| s.spawn(move || bench_pair(p, executor, trials)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench thread")).collect()
    });
    Ok(collect(outcomes))
}
