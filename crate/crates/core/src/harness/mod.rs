//! Benchmarking, issue routing and the tool registry.

mod bench;
mod route;
mod tools;

pub use bench::{
    aggregate, bench, bench_parallel, median, BenchAggregate, BenchError, BenchPair, BenchReport, BenchResult,
    ExecFailure, Side, Trials, DEFAULT_TRIALS,
};
pub use route::{mentions_performance, route, IntentHint, Issue};
pub use tools::{
    CorrectorTool, ModifierTool, RewriterTool, Tool, ToolContext, ToolError, ToolRegistry, ToolReport, VerifierTool,
};

#[cfg(test)]
mod tests;
