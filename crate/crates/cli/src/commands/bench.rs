use anyhow::{Context, Result};
use sqlgov::harness::{bench as run_bench, bench_parallel, route as pick, BenchPair, IntentHint, Issue, ToolRegistry};
use sqlgov::knowledge_base::ToolId;

use super::{read_input, read_jsonl, Outcome, Output, Runtime};
use crate::{BenchArgs, Hint, RouteArgs};

pub fn bench(rt: &Runtime, args: BenchArgs, out: &Output) -> Result<Outcome> {
    let pairs: Vec<BenchPair> = read_jsonl(&args.pairs)?;
    let executor = rt.executor(args.fixtures.as_deref(), args.seed)?;
    let report = if args.parallel {
        bench_parallel(&pairs, executor.as_ref(), args.trials)?
    } else {
        run_bench(&pairs, executor.as_ref(), args.trials)?
    };
    if out.json {
        out.emit(&report);
    } else {
        println!(
            "{:<16} {:>10} {:>10} {:>10} {:>8}",
            "query", "pre (s)", "post (s)", "saved (s)", "gain %"
        );
        for r in &report.results {
            let gain = r.etog.map_or_else(|| "-".to_string(), |g| format!("{g:.1}"));
            println!(
                "{:<16} {:>10.3} {:>10.3} {:>10.3} {:>8}",
                r.query_id, r.et_pre, r.et_post, r.ets, gain
            );
        }
        let a = &report.aggregate;
        let mean = a.mean_etog.map_or_else(|| "-".to_string(), |g| format!("{g:.1}%"));
        println!("{} pair(s), mean gain {mean}, total saved {:.3}s", a.pairs, a.total_ets);
        for x in &report.excluded {
            eprintln!("excluded {} ({:?}): {}", x.query_id, x.side, x.error_log);
        }
    }
    Ok(Outcome::negative_if(!report.excluded.is_empty()))
}

fn issue(args: &RouteArgs) -> Result<Issue> {
    if let Some(path) = &args.issue {
        return serde_json::from_str(&read_input(path)?).context("parsing issue");
    }
    let sql = args.sql.as_deref().context("--sql or --issue is required")?;
    Ok(Issue {
        sql: read_input(sql)?,
        request: args.request.clone(),
        error_log: args.log.as_deref().map(read_input).transpose()?,
        hint: args.hint.map(|h| match h {
            Hint::Efficiency => IntentHint::Efficiency,
            Hint::Semantic => IntentHint::Semantic,
        }),
        ..Issue::default()
    })
}

pub fn route(rt: &Runtime, args: RouteArgs, out: &Output) -> Result<Outcome> {
    let issue = issue(&args)?;
    let tool = pick(&issue);
    if !args.run {
        if out.json {
            out.emit(&serde_json::json!({ "tool": tool }));
        } else {
            println!("{tool}");
        }
        return Ok(Outcome::Success);
    }

    let kb = rt.kb()?;
    let llm = rt.llm()?;
    let catalog = rt.catalog(None)?;
    let categories = match tool {
        ToolId::Modifier => rt.categories(None, rt.settings.modifier.pathway)?,
        _ => Vec::new(),
    };
    let ctx = rt.context(&kb, llm.as_ref(), &catalog, &categories);
    let registry = ToolRegistry::standard();
    match registry.run(tool, &issue, &ctx) {
        Ok(report) => {
            if out.json {
                out.emit(&report);
            } else {
                eprintln!("{tool}");
                out.emit(&report.output);
            }
            Ok(Outcome::negative_if(report.negative))
        }
        Err(e) => out.refusal(e),
    }
}
