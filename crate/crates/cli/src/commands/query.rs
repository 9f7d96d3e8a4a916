use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use sqlgov::fragmenter::decompose_lenient;
use sqlgov::harness::{Issue, ToolRegistry};
use sqlgov::knowledge_base::ToolId;
use sqlgov::modifier::{table_frequencies, EmbeddingPathway};
use sqlgov::verifier::{EquivalenceVerdict, Verdict};

use super::{read_input, read_jsonl, Outcome, Output, Runtime};
use crate::{FixArgs, ModifyArgs, Pathway, VerifyArgs};

pub fn fragment(sql: &Path, out: &Output) -> Result<Outcome> {
    let text = read_input(sql)?;
    let tree = decompose_lenient(&text).context("nothing to decompose")?;
    if out.json {
        println!("{}", serde_json::to_string(&tree)?);
    } else {
        out.emit(&tree);
    }
    if let Some(d) = &tree.diagnostic {
        eprintln!("unparseable: {d}");
    }
    Ok(Outcome::negative_if(tree.diagnostic.is_some()))
}

pub fn rewrite(rt: &Runtime, sql: &Path, verify: bool, out: &Output) -> Result<Outcome> {
    let query = read_input(sql)?;
    let kb = rt.kb()?;
    let llm = rt.llm()?;
    let catalog = rt.catalog(None)?;
    let mut ctx = rt.context(&kb, llm.as_ref(), &catalog, &[]);
    ctx.verify_rewrites = verify;
    let issue = Issue {
        sql: query,
        ..Issue::default()
    };
    let report = ToolRegistry::standard().run(ToolId::Rewriter, &issue, &ctx)?;
    if out.json {
        out.emit(&report);
    } else {
        println!("{}", report.output["rewritten"].as_str().unwrap_or_default().trim_end());
        let applied = report.output["suggestions_applied"].as_array().map_or(0, Vec::len);
        eprintln!(
            "{applied} suggestion(s) applied; rules: {}",
            list_or_none(&report.rules_used)
        );
        if let Some(v) = report.output.get("verified") {
            let v: EquivalenceVerdict = serde_json::from_value(v.clone())?;
            eprintln!("verification: {}", describe(&v));
        }
    }
    Ok(Outcome::negative_if(report.negative))
}

fn list_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Equivalent => "EQUIVALENT",
        Verdict::NotEquivalent => "NOT_EQUIVALENT",
        Verdict::Undecided => "UNDECIDED",
    }
}

fn describe(v: &EquivalenceVerdict) -> String {
    let mut s = format!("{} (confidence {:.2})", verdict_name(v.verdict), v.confidence);
    if let Some(r) = &v.reason {
        s.push_str(&format!(": {r}"));
    }
    if let Some(c) = &v.counterexample {
        s.push_str(&format!("; counterexample: {c}"));
    }
    s
}

#[derive(Deserialize)]
struct PairLine {
    #[serde(default)]
    id: Option<String>,
    left: String,
    right: String,
}

pub fn verify(rt: &Runtime, args: VerifyArgs, out: &Output) -> Result<Outcome> {
    let pairs: Vec<PairLine> = match (&args.pairs, &args.left, &args.right) {
        (Some(p), _, _) => read_jsonl(p)?,
        (None, Some(l), Some(r)) => vec![PairLine {
            id: None,
            left: read_input(l)?,
            right: read_input(r)?,
        }],
        _ => anyhow::bail!("give --left and --right, or --pairs"),
    };
    let kb = rt.kb()?;
    let llm = rt.llm()?;
    let catalog = rt.catalog(None)?;
    let ctx = rt.context(&kb, llm.as_ref(), &catalog, &[]);
    let registry = ToolRegistry::standard();
    let mut all_equivalent = true;
    let mut reports = Vec::new();
    for (n, pair) in pairs.into_iter().enumerate() {
        let id = pair.id.unwrap_or_else(|| (n + 1).to_string());
        let issue = Issue {
            sql: pair.left,
            candidate: Some(pair.right),
            ..Issue::default()
        };
        let report = registry
            .run(ToolId::Verifier, &issue, &ctx)
            .with_context(|| format!("pair {id}"))?;
        all_equivalent &= !report.negative;
        if !out.json {
            let v: EquivalenceVerdict = serde_json::from_value(report.output.clone())?;
            if args.pairs.is_some() {
                println!("{id}\t{}", describe(&v));
            } else {
                println!("{}", describe(&v));
            }
        }
        reports.push(report);
    }
    if out.json {
        if args.pairs.is_some() {
            out.emit(&reports);
        } else {
            out.emit(&reports[0]);
        }
    }
    Ok(Outcome::negative_if(!all_equivalent))
}

/// History files hold JSON records with a `sql` field, JSON strings, or bare SQL lines.
fn read_history(path: &Path) -> Result<Vec<String>> {
    Ok(read_input(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str::<serde_json::Value>(l) {
            Ok(serde_json::Value::Object(o)) => o.get("sql").and_then(|s| s.as_str()).unwrap_or_default().to_string(),
            Ok(serde_json::Value::String(s)) => s,
            _ => l.to_string(),
        })
        .filter(|s| !s.is_empty())
        .collect())
}

pub fn modify(rt: &Runtime, args: ModifyArgs, out: &Output) -> Result<Outcome> {
    let query = read_input(&args.sql)?;
    let pathway = match args.pathway {
        Some(Pathway::Instruction) => EmbeddingPathway::Instruction,
        Some(Pathway::Masking) => EmbeddingPathway::Masking,
        None => rt.settings.modifier.pathway,
    };
    let kb = rt.kb()?;
    let llm = rt.llm()?;
    let catalog = rt.catalog(args.schema.as_deref())?;
    let categories = rt.categories(args.categories.as_deref(), pathway)?;
    let mut ctx = rt.context(&kb, llm.as_ref(), &catalog, &categories);
    ctx.modifier.pathway = pathway;
    if let Some(h) = &args.history {
        ctx.history_counts = table_frequencies(&read_history(h)?);
    }
    let issue = Issue {
        sql: query,
        request: Some(args.request),
        context: args.context.as_deref().map(read_input).transpose()?,
        ..Issue::default()
    };
    let report = match ToolRegistry::standard().run(ToolId::Modifier, &issue, &ctx) {
        Ok(r) => r,
        Err(e) => return out.refusal(e),
    };
    if out.json {
        out.emit(&report);
    } else {
        let result = &report.output["result"];
        println!("{}", result["sql"].as_str().unwrap_or_default());
        eprintln!("category: {}", result["category"].as_str().unwrap_or_default());
        if let Some(x) = result["explanation"].as_str().filter(|x| !x.is_empty()) {
            eprintln!("explanation: {x}");
        }
    }
    Ok(Outcome::Success)
}

pub fn fix_syntax(rt: &Runtime, args: FixArgs, out: &Output) -> Result<Outcome> {
    let query = read_input(&args.sql)?;
    let log = read_input(&args.log)?;
    let kb = rt.kb()?;
    let llm = rt.llm()?;
    let catalog = rt.catalog(args.schema.as_deref())?;
    let mut ctx = rt.context(&kb, llm.as_ref(), &catalog, &[]);
    ctx.max_rounds = args.max_rounds;
    let issue = Issue {
        sql: query,
        error_log: Some(log),
        ..Issue::default()
    };
    let report = match ToolRegistry::standard().run(ToolId::Corrector, &issue, &ctx) {
        Ok(r) => r,
        Err(e) => return out.refusal(e),
    };
    if out.json {
        out.emit(&report);
    } else {
        println!("{}", report.output["corrected"].as_str().unwrap_or_default());
        eprintln!(
            "scope: {}; strategy: {}",
            report.output["scope"].as_str().unwrap_or_default(),
            list_or_none(&report.strategies_used)
        );
    }
    Ok(Outcome::Success)
}
