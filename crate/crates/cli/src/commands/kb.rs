use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sqlgov::corrector::error_key;
use sqlgov::knowledge_base::{KnowledgeSnapshot, RuleEntry, RuleStatus, StrategySpec, ToolId};
use sqlgov::self_learning::{
    apply_verification, count_threshold, dedup, filter_records, generate_rules, stage_batch, verification_due,
    Decision, ExecutionRecord,
};

use super::{read_input, read_jsonl, Outcome, Output, Runtime};
use crate::{AddEntry, EntryKind, KbCommand};

fn tool(s: &str) -> Result<ToolId> {
    s.parse().map_err(anyhow::Error::msg)
}

fn tools(filter: Option<&str>) -> Result<Vec<ToolId>> {
    Ok(match filter {
        Some(t) => vec![tool(t)?],
        None => ToolId::ALL.to_vec(),
    })
}

pub fn run(rt: &Runtime, command: KbCommand, out: &Output) -> Result<Outcome> {
    match command {
        KbCommand::Init { force } => init(rt, force, out),
        KbCommand::List { kind, tool } => list(rt, kind, tool.as_deref(), out),
        KbCommand::Add { entry } => add(rt, entry, out),
        KbCommand::Stats => stats(rt, out),
        KbCommand::Learn {
            records,
            tool: t,
            auto_accept,
        } => {
            let records: Vec<ExecutionRecord> = read_jsonl(&records)?;
            learn(rt, records, tool(&t)?, auto_accept, out)
        }
        KbCommand::Verify { decisions } => verify(rt, &read_input(&decisions)?, out),
        KbCommand::Dedup { tool: t } => run_dedup(rt, t.as_deref(), out),
    }
}

fn save(rt: &Runtime, kb: &KnowledgeSnapshot) -> Result<()> {
    let dir = rt.kb_dir()?;
    kb.save(dir).with_context(|| format!("saving {}", dir.display()))
}

fn init(rt: &Runtime, force: bool, out: &Output) -> Result<Outcome> {
    let dir = rt.kb_dir()?;
    if dir.join("meta.json").exists() && !force {
        bail!(
            "{} already holds a knowledge base (use --force to overwrite)",
            dir.display()
        );
    }
    let kb = KnowledgeSnapshot::seeded(rt.embedder.as_ref())?;
    save(rt, &kb)?;
    if out.json {
        out.emit(&serde_json::json!({"store": dir, "rules": kb.rules.len(), "strategies": kb.strategies.len()}));
    } else {
        println!(
            "initialised {} with {} rules and {} strategies",
            dir.display(),
            kb.rules.len(),
            kb.strategies.len()
        );
    }
    Ok(Outcome::Success)
}

fn list(rt: &Runtime, kind: EntryKind, filter: Option<&str>, out: &Output) -> Result<Outcome> {
    let kb = rt.kb()?;
    let keep = tools(filter)?;
    match kind {
        EntryKind::Rules => {
            let rules: Vec<&RuleEntry> = kb.rules.iter().filter(|r| keep.contains(&r.tool)).collect();
            if out.json {
                out.emit(&rules);
            } else {
                for r in rules {
                    let status = serde_json::to_value(r.status)?;
                    println!(
                        "{:<10} {:<10} {:<28} {}",
                        r.tool,
                        status.as_str().unwrap_or(""),
                        r.index,
                        r.description
                    );
                }
            }
        }
        EntryKind::Cases => {
            let cases: Vec<_> = kb.cases.iter().filter(|c| keep.contains(&c.tool)).collect();
            if out.json {
                // embeddings are bulky and derived
                let slim: Vec<_> = cases
                    .iter()
                    .map(|c| serde_json::json!({"index": c.index, "tool": c.tool, "tag": c.tag, "template": c.template, "details": c.details}))
                    .collect();
                out.emit(&slim);
            } else {
                for c in cases {
                    println!("{:<10} {:<24} [{}] {}", c.tool, c.index, c.tag.join(", "), c.template);
                }
            }
        }
        EntryKind::Strategies => {
            if out.json {
                let slim: Vec<_> = kb
                    .strategies
                    .iter()
                    .map(|s| serde_json::json!({"index": s.index, "message_pattern": s.message_pattern, "needs_schema": s.needs_schema, "localized": s.localized, "guidance": s.guidance}))
                    .collect();
                out.emit(&slim);
            } else {
                for s in &kb.strategies {
                    let flags = format!(
                        "{}{}",
                        if s.localized { "local" } else { "global" },
                        if s.needs_schema { "+schema" } else { "" }
                    );
                    println!("{:<24} {:<13} {}", s.index, flags, s.message_pattern);
                }
            }
        }
        EntryKind::Pending => {
            let batches: Vec<_> = kb.pending.iter().filter(|b| keep.contains(&b.tool)).collect();
            if out.json {
                out.emit(&batches);
            } else {
                for b in batches {
                    let labels: Vec<&str> = b.rules.iter().map(|r| r.index.as_str()).collect();
                    println!("{:<20} {:<10} {}", b.id, b.tool, labels.join(", "));
                }
            }
        }
    }
    Ok(Outcome::Success)
}

fn add(rt: &Runtime, entry: AddEntry, out: &Output) -> Result<Outcome> {
    let mut kb = rt.kb()?;
    let now = rt.settings.now;
    let label = match entry {
        AddEntry::Rule {
            tool: t,
            index,
            description,
            verified,
        } => {
            kb.add_rule(RuleEntry {
                index: index.clone(),
                description,
                matcher: None,
                tool: tool(&t)?,
                status: if verified {
                    RuleStatus::Verified
                } else {
                    RuleStatus::Candidate
                },
                created_at: now,
                verified_at: verified.then_some(now),
            })?;
            format!("rule {index}")
        }
        AddEntry::Case {
            tool: t,
            index,
            details,
            sql,
            tags,
        } => {
            kb.add_case(
                &index,
                tool(&t)?,
                &details,
                tags,
                &read_input(&sql)?,
                rt.embedder.as_ref(),
            )?;
            format!("case {index}")
        }
        AddEntry::Strategy {
            index,
            sample_log,
            guidance,
            needs_schema,
            localized,
        } => {
            let spec = StrategySpec {
                index: index.clone(),
                message_pattern: error_key(&sample_log),
                needs_schema,
                localized,
                guidance,
            };
            kb.add_strategy(spec, rt.embedder.as_ref())?;
            format!("strategy {index}")
        }
    };
    save(rt, &kb)?;
    if out.json {
        out.emit(&serde_json::json!({ "added": label }));
    } else {
        println!("added {label}");
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct ToolSummary {
    tool: ToolId,
    verified: usize,
    candidate: usize,
    retired: usize,
    cases: usize,
    pending_batches: usize,
    last_update: Option<String>,
    count_threshold: usize,
    review_due: bool,
}

fn stats(rt: &Runtime, out: &Output) -> Result<Outcome> {
    let kb = rt.kb()?;
    let cfg = &rt.settings.learning;
    let rows: Vec<ToolSummary> = ToolId::ALL
        .into_iter()
        .map(|t| {
            let count = |s: RuleStatus| kb.rules.iter().filter(|r| r.tool == t && r.status == s).count();
            ToolSummary {
                tool: t,
                verified: count(RuleStatus::Verified),
                candidate: count(RuleStatus::Candidate),
                retired: count(RuleStatus::Retired),
                cases: kb.cases.iter().filter(|c| c.tool == t).count(),
                pending_batches: kb.pending.iter().filter(|b| b.tool == t).count(),
                last_update: kb.stats.get(&t).and_then(|s| s.last_update).map(|d| d.to_rfc3339()),
                count_threshold: count_threshold(kb.n_current(t), cfg),
                review_due: verification_due(&kb, t, rt.settings.now, cfg),
            }
        })
        .collect();
    if out.json {
        out.emit(&serde_json::json!({ "tools": rows, "strategies": kb.strategies.len() }));
    } else {
        println!(
            "{:<10} {:>8} {:>9} {:>7} {:>5} {:>7}  review",
            "tool", "verified", "candidate", "retired", "cases", "pending"
        );
        for r in &rows {
            println!(
                "{:<10} {:>8} {:>9} {:>7} {:>5} {:>7}  {}",
                r.tool.as_str(),
                r.verified,
                r.candidate,
                r.retired,
                r.cases,
                r.pending_batches,
                if r.review_due { "due" } else { "-" }
            );
        }
        println!("strategies: {}", kb.strategies.len());
    }
    Ok(Outcome::Success)
}

fn learn(rt: &Runtime, records: Vec<ExecutionRecord>, t: ToolId, auto_accept: bool, out: &Output) -> Result<Outcome> {
    let kb = rt.kb()?;
    let cfg = &rt.settings.learning;
    let problematic = filter_records(&records, cfg);
    if problematic.is_empty() {
        if out.json {
            out.emit(&serde_json::json!({ "batch": null, "rules": [] }));
        } else {
            println!("no failed or slow records; nothing to learn");
        }
        return Ok(Outcome::Success);
    }
    let llm = rt.llm()?;
    let now = rt.settings.now;
    let batch = generate_rules(&problematic, t, llm.as_ref(), now)?;
    let batch_id = batch.id.clone();
    let mut next = stage_batch(&kb, batch)?;
    let staged: Vec<String> = next
        .pending
        .iter()
        .find(|b| b.id == batch_id)
        .map(|b| b.rules.iter().map(|r| r.index.clone()).collect())
        .unwrap_or_default();
    if auto_accept && !staged.is_empty() {
        let decisions: BTreeMap<String, Decision> = staged.iter().map(|i| (i.clone(), Decision::Accept)).collect();
        next = apply_verification(&next, &batch_id, &decisions, rt.embedder.as_ref(), now)?;
    }
    save(rt, &next)?;
    let due = verification_due(&next, t, now, cfg);
    if out.json {
        out.emit(&serde_json::json!({
            "batch": batch_id, "records": problematic.len(), "rules": staged,
            "accepted": auto_accept, "review_due": due
        }));
    } else {
        println!(
            "batch {batch_id}: {} rule(s) from {} record(s)",
            staged.len(),
            problematic.len()
        );
        for r in &staged {
            println!("  {r}");
        }
        if auto_accept {
            println!("accepted");
        } else if due {
            println!("expert review is due for {t}");
        }
    }
    Ok(Outcome::Success)
}

#[derive(Deserialize)]
struct DecisionSet {
    batch: String,
    decisions: BTreeMap<String, Decision>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DecisionFile {
    One(DecisionSet),
    Many(Vec<DecisionSet>),
}

fn verify(rt: &Runtime, text: &str, out: &Output) -> Result<Outcome> {
    let sets = match serde_json::from_str::<DecisionFile>(text).context("parsing decisions")? {
        DecisionFile::One(s) => vec![s],
        DecisionFile::Many(v) => v,
    };
    let mut kb = rt.kb()?;
    for s in &sets {
        kb = apply_verification(&kb, &s.batch, &s.decisions, rt.embedder.as_ref(), rt.settings.now)
            .with_context(|| format!("batch {}", s.batch))?;
    }
    save(rt, &kb)?;
    let accepted: usize = sets
        .iter()
        .map(|s| s.decisions.values().filter(|d| **d == Decision::Accept).count())
        .sum();
    let rejected: usize = sets.iter().map(|s| s.decisions.len()).sum::<usize>() - accepted;
    if out.json {
        out.emit(&serde_json::json!({ "accepted": accepted, "rejected": rejected }));
    } else {
        println!("{accepted} accepted, {rejected} rejected");
    }
    Ok(Outcome::Success)
}

fn run_dedup(rt: &Runtime, filter: Option<&str>, out: &Output) -> Result<Outcome> {
    let mut kb = rt.kb()?;
    let mut merged = BTreeMap::new();
    for t in tools(filter)? {
        let (next, report) = dedup(&kb, t, rt.embedder.as_ref(), &rt.settings.learning)?;
        kb = next;
        if !report.is_noop() {
            merged.insert(t, report.merged);
        }
    }
    if !merged.is_empty() {
        save(rt, &kb)?;
    }
    if out.json {
        out.emit(&merged);
    } else if merged.is_empty() {
        println!("no duplicates");
    } else {
        for (t, m) in &merged {
            for (survivor, absorbed) in m {
                println!("{t}: {survivor} <- {}", absorbed.join(", "));
            }
        }
    }
    Ok(Outcome::Success)
}
