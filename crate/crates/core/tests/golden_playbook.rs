//! The committed strict playbook replays the nested report pipeline.
//!
//! Run with `SQLGOV_BLESS=1` to regenerate the playbook after a prompt change.

use std::path::PathBuf;

use serde_json::json;
use sqlgov::knowledge_base::KnowledgeSnapshot;
use sqlgov::lexer::normalize;
use sqlgov::providers::{
    FnLlm, HashingEmbedder, PlaybookEntry, PlaybookMode, PromptEnvelope, RecordingLlm, ScriptedLlm, TemplateId,
};
use sqlgov::rewriter::optimize;
use sqlgov::verifier::{check_equivalence, Analyzed, Verdict, DEFAULT_CONFIDENCE_FLOOR};

const ORIGINAL: &str = include_str!("fixtures/nested_report.sql");
const REWRITTEN: &str = include_str!("fixtures/nested_report_rewritten.sql");

fn playbook_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_playbook.jsonl")
}

fn main_intent(rewritten: bool) -> String {
    let join = if rewritten {
        "tb1 inner join tb2 on ds"
    } else {
        "tb1 left join tb2 on ds, tb2.ds not null"
    };
    json!({
        "fields": [
            {"output_name": "c0", "source_tables": ["tb0", "tb1", "tb2"], "transformation": "",
             "conditions": [join, "tb1.dcrs <= ratio of the 1014-1015 minimum daily count to the 1016 count over tb0, default 100"]},
            {"output_name": "c1 - c2", "source_tables": ["tb3"], "transformation": "tb3.c1 - tb3.c2 for the row's ds",
             "conditions": ["tb3.ds = tb1.ds"]},
            {"output_name": "AVG(c3)", "source_tables": ["tb4"], "transformation": "average of tb4.c3 for the row's ds",
             "conditions": ["tb4.ds = tb1.ds", "tb4.c3 > 100"]}
        ],
        "narrative": "Per-day report over tb1 rows with a matching tb2 day whose dcrs stays under the tb0 ratio."
    })
    .to_string()
}

fn inner_intent(fragment: &str) -> String {
    let a = Analyzed::new(fragment).expect("fragment parses on its own");
    let s = a.structural_summary();
    json!({"fields": s.fields, "narrative": "Inner fragment."}).to_string()
}

/// The answers an analyst would give for this pipeline.
fn author(p: &PromptEnvelope) -> String {
    match p.template_id {
        TemplateId::Scenario1 => {
            let rules = p.section("Matched Rules").unwrap();
            if rules.contains("SAME_TABLE_JOIN") {
                json!({"rules": [{"rule": "SAME_TABLE_JOIN", "applicable": true,
                    "action": "Fragments 2 and 3 both aggregate tb0; compute both in a single pass over tb0 and read it once through a CTE.",
                    "rationale": "Two scans of tb0 joined on a constant key."}]})
                .to_string()
            } else {
                json!({"rules": [{"rule": "LEFT_JOIN_IS_NOT_NULL", "applicable": true,
                    "action": "Replace LEFT JOIN tb2 with INNER JOIN and drop the tb2.ds IS NOT NULL filter.",
                    "rationale": "The filter discards every unmatched row, so the outer join is an inner join."}]})
                .to_string()
            }
        }
        TemplateId::Rewrite => format!("```sql\n{}\n```", REWRITTEN.trim_end()),
        TemplateId::IntentExtract => {
            let f = normalize(p.section("Fragment").unwrap());
            if f == normalize(ORIGINAL) {
                main_intent(false)
            } else if f == normalize(REWRITTEN) {
                main_intent(true)
            } else {
                inner_intent(p.section("Fragment").unwrap())
            }
        }
        TemplateId::Alignment => json!({
            "mapping": [
                {"left": 1, "right": 1, "equivalent": true, "confidence": 0.92},
                {"left": 2, "right": 2, "equivalent": true, "confidence": 0.97},
                {"left": 3, "right": 3, "equivalent": true, "confidence": 0.97}
            ],
            "counterexample": null
        })
        .to_string(),
        _ => panic!("unexpected prompt {}", p.template_id),
    }
}

fn record() -> Vec<PlaybookEntry> {
    let e = HashingEmbedder::default();
    let kb = KnowledgeSnapshot::seeded(&e).unwrap();
    let llm = RecordingLlm::new(FnLlm(author));
    let r = optimize(ORIGINAL, &kb, &llm, &e).unwrap();
    assert_eq!(r.rewritten, REWRITTEN.trim_end());
    let v = check_equivalence(ORIGINAL, REWRITTEN, &llm, DEFAULT_CONFIDENCE_FLOOR).unwrap();
    assert_eq!(v.verdict, Verdict::Equivalent);

    let mut entries: Vec<PlaybookEntry> = Vec::new();
    for x in llm.exchanges() {
        if !entries
            .iter()
            .any(|p| p.template_id == x.template_id && p.digest == x.digest)
        {
            entries.push(PlaybookEntry {
                template_id: x.template_id,
                digest: x.digest,
                response: x.response.unwrap(),
            });
        }
    }
    entries
}

fn to_jsonl(entries: &[PlaybookEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect()
}

#[test]
fn committed_playbook_is_current() {
    let fresh = to_jsonl(&record());
    let path = playbook_path();
    if std::env::var_os("SQLGOV_BLESS").is_some() {
        std::fs::write(&path, &fresh).unwrap();
    }
    let committed = std::fs::read_to_string(&path).expect("golden playbook exists; run with SQLGOV_BLESS=1");
    assert_eq!(
        committed, fresh,
        "prompts changed; rerun with SQLGOV_BLESS=1 and review the diff"
    );
}

#[test]
fn strict_replay_reproduces_the_pipeline() {
    let llm = ScriptedLlm::from_path(&playbook_path(), PlaybookMode::Strict).unwrap();
    let e = HashingEmbedder::default();
    let kb = KnowledgeSnapshot::seeded(&e).unwrap();
    let r = optimize(ORIGINAL, &kb, &llm, &e).unwrap();
    assert_eq!(format!("{}\n", r.rewritten), REWRITTEN);
    let v = check_equivalence(ORIGINAL, REWRITTEN, &llm, DEFAULT_CONFIDENCE_FLOOR).unwrap();
    assert_eq!(v.verdict, Verdict::Equivalent);
    assert!((v.confidence - 0.92).abs() < 1e-12);
    assert!(llm.misses().is_empty());
}
