use super::*;
use crate::knowledge_base::seed_time;
use crate::providers::{HashingEmbedder, PlaybookEntry, PlaybookMode, ScriptedLlm};
use chrono::Duration;
use proptest::prelude::*;
use std::sync::Mutex;

const DAY: f64 = 86_400.0;

fn rec(sql: &str, status: RecordStatus, elapsed: f64) -> ExecutionRecord {
    let mut r = ExecutionRecord::new(sql, status, elapsed);
    if status == RecordStatus::Error {
        r.error_log = Some("SqlValidatorException: boom".into());
    }
    r
}

fn candidate(index: &str, description: &str, age_secs: i64) -> RuleEntry {
    RuleEntry {
        index: index.into(),
        description: description.into(),
        matcher: None,
        tool: ToolId::Rewriter,
        status: RuleStatus::Candidate,
        created_at: seed_time() + Duration::seconds(age_secs),
        verified_at: None,
    }
}

#[test]
fn thresholds() {
    let cfg = LearningConfig::default();
    assert_eq!(count_threshold(100, &cfg), 25);
    assert_eq!(count_threshold(0, &cfg), 0);
    assert_eq!(count_threshold(10, &cfg), 7);
    let t2 = time_threshold(&[10.0 * DAY, 10.0 * DAY], &cfg).unwrap();
    assert!((t2 - 13.0 * DAY).abs() <= 1e-9 * 13.0 * DAY);
    let t2 = time_threshold(&[7.0 * DAY], &cfg).unwrap();
    assert!((t2 - 9.1 * DAY).abs() <= 1e-9 * 9.1 * DAY);
    assert_eq!(time_threshold(&[], &cfg), Err(LearningError::NoHistory));
}

#[test]
fn trigger_conditions() {
    let cfg = LearningConfig::default();
    let hist = [10.0 * DAY, 10.0 * DAY];
    assert!(should_trigger_verification(26, 0.0, 100, &hist, &cfg));
    assert!(!should_trigger_verification(25, 12.0 * DAY, 100, &hist, &cfg));
    assert!(should_trigger_verification(0, 14.0 * DAY, 100, &hist, &cfg));
    assert!(!should_trigger_verification(0, 1e9, 100, &[], &cfg));
}

proptest! {
    #[test]
    fn count_threshold_is_monotone(n in 0usize..100_000, d in 0usize..1000) {
        let cfg = LearningConfig::default();
        prop_assert!(count_threshold(n, &cfg) <= count_threshold(n + d, &cfg));
    }
}

#[test]
fn fast_ok_records_are_dropped() {
    let cfg = LearningConfig::default();
    let recs: Vec<_> = (0..5)
        .map(|i| rec(&format!("SELECT a{i} FROM t{i} JOIN u ON 1 = 1"), RecordStatus::Ok, 1.0))
        .collect();
    assert!(filter_records(&recs, &cfg).is_empty());
}

#[test]
fn duplicate_templates_collapse() {
    let cfg = LearningConfig::default();
    let recs = vec![
        rec("SELECT a FROM t WHERE x = 1", RecordStatus::Error, 1.0),
        rec("select b from u where y = 2", RecordStatus::Error, 1.0),
    ];
    let kept = filter_records(&recs, &cfg);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].sql, recs[0].sql);
}

/// Record-by-record reimplementation: nearest-rank-free p90 by explicit
/// interpolation over the sorted times.
fn filter_oracle(records: &[ExecutionRecord]) -> Vec<ExecutionRecord> {
    let cut = if records.len() >= 3 {
        let mut t: Vec<f64> = records.iter().map(|r| r.elapsed).collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = 0.9 * (t.len() as f64 - 1.0);
        let i = h as usize;
        let next = t[(i + 1).min(t.len() - 1)];
        Some(t[i] + (h - i as f64) * (next - t[i]))
    } else {
        None
    };
    let mut out: Vec<ExecutionRecord> = Vec::new();
    for r in records {
        let keep = r.status != RecordStatus::Ok || cut.is_some_and(|c| r.elapsed > c);
        if keep && !out.iter().any(|o| templatize(&o.sql) == templatize(&r.sql)) {
            out.push(r.clone());
        }
    }
    out
}

#[test]
fn mixed_batch_matches_oracle() {
    let statuses = [
        RecordStatus::Ok,
        RecordStatus::Ok,
        RecordStatus::Error,
        RecordStatus::Slow,
        RecordStatus::Ok,
    ];
    let recs: Vec<_> = (0..20)
        .map(|i| {
            let sql = format!("SELECT c FROM t{} WHERE k = {i}", i % 7);
            rec(&sql, statuses[i % 5], ((i * 37) % 23) as f64 + 0.5)
        })
        .collect();
    let got = filter_records(&recs, &LearningConfig::default());
    assert_eq!(got, filter_oracle(&recs));
    assert!(!got.is_empty());
}

proptest! {
    #[test]
    fn filter_matches_oracle(spec in prop::collection::vec((0usize..6, 0u8..3, 0.0f64..100.0), 0..30)) {
        let recs: Vec<_> = spec
            .iter()
            .map(|(t, s, e)| {
                let status = [RecordStatus::Ok, RecordStatus::Error, RecordStatus::Slow][*s as usize];
                rec(&format!("SELECT a FROM tbl{t}"), status, *e)
            })
            .collect();
        prop_assert_eq!(filter_records(&recs, &LearningConfig::default()), filter_oracle(&recs));
    }
}

#[test]
fn rule_gen_prompt_shape() {
    let p = rule_gen_prompt(&[rec("SELECT a FROM t", RecordStatus::Slow, 90.0)]);
    let text = p.render();
    let mut last = 0;
    for h in [
        "Task Description:",
        "Instruction:",
        "Demonstration:",
        "Question:",
        "Execution Outputs:",
    ] {
        let at = text[last..].find(h).unwrap_or_else(|| panic!("missing {h}")) + last;
        last = at + h.len();
    }
    assert!(text.contains("status: SLOW, elapsed: 90s"));
}

#[test]
fn scripted_rule_generation() {
    let records = vec![rec(
        "SELECT a FROM t t1 JOIN t t2 ON t1.k = t2.k",
        RecordStatus::Slow,
        90.0,
    )];
    let prompt = rule_gen_prompt(&records);
    let llm = ScriptedLlm::new(
        vec![PlaybookEntry {
            template_id: TemplateId::RuleGen,
            digest: prompt.digest.clone(),
            response: r#"{"SAME_TABLE_JOIN": "scan the table once"}"#.into(),
        }],
        PlaybookMode::Strict,
    );
    let batch = generate_rules(&records, ToolId::Rewriter, &llm, seed_time()).unwrap();
    assert_eq!(batch.rules.len(), 1);
    assert_eq!(batch.rules[0].index, "SAME_TABLE_JOIN");
    assert_eq!(batch.rules[0].status, RuleStatus::Candidate);
    assert!(batch.rules[0].matcher.is_none());
    assert_eq!(batch.source_records, vec![records[0].id.clone()]);
}

struct Sequence(Mutex<Vec<&'static str>>);

impl LlmProvider for Sequence {
    fn name(&self) -> &str {
        "sequence"
    }
    fn complete(&self, _: &PromptEnvelope) -> Result<String, ProviderError> {
        Ok(self.0.lock().unwrap().remove(0).to_string())
    }
}

#[test]
fn malformed_reply_retries_once() {
    let records = vec![rec("SELECT a FROM t", RecordStatus::Slow, 9.0)];
    let twice_bad = Sequence(Mutex::new(vec!["no", "still no", "{}"]));
    assert!(matches!(
        generate_rules(&records, ToolId::Rewriter, &twice_bad, seed_time()),
        Err(LearningError::RejectedResponse(_))
    ));
    let once_bad = Sequence(Mutex::new(vec!["oops", r#"{"X": "y"}"#]));
    let batch = generate_rules(&records, ToolId::Rewriter, &once_bad, seed_time()).unwrap();
    assert_eq!(batch.rules[0].index, "X");
}

#[test]
fn error_records_need_logs() {
    let mut r = ExecutionRecord::new("SELECT 1", RecordStatus::Error, 0.1);
    let llm = Sequence(Mutex::new(vec!["{}"]));
    assert!(matches!(
        generate_rules(std::slice::from_ref(&r), ToolId::Corrector, &llm, seed_time()),
        Err(LearningError::InvalidRecord(_))
    ));
    r.error_log = Some("x".into());
    assert!(r.validate().is_ok());
}

fn staged_kb() -> (KnowledgeSnapshot, String, Vec<ExecutionRecord>) {
    let e = HashingEmbedder::default();
    let kb = KnowledgeSnapshot::seeded(&e).unwrap();
    let records = vec![
        rec("SELECT a FROM t WHERE b IN (SELECT b FROM u)", RecordStatus::Slow, 50.0),
        rec("SELECT x FROM v ORDER BY x", RecordStatus::Slow, 40.0),
    ];
    let batch = CandidateRuleBatch {
        id: "b1".into(),
        tool: ToolId::Rewriter,
        rules: vec![
            candidate("NEW_A", "first", 0),
            candidate("NEW_B", "second", 1),
            candidate("NEW_C", "third", 2),
        ],
        source_records: records.iter().map(|r| r.id.clone()).collect(),
        records: records.clone(),
        generated_at: seed_time(),
    };
    (stage_batch(&kb, batch).unwrap(), "b1".into(), records)
}

#[test]
fn accepting_a_rule_adds_cases() {
    let e = HashingEmbedder::default();
    let (kb, batch, _) = staged_kb();
    let n0 = kb.n_current(ToolId::Rewriter);
    let decisions = BTreeMap::from([("NEW_A".to_string(), Decision::Accept)]);
    let now = seed_time() + Duration::days(3);
    let next = apply_verification(&kb, &batch, &decisions, &e, now).unwrap();
    assert_eq!(next.n_current(ToolId::Rewriter), n0 + 1);
    assert_eq!(next.cases.len(), kb.cases.len() + 2);
    assert!(next.cases.iter().all(|c| c.tag == ["NEW_A"]));
    next.verify_integrity().unwrap();
    assert_eq!(next.stats[&ToolId::Rewriter].last_update, Some(now));
    // undecided rules stay pending
    assert_eq!(next.pending_count(ToolId::Rewriter), 2);
    assert_eq!(next.pending[0].rules.len(), 2);

    let later = now + Duration::days(2);
    let both = BTreeMap::from([
        ("NEW_B".to_string(), Decision::Accept),
        ("NEW_C".to_string(), Decision::Reject),
    ]);
    let last = apply_verification(&next, &batch, &both, &e, later).unwrap();
    assert!(last.pending.is_empty());
    assert_eq!(last.cases.len(), 2);
    assert!(last.cases.iter().all(|c| c.tag == ["NEW_A", "NEW_B"]));
    assert_eq!(last.stats[&ToolId::Rewriter].update_intervals, vec![2.0 * DAY]);
}

#[test]
fn rejecting_everything_only_retires() {
    let e = HashingEmbedder::default();
    let (kb, batch, _) = staged_kb();
    let decisions: BTreeMap<_, _> = ["NEW_A", "NEW_B", "NEW_C"]
        .map(|k| (k.to_string(), Decision::Reject))
        .into();
    let next = apply_verification(&kb, &batch, &decisions, &e, seed_time()).unwrap();
    assert_eq!(next.cases, kb.cases);
    assert_eq!(next.rules.len(), kb.rules.len());
    assert_eq!(next.rules.iter().filter(|r| r.status == RuleStatus::Retired).count(), 3);
    assert_eq!(next.n_current(ToolId::Rewriter), kb.n_current(ToolId::Rewriter));
}

#[test]
fn unknown_decision_key() {
    let e = HashingEmbedder::default();
    let (kb, batch, _) = staged_kb();
    let decisions = BTreeMap::from([("NOPE".to_string(), Decision::Accept)]);
    assert_eq!(
        apply_verification(&kb, &batch, &decisions, &e, seed_time()),
        Err(LearningError::UnknownRule("NOPE".into()))
    );
}

#[test]
fn staging_skips_live_labels() {
    let (kb, _, records) = staged_kb();
    let dup = CandidateRuleBatch {
        id: "b2".into(),
        tool: ToolId::Rewriter,
        rules: vec![candidate("IN(SELECT)", "again", 5)],
        source_records: vec![records[0].id.clone()],
        records,
        generated_at: seed_time(),
    };
    let next = stage_batch(&kb, dup).unwrap();
    assert_eq!(next, kb);
}

/// Connected components over core points; each border point joins the
/// component with the smallest core index among its core neighbours.
pub(crate) fn dbscan_oracle(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    let n = dist.len();
    let core: Vec<bool> = (0..n)
        .map(|p| (0..n).filter(|&q| dist[p][q] <= eps).count() >= min_pts)
        .collect();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = next;
        while let Some(p) = stack.pop() {
            for q in 0..n {
                if core[q] && comp[q] == usize::MAX && dist[p][q] <= eps {
                    comp[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); next];
    for p in 0..n {
        let c = if core[p] {
            Some(comp[p])
        } else {
            (0..n).filter(|&q| core[q] && dist[p][q] <= eps).map(|q| comp[q]).min()
        };
        match c {
            Some(c) => groups[c].push(p),
            None => groups.push(vec![p]),
        }
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

proptest! {
    #[test]
    fn dbscan_matches_oracle(points in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..25),
                             eps in 0.5f64..3.0, min_pts in 1usize..4) {
        let dist: Vec<Vec<f64>> = points
            .iter()
            .map(|a| points.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect())
            .collect();
        prop_assert_eq!(dbscan(&dist, eps, min_pts), dbscan_oracle(&dist, eps, min_pts));
    }
}

#[test]
fn single_and_identical_rules() {
    let e = HashingEmbedder::default();
    let cfg = LearningConfig::default();
    let one = [candidate("A", "use inner join", 0)];
    assert_eq!(cluster_rules(&one, &e, &cfg).unwrap(), vec![vec![0]]);
    let two = [candidate("A", "use inner join", 0), candidate("B", "use inner join", 1)];
    assert_eq!(cluster_rules(&two, &e, &cfg).unwrap(), vec![vec![0, 1]]);
}

#[test]
fn medoid_tie_breaks() {
    let e = HashingEmbedder::default();
    let late = candidate("LATE", "alpha beta", 0);
    let early = candidate("EARLY", "gamma delta", -10);
    let emb: Vec<Vec<f64>> = [&late, &early]
        .iter()
        .map(|r| e.embed(&r.description).unwrap())
        .collect();
    // equal distance sums, so the earlier creation time wins
    assert_eq!(merge_cluster(&[late.clone(), early.clone()], &emb).index, "EARLY");
    assert_eq!(merge_cluster(std::slice::from_ref(&late), &emb[..1]).index, "LATE");
}

proptest! {
    #[test]
    fn medoid_is_brute_force_argmin(vs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8)) {
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let created = vec![seed_time(); vs.len()];
        let got = medoid(&refs, &created);
        let mut best = (f64::INFINITY, 0);
        for (i, a) in vs.iter().enumerate() {
            let s: f64 = vs.iter().map(|b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).sum();
            if s < best.0 {
                best = (s, i);
            }
        }
        prop_assert_eq!(got, best.1);
    }
}

#[test]
fn dedup_merges_and_is_idempotent() {
    let e = HashingEmbedder::default();
    let cfg = LearningConfig::default();
    let mut kb = KnowledgeSnapshot::default();
    for (i, (idx, desc)) in [
        (
            "A1",
            "replace left join with inner join when the right side is filtered not null",
        ),
        (
            "A2",
            "replace left join with inner join when the right side is filtered not null again",
        ),
        ("B1", "project only needed columns from each union all arm"),
    ]
    .into_iter()
    .enumerate()
    {
        kb.add_rule(RuleEntry {
            status: RuleStatus::Verified,
            ..candidate(idx, desc, i as i64)
        })
        .unwrap();
    }
    kb.add_case(
        "c",
        ToolId::Rewriter,
        "d",
        vec!["A1".into(), "A2".into()],
        "SELECT 1",
        &e,
    )
    .unwrap();
    let (merged, report) = dedup(&kb, ToolId::Rewriter, &e, &cfg).unwrap();
    assert_eq!(report.merged.len(), 1);
    assert_eq!(merged.n_current(ToolId::Rewriter), 2);
    assert_eq!(merged.cases[0].tag.len(), 1);
    merged.verify_integrity().unwrap();
    let (again, report2) = dedup(&merged, ToolId::Rewriter, &e, &cfg).unwrap();
    assert!(report2.is_noop());
    assert_eq!(again, merged);
}
