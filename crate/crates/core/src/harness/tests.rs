use proptest::prelude::*;

use super::*;
use crate::catalog::Catalog;
use crate::fixtures::NESTED_REPORT;
use crate::knowledge_base::{KnowledgeSnapshot, ToolId};
use crate::modifier::{default_category_specs, with_centroids, EmbeddingPathway};
use crate::providers::{ExecFixture, ExecStatus, FnLlm, HashingEmbedder, PromptEnvelope, SimulatedExecutor};

fn pair(id: &str, original: &str, rewritten: &str) -> BenchPair {
    BenchPair {
        query_id: id.into(),
        original: original.into(),
        rewritten: rewritten.into(),
    }
}

fn exec(times: &[(&str, f64)]) -> SimulatedExecutor {
    SimulatedExecutor::new(times.iter().map(|(q, t)| ExecFixture::ok(q, *t)).collect(), 7)
}

#[test]
fn forty_percent() {
    let e = exec(&[("SELECT c1 FROM t", 100.0), ("SELECT c1, c2 FROM t", 60.0)]);
    let r = bench(
        &[pair("q1", "SELECT c1 FROM t", "SELECT c1, c2 FROM t")],
        &e,
        DEFAULT_TRIALS,
    )
    .unwrap();
    let q = &r.results[0];
    assert_eq!(q.et_pre, 100.0);
    assert_eq!(q.et_post, 60.0);
    assert_eq!(q.ets, 40.0);
    assert_eq!(q.etog, Some(40.0));
    assert_eq!(q.trials.pre.len(), 3);
}

#[test]
fn no_change_no_gain() {
    let e = exec(&[("SELECT a FROM t", 12.5)]);
    let r = bench(&[pair("q", "SELECT a FROM t", "SELECT a FROM t")], &e, 3).unwrap();
    assert_eq!(r.results[0].ets, 0.0);
    assert_eq!(r.results[0].etog, Some(0.0));
}

#[test]
fn aggregate_over_three_pairs() {
    let e = exec(&[
        ("SELECT c1 FROM t", 120.0),
        ("SELECT c1, c2 FROM t", 90.0),
        ("SELECT c1, c2, c3 FROM t", 50.0),
        ("SELECT c1, c2, c3, c4 FROM t", 45.0),
        ("SELECT c1, c2, c3, c4, c5 FROM t", 200.0),
        ("SELECT c1, c2, c3, c4, c5, c6 FROM t", 20.0),
    ]);
    let pairs = [
        pair("1", "SELECT c1 FROM t", "SELECT c1, c2 FROM t"),
        pair("2", "SELECT c1, c2, c3 FROM t", "SELECT c1, c2, c3, c4 FROM t"),
        pair(
            "3",
            "SELECT c1, c2, c3, c4, c5 FROM t",
            "SELECT c1, c2, c3, c4, c5, c6 FROM t",
        ),
    ];
    let r = bench(&pairs, &e, 3).unwrap();
    // 30/120 = 25 %, 5/50 = 10 %, 180/200 = 90 %
    let oracle = (25.0 + 10.0 + 90.0) / 3.0;
    let mean = r.aggregate.mean_etog.unwrap();
    assert!((mean - oracle).abs() <= 1e-9 * oracle);
    assert_eq!(r.aggregate.total_ets, 215.0);
    assert_eq!(r.aggregate.pairs, 3);
}

#[test]
fn warm_up_run_is_discarded() {
    let cold = ExecFixture {
        cold_penalty: 500.0,
        ..ExecFixture::ok("SELECT a FROM t", 10.0)
    };
    let e = SimulatedExecutor::new(vec![cold.clone(), ExecFixture::ok("SELECT c1, c2 FROM t", 5.0)], 1);
    let r = bench(&[pair("q", "SELECT a FROM t", "SELECT c1, c2 FROM t")], &e, 3).unwrap();
    assert_eq!(r.results[0].trials.pre[0], 510.0);
    assert_eq!(r.results[0].et_pre, 10.0);

    // a single trial is taken as is
    let e = SimulatedExecutor::new(vec![cold, ExecFixture::ok("SELECT c1, c2 FROM t", 5.0)], 1);
    let r = bench(&[pair("q", "SELECT a FROM t", "SELECT c1, c2 FROM t")], &e, 1).unwrap();
    assert_eq!(r.results[0].et_pre, 510.0);
}

#[test]
fn median_of_remaining_runs() {
    let noisy = ExecFixture {
        spread: 0.3,
        ..ExecFixture::ok("SELECT a FROM t", 10.0)
    };
    let e = SimulatedExecutor::new(vec![noisy, ExecFixture::ok("SELECT c1, c2 FROM t", 5.0)], 3);
    let r = bench(&[pair("q", "SELECT a FROM t", "SELECT c1, c2 FROM t")], &e, 4).unwrap();
    let mut rest = r.results[0].trials.pre[1..].to_vec();
    rest.sort_by(f64::total_cmp);
    assert_eq!(r.results[0].et_pre, rest[1]);
    assert_eq!(median(&[4.0, 1.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}

#[test]
fn failing_pairs_are_excluded() {
    let broken = ExecFixture {
        status: ExecStatus::Error,
        error_log: Some("ERROR: relation missing".into()),
        ..ExecFixture::ok("SELECT c1, c2, c3 FROM t", 1.0)
    };
    let e = SimulatedExecutor::new(
        vec![
            broken,
            ExecFixture::ok("SELECT a FROM t", 10.0),
            ExecFixture::ok("SELECT c1, c2 FROM t", 5.0),
        ],
        1,
    );
    let pairs = [
        pair("bad", "SELECT a FROM t", "SELECT c1, c2, c3 FROM t"),
        pair("good", "SELECT a FROM t", "SELECT c1, c2 FROM t"),
    ];
    let r = bench(&pairs, &e, 3).unwrap();
    assert_eq!(r.results.len(), 1);
    assert_eq!(r.excluded.len(), 1);
    assert_eq!(r.excluded[0].side, Side::Rewritten);
    assert!(r.excluded[0].error_log.contains("relation missing"));
    assert_eq!(r.aggregate.pairs, 1);
    assert!(matches!(bench(&pairs, &e, 0), Err(BenchError::NoTrials)));
}

#[test]
fn parallel_matches_sequential_without_noise() {
    let e = exec(&[
        ("SELECT c1 FROM t", 3.0),
        ("SELECT c1, c2 FROM t", 2.0),
        ("SELECT c1, c2, c3 FROM t", 8.0),
    ]);
    let pairs = [
        pair("1", "SELECT c1 FROM t", "SELECT c1, c2 FROM t"),
        pair("2", "SELECT c1, c2, c3 FROM t", "SELECT c1, c2 FROM t"),
    ];
    assert_eq!(bench(&pairs, &e, 3).unwrap(), bench_parallel(&pairs, &e, 3).unwrap());
}

#[test]
fn zero_baseline_has_no_percentage() {
    let r = BenchResult::from_times(
        "z",
        0.0,
        0.0,
        Trials {
            pre: vec![],
            post: vec![],
        },
    );
    assert_eq!(r.etog, None);
    assert_eq!(aggregate(&[r]).mean_etog, None);
}

fn issue(request: Option<&str>, log: Option<&str>, hint: Option<IntentHint>) -> Issue {
    Issue {
        sql: "SELECT a FROM t".into(),
        request: request.map(String::from),
        error_log: log.map(String::from),
        hint,
        ..Issue::default()
    }
}

#[test]
fn routing_examples() {
    assert_eq!(
        route(&issue(Some("make it faster"), Some("ERROR: boom"), None)),
        ToolId::Corrector
    );
    assert_eq!(
        route(&issue(None, None, Some(IntentHint::Efficiency))),
        ToolId::Rewriter
    );
    assert_eq!(
        route(&issue(Some("This query is too slow"), None, None)),
        ToolId::Rewriter
    );
    assert_eq!(route(&issue(Some("optimise the joins"), None, None)), ToolId::Rewriter);
    assert_eq!(
        route(&issue(Some("rename column a to total"), None, None)),
        ToolId::Modifier
    );
    assert_eq!(
        route(&issue(Some("too slow"), None, Some(IntentHint::Semantic))),
        ToolId::Modifier
    );
    assert_eq!(route(&issue(None, Some("  "), None)), ToolId::Modifier);
}

proptest! {
    #[test]
    fn etog_identities(pre in 0.001f64..1e6, ratio in 0.0f64..3.0) {
        let post = pre * ratio;
        let e = exec(&[("SELECT c1 FROM t", pre), ("SELECT c1, c2 FROM t", post)]);
        let r = bench(&[pair("q", "SELECT c1 FROM t", "SELECT c1, c2 FROM t")], &e, 3).unwrap();
        let q = &r.results[0];
        let tol = |x: f64| 1e-9 * x.abs().max(1e-12);
        prop_assert!((q.ets - (q.et_pre - q.et_post)).abs() <= tol(q.ets));
        let etog = q.etog.unwrap();
        prop_assert!((etog - q.ets / q.et_pre * 100.0).abs() <= tol(etog));
    }

    #[test]
    fn routing_is_total_and_deterministic(
        request in proptest::option::of("[a-zA-Z ]{0,40}"),
        log in proptest::option::of("[ -~]{0,30}"),
        hint in proptest::option::of(prop::sample::select(vec![IntentHint::Efficiency, IntentHint::Semantic])),
    ) {
        let i = issue(request.as_deref(), log.as_deref(), hint);
        let a = route(&i);
        prop_assert_eq!(a, route(&i));
        if log.as_deref().is_some_and(|l| !l.trim().is_empty()) {
            prop_assert_eq!(a, ToolId::Corrector);
        } else {
            prop_assert_ne!(a, ToolId::Corrector);
        }
    }
}

#[test]
fn registry_dispatches_each_tool() {
    let emb = HashingEmbedder::default();
    let kb = KnowledgeSnapshot::seeded(&emb).unwrap();
    let catalog = Catalog::default();
    let (cats, _) = with_centroids(default_category_specs(), &emb, EmbeddingPathway::Instruction).unwrap();
    let llm = FnLlm(|p: &PromptEnvelope| crate::providers::default_response(p));
    let ctx = ToolContext::new(&kb, &llm, &emb, &catalog, &cats);
    let reg = ToolRegistry::standard();
    assert_eq!(reg.ids().count(), 4);

    let (id, rep) = reg.dispatch(&issue(Some("speed this up"), None, None), &ctx);
    assert_eq!(id, ToolId::Rewriter);
    assert_eq!(rep.unwrap().output["rewritten"], "SELECT a FROM t");

    let v = Issue {
        sql: NESTED_REPORT.into(),
        candidate: Some(NESTED_REPORT.into()),
        ..Issue::default()
    };
    let rep = reg.run(ToolId::Verifier, &v, &ctx).unwrap();
    assert_eq!(rep.output["verdict"], "EQUIVALENT");
    assert!(!rep.negative);

    let v = Issue {
        candidate: Some("SELECT a, b FROM t".into()),
        ..v
    };
    assert!(reg.run(ToolId::Verifier, &v, &ctx).unwrap().negative);

    let err = reg.run(ToolId::Corrector, &issue(None, None, None), &ctx).unwrap_err();
    assert!(matches!(err, ToolError::MissingInput { .. }));

    let rejected = reg
        .run(ToolId::Modifier, &issue(Some("zzz qqq"), None, None), &ctx)
        .unwrap_err();
    assert!(rejected.is_negative());

    assert!(matches!(
        ToolRegistry::default().run(ToolId::Rewriter, &v, &ctx),
        Err(ToolError::NotRegistered(ToolId::Rewriter))
    ));
}
