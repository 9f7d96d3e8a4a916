use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqlgov::knowledge_base::{templatize, KnowledgeSnapshot, StrategySpec, ToolId};
use sqlgov::providers::{EmbeddingProvider, HashingEmbedder};

const TAGS: [&str; 4] = [
    "SAME_TABLE_JOIN",
    "LEFT_JOIN_IS_NOT_NULL",
    "IN(SELECT)",
    "UNION_ALL_SELECT_STAR",
];

fn random_sql(rng: &mut ChaCha8Rng) -> String {
    let shapes = [
        "SELECT a FROM t WHERE b = 1",
        "SELECT a, SUM(b) FROM t GROUP BY a",
        "SELECT a FROM t JOIN u ON t.k = u.k",
        "SELECT a FROM t LEFT JOIN u ON t.k = u.k WHERE u.k IS NOT NULL",
        "SELECT * FROM t UNION ALL SELECT * FROM u",
        "SELECT a FROM t WHERE b IN (SELECT b FROM u)",
        "SELECT COUNT(DISTINCT a) FROM t",
        "SELECT a FROM t ORDER BY a DESC LIMIT 10",
    ];
    let parts = rng.random_range(1..=3);
    (0..parts)
        .map(|_| shapes[rng.random_range(0..shapes.len())])
        .collect::<Vec<_>>()
        .join(" UNION ")
}

fn store(n: usize, seed: u64) -> (KnowledgeSnapshot, HashingEmbedder) {
    let e = HashingEmbedder::default();
    let mut kb = KnowledgeSnapshot::seeded(&e).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let sql = random_sql(&mut rng);
        let tags: Vec<String> = TAGS
            .iter()
            .filter(|_| rng.random_bool(0.4))
            .map(|t| t.to_string())
            .collect();
        kb.add_case(&format!("case-{i:03}"), ToolId::Rewriter, &sql, tags, &sql, &e)
            .unwrap();
    }
    (kb, e)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full scan: every case scored, tag-filtered, sorted by similarity then index.
fn oracle(
    kb: &KnowledgeSnapshot,
    e: &HashingEmbedder,
    query: &str,
    tags: Option<&[String]>,
    k: usize,
) -> Vec<(String, f64)> {
    let q = e.embed(&templatize(query)).unwrap();
    let mut all: Vec<(String, f64)> = kb
        .cases
        .iter()
        .filter(|c| match tags {
            Some(t) => c.tag.iter().any(|x| t.contains(x)),
            None => true,
        })
        .map(|c| {
            let s = dot(&q, &c.embedding) / (dot(&q, &q).sqrt() * dot(&c.embedding, &c.embedding).sqrt());
            (c.index.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn ids(hits: &[(&sqlgov::knowledge_base::HistoricalCase, f64)]) -> Vec<String> {
    hits.iter().map(|(c, _)| c.index.clone()).collect()
}

#[test]
fn top_k_matches_full_scan() {
    let (kb, e) = store(50, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let q = random_sql(&mut rng);
        let got = kb.retrieve_cases(&q, ToolId::Rewriter, None, 5, &e).unwrap();
        let want = oracle(&kb, &e, &q, None, 5);
        assert_eq!(
            ids(&got),
            want.iter().map(|w| w.0.clone()).collect::<Vec<_>>(),
            "query {q}"
        );
        for ((_, s), (_, w)) in got.iter().zip(&want) {
            assert!((s - w).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_break_by_index() {
    let (kb, e) = store(50, 11);
    // many stored cases share a template, so equal scores are common
    let q = "SELECT a FROM t WHERE b = 1";
    let got = kb.retrieve_cases(q, ToolId::Rewriter, None, 50, &e).unwrap();
    let mut tied = 0;
    for w in got.windows(2) {
        assert!(w[0].1 >= w[1].1);
        if w[0].1 == w[1].1 {
            tied += 1;
            assert!(w[0].0.index < w[1].0.index);
        }
    }
    assert!(tied > 0, "fixture should contain ties");
}

#[test]
fn tag_filtered_matches_full_scan() {
    let (kb, e) = store(50, 3);
    let tags = vec!["IN(SELECT)".to_string(), "SAME_TABLE_JOIN".to_string()];
    let q = "SELECT a FROM t WHERE b IN (SELECT b FROM u)";
    let got = kb.retrieve_cases(q, ToolId::Rewriter, Some(&tags), 5, &e).unwrap();
    let want: Vec<String> = oracle(&kb, &e, q, Some(&tags), 5).into_iter().map(|w| w.0).collect();
    assert_eq!(ids(&got), want);
    assert_eq!(got.len(), 5);
}

#[test]
fn cases_of_other_tools_are_invisible() {
    let (kb, e) = store(10, 1);
    let got = kb.retrieve_cases("SELECT 1", ToolId::Corrector, None, 5, &e).unwrap();
    assert!(got.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn k_bounds_and_monotone(seed in 0u64..1000, k1 in 0usize..12, extra in 0usize..12) {
        let (kb, e) = store(20, seed);
        let q = random_sql(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let small = kb.retrieve_cases(&q, ToolId::Rewriter, None, k1, &e).unwrap();
        let large = kb.retrieve_cases(&q, ToolId::Rewriter, None, k1 + extra, &e).unwrap();
        prop_assert!(small.len() <= k1);
        prop_assert!(large.len() <= k1 + extra);
        prop_assert_eq!(ids(&small), ids(&large)[..small.len()].to_vec());
    }

    #[test]
    fn tag_filter_is_sound(seed in 0u64..1000, mask in 1u8..16) {
        let (kb, e) = store(20, seed);
        let tags: Vec<String> = TAGS
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, t)| t.to_string())
            .collect();
        let hits = kb.retrieve_cases("SELECT a FROM t", ToolId::Rewriter, Some(&tags), 20, &e).unwrap();
        for (c, _) in hits {
            prop_assert!(c.tag.iter().any(|t| tags.contains(t)));
        }
    }
}

fn random_message(rng: &mut ChaCha8Rng) -> String {
    let words = [
        "column",
        "table",
        "join",
        "condition",
        "missing",
        "mismatch",
        "count",
        "union",
        "function",
        "signature",
        "group",
        "ambiguous",
        "not",
        "found",
        "expected",
        "token",
        "cast",
        "type",
        "division",
        "overflow",
    ];
    let n = rng.random_range(3..8);
    (0..n)
        .map(|_| words[rng.random_range(0..words.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn nearest_strategy_matches_full_scan() {
    let e = HashingEmbedder::default();
    let mut kb = KnowledgeSnapshot::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..30 {
        kb.add_strategy(
            StrategySpec {
                index: format!("s{i:02}"),
                message_pattern: format!("SqlValidatorException: {}", random_message(&mut rng)),
                needs_schema: i % 2 == 0,
                localized: i % 3 == 0,
                guidance: format!("guidance {i}"),
            },
            &e,
        )
        .unwrap();
    }
    for threshold in [0.0, 0.55] {
        for _ in 0..25 {
            let key = format!("SqlValidatorException: {}", random_message(&mut rng));
            let q = e.embed(&key).unwrap();
            let mut best: Option<(String, f64)> = None;
            for s in &kb.strategies {
                let sim = dot(&q, &s.embedding) / (dot(&q, &q).sqrt() * dot(&s.embedding, &s.embedding).sqrt());
                if best.as_ref().is_none_or(|b| sim > b.1) {
                    best = Some((s.index.clone(), sim));
                }
            }
            let want = best.filter(|b| b.1 >= threshold).map(|b| b.0);
            let got = kb
                .retrieve_strategy(&key, threshold, &e)
                .unwrap()
                .map(|(s, _)| s.index.clone());
            assert_eq!(got, want, "key {key}");
        }
    }
}

#[test]
fn seeded_join_strategy_is_found() {
    let e = HashingEmbedder::default();
    let kb = KnowledgeSnapshot::seeded(&e).unwrap();
    let key = sqlgov::corrector::error_key(
        "Caused by: org.apache.calcite.sql.validate.SqlValidatorException: INNER, LEFT, RIGHT or FULL join requires a condition (NATURAL keyword or ON or USING clause)\n\tat org.apache.calcite.sql.SqlUtil.newContextException(SqlUtil.java:511)",
    );
    let (s, sim) = kb.retrieve_strategy(&key, 0.55, &e).unwrap().expect("strategy");
    assert_eq!(s.index, "JOIN_WITHOUT_CONDITION");
    assert!(sim > 0.99);
    assert!(kb
        .retrieve_strategy("WeirdException: the moon is made of cheese", 0.55, &e)
        .unwrap()
        .is_none());
}
