use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LearningConfig, LearningError};
use crate::knowledge_base::{cosine_similarity, KnowledgeSnapshot, RuleEntry, RuleStatus, ToolId};
use crate::providers::EmbeddingProvider;

/// DBSCAN over a precomputed distance matrix. A point's neighbourhood
/// includes itself. Returns clusters with ascending members, ordered by
/// their smallest member; noise points come back as singletons.
pub fn dbscan(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    let n = dist.len();
    let neighbours = |p: usize| -> Vec<usize> { (0..n).filter(|&q| dist[p][q] <= eps).collect() };
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();

    for p in 0..n {
        if label[p].is_some() {
            continue;
        }
        let seeds = neighbours(p);
        if seeds.len() < min_pts {
            continue;
        }
        let c = clusters.len();
        clusters.push(Vec::new());
        label[p] = Some(c);
        let mut queue = seeds;
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            if label[q].is_none() {
                label[q] = Some(c);
                let nq = neighbours(q);
                if nq.len() >= min_pts {
                    queue.extend(nq);
                }
            }
        }
    }

    for (p, l) in label.iter().enumerate() {
        match l {
            Some(c) => clusters[*c].push(p),
            None => clusters.push(vec![p]),
        }
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Position of the member minimising the summed Euclidean distance to all
/// members. Ties go to the earliest `created_at`, then the lowest position.
pub fn medoid(embeddings: &[&[f64]], created: &[chrono::DateTime<chrono::Utc>]) -> usize {
    assert!(!embeddings.is_empty(), "medoid of an empty cluster");
    let cost = |i: usize| -> f64 { embeddings.iter().map(|e| euclid(embeddings[i], e)).sum() };
    (0..embeddings.len())
        .map(|i| (cost(i), created[i], i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .expect("non-empty")
        .2
}

/// The cluster's medoid rule.
pub fn merge_cluster(cluster: &[RuleEntry], embeddings: &[Vec<f64>]) -> RuleEntry {
    let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
    let created: Vec<_> = cluster.iter().map(|r| r.created_at).collect();
    cluster[medoid(&refs, &created)].clone()
}

fn embed_descriptions(rules: &[RuleEntry], embedder: &dyn EmbeddingProvider) -> Result<Vec<Vec<f64>>, LearningError> {
    rules
        .iter()
        .map(|r| embedder.embed(&r.description).map_err(LearningError::from))
        .collect()
}

fn cosine_distances(emb: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LearningError> {
    emb.iter()
        .map(|a| {
            emb.iter()
                .map(|b| Ok(1.0 - cosine_similarity(a, b)?))
                .collect::<Result<Vec<f64>, LearningError>>()
        })
        .collect()
}

/// Groups rules whose descriptions embed within `eps` cosine distance.
pub fn cluster_rules(
    rules: &[RuleEntry],
    embedder: &dyn EmbeddingProvider,
    cfg: &LearningConfig,
) -> Result<Vec<Vec<usize>>, LearningError> {
    let emb = embed_descriptions(rules, embedder)?;
    Ok(dbscan(&cosine_distances(&emb)?, cfg.dbscan_eps, cfg.dbscan_min_pts))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    /// Surviving label to the labels it absorbed.
    pub merged: BTreeMap<String, Vec<String>>,
}

impl DedupReport {
    pub fn is_noop(&self) -> bool {
        self.merged.is_empty()
    }
}

/// Merges duplicate rules of `tool`. Verified and candidate rules are
/// clustered separately; absorbed rules are retired and case tags pointing
/// at them move to the survivor.
pub fn dedup(
    kb: &KnowledgeSnapshot,
    tool: ToolId,
    embedder: &dyn EmbeddingProvider,
    cfg: &LearningConfig,
) -> Result<(KnowledgeSnapshot, DedupReport), LearningError> {
    let mut next = kb.clone();
    let mut report = DedupReport::default();
    for status in [RuleStatus::Verified, RuleStatus::Candidate] {
        let positions: Vec<usize> = (0..kb.rules.len())
            .filter(|&i| kb.rules[i].tool == tool && kb.rules[i].status == status)
            .collect();
        if positions.is_empty() {
            continue;
        }
        let group: Vec<RuleEntry> = positions.iter().map(|&i| kb.rules[i].clone()).collect();
        let emb = embed_descriptions(&group, embedder)?;
        let clusters = dbscan(&cosine_distances(&emb)?, cfg.dbscan_eps, cfg.dbscan_min_pts);
        for cluster in clusters.into_iter().filter(|c| c.len() > 1) {
            let members: Vec<RuleEntry> = cluster.iter().map(|&i| group[i].clone()).collect();
            let member_emb: Vec<Vec<f64>> = cluster.iter().map(|&i| emb[i].clone()).collect();
            let survivor = merge_cluster(&members, &member_emb);
            let absorbed: Vec<String> = members
                .iter()
                .filter(|m| m.index != survivor.index)
                .map(|m| m.index.clone())
                .collect();
            for &i in &cluster {
                let rule = &mut next.rules[positions[i]];
                if rule.index != survivor.index {
                    rule.status = RuleStatus::Retired;
                }
            }
            for case in next.cases.iter_mut().filter(|c| c.tool == tool) {
                let mut tags = Vec::with_capacity(case.tag.len());
                for t in &case.tag {
                    let t = if absorbed.contains(t) { &survivor.index } else { t };
                    if !tags.contains(t) {
                        tags.push(t.clone());
                    }
                }
                case.tag = tags;
            }
            for batch in next.pending.iter_mut().filter(|b| b.tool == tool) {
                batch.rules.retain(|r| !absorbed.contains(&r.index));
            }
            report.merged.insert(survivor.index.clone(), absorbed);
        }
    }
    next.pending.retain(|b| !b.rules.is_empty());
    Ok((next, report))
}
