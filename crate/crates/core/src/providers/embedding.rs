use std::sync::OnceLock;

use regex::Regex;

use super::{EmbeddingProvider, ProviderError};

pub const DEFAULT_EMBEDDING_DIM: usize = 768;

/// Deterministic bag-of-tokens embedding: each token is hashed into one of
/// `dim` buckets, counts are accumulated and the vector is L2-normalised.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\[[A-Z]+\]|[\p{L}\p{N}_]+|[^\s\p{L}\p{N}_]").expect("token regex"))
}

/// Lower-cased tokens as seen by the hashing embedder.
pub fn embedding_tokens(text: &str) -> Vec<String> {
    token_re().find_iter(text).map(|m| m.as_str().to_lowercase()).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let tokens = embedding_tokens(text);
        if tokens.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            v[self.bucket(t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        let e = HashingEmbedder::default();
        let a = e.embed("SELECT [COL] FROM [TBL]").unwrap();
        let b = e.embed("SELECT [COL] FROM [TBL]").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, e.embed("select [col] from [tbl]").unwrap());
        assert_eq!(a.len(), 768);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashingEmbedder::default();
        assert_eq!(e.embed(""), Err(ProviderError::EmptyText));
        assert_eq!(e.embed("  \n"), Err(ProviderError::EmptyText));
    }

    #[test]
    fn disjoint_texts_are_nearly_orthogonal() {
        let e = HashingEmbedder::default();
        let pairs = [
            ("join requires a condition", "column count mismatch in union"),
            ("missing comma between columns", "unknown function ifnull"),
            ("explain this query", "make it faster please"),
        ];
        for (a, b) in pairs {
            let ta = embedding_tokens(a);
            assert!(embedding_tokens(b).iter().all(|t| !ta.contains(t)));
            let va = e.embed(a).unwrap();
            let vb = e.embed(b).unwrap();
            // no bucket collisions among these fixtures, so the product is exactly zero
            assert_eq!(dot(&va, &vb), 0.0, "{a} / {b}");
        }
    }

    proptest! {
        #[test]
        fn embeddings_have_unit_norm(text in "[a-zA-Z0-9 ,.()=*]{1,80}") {
            prop_assume!(!text.trim().is_empty());
            let v = HashingEmbedder::default().embed(&text).unwrap();
            let norm = dot(&v, &v).sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
