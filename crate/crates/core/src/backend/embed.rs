use crate::text::fnv1a64;

pub const HASH_EMBEDDING_DIM: usize = 256;

/// Deterministic bag-of-words embedder for offline runs.
///
/// Each lowercase alphanumeric token is hashed to a bucket and a sign; the
/// vector is the signed bucket count. Strings with the same token multiset map
/// to the same vector, so self-similarity is exactly 1.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: HASH_EMBEDDING_DIM,
        }
    }
}

impl HashEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokens(text) {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }

    pub fn embed(&self, texts: &[String]) -> Vec<Vec<f64>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(
        a.len(),
        b.len(),
        "cosine of vectors with different dimensions"
    );
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
