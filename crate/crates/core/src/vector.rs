//! Embedding text construction, normalization, cosine similarity and the
//! digest-keyed embedding cache.

use std::collections::HashMap;
use std::sync::RwLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Embedder, EmbeddingVector, GatewayError};
use crate::skill::{Skill, SkillLevel};

#[derive(Debug, Error, PartialEq)]
pub enum VectorError {
    #[error("cannot normalize the zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Text that represents `skill` in embedding space: planning skills are
/// keyed by their source task, the rest by name and document.
pub fn skill_embedding_text(skill: &Skill) -> String {
    match (skill.level, skill.source_task_text.as_deref()) {
        (SkillLevel::Planning, Some(task)) if !task.trim().is_empty() => task.to_string(),
        _ => format!("{}\n{}", skill.name, skill.document),
    }
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, VectorError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(VectorError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Inner product of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(cosine_unchecked(a, b))
}

/// Same as [`cosine_similarity`] for callers that already checked widths.
/// Symmetric bit-for-bit: the sum is accumulated over `min`/`max` pairs.
#[inline]
pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        // x*y == y*x in IEEE arithmetic, so swapping arguments is exact
        s += x * y;
    }
    s.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillEmbedding {
    pub skill_name: String,
    pub vector: EmbeddingVector,
    pub embedded_text_digest: String,
}

/// Digest-keyed cache shared across pipeline stages. Lookups take a read
/// lock; inserts a write lock.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("embedding cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, digest: String, vector: EmbeddingVector) {
        self.entries.write().expect("embedding cache").insert(digest, vector);
    }

    pub fn get(&self, digest: &str) -> Option<EmbeddingVector> {
        self.entries.read().expect("embedding cache").get(digest).cloned()
    }

    /// Embed `texts`, calling the gateway only for texts not cached yet.
    pub fn embed_texts(&self, embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let digests: Vec<String> = texts.iter().map(|t| text_digest(t)).collect();
        let mut missing: Vec<String> = Vec::new();
        let mut missing_digests: Vec<String> = Vec::new();
        {
            let entries = self.entries.read().expect("embedding cache");
            for (t, d) in texts.iter().zip(&digests) {
                if !entries.contains_key(d) && !missing_digests.contains(d) {
                    missing.push(t.clone());
                    missing_digests.push(d.clone());
                }
            }
        }
        if !missing.is_empty() {
            let vectors = embedder.embed(&missing)?;
            if vectors.len() != missing.len() {
                return Err(GatewayError::MalformedResponse(format!(
                    "asked for {} embeddings, got {}",
                    missing.len(),
                    vectors.len()
                )));
            }
            let mut entries = self.entries.write().expect("embedding cache");
            for (d, v) in missing_digests.into_iter().zip(vectors) {
                if v.dimension() != embedder.dimension() {
                    return Err(GatewayError::DimensionMismatch { expected: embedder.dimension(), got: v.dimension() });
                }
                entries.insert(d, v);
            }
        }
        let entries = self.entries.read().expect("embedding cache");
        Ok(digests.iter().map(|d| entries[d].clone()).collect())
    }

    pub fn embed_skills(&self, embedder: &dyn Embedder, skills: &[&Skill]) -> Result<Vec<SkillEmbedding>, GatewayError> {
        if skills.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<String> = skills.iter().map(|s| skill_embedding_text(s)).collect();
        let vectors = self.embed_texts(embedder, &texts)?;
        Ok(skills
            .iter()
            .zip(texts)
            .zip(vectors)
            .map(|((s, t), v)| SkillEmbedding { skill_name: s.name.clone(), vector: v, embedded_text_digest: text_digest(&t) })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::HashEmbedder;
    use crate::skill::tests::functional;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: HashEmbedder,
        calls: AtomicUsize,
    }

    impl Embedder for Counting {
        fn dimension(&self) -> usize {
            self.inner.dimension
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed(texts)
        }
    }

    #[test]
    fn embedding_text_rules() {
        let mut s = functional("spotify get songs by genre");
        s.document = "Fetch songs.".into();
        assert_eq!(skill_embedding_text(&s), "spotify get songs by genre\nFetch songs.");
        let mut other = s.clone();
        other.content = "different".into();
        assert_eq!(skill_embedding_text(&s), skill_embedding_text(&other));
        let mut plan = s.clone();
        plan.level = SkillLevel::Planning;
        plan.source_task_text = Some("Update my playlist...".into());
        assert_eq!(skill_embedding_text(&plan), "Update my playlist...");
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(normalize(&[0.0, 0.0]), Err(VectorError::ZeroVector));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(VectorError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn unchanged_skill_is_not_reembedded() {
        let e = Counting { inner: HashEmbedder::new(64, 1), calls: AtomicUsize::new(0) };
        let cache = EmbeddingCache::new();
        let s = functional("a");
        let first = cache.embed_skills(&e, &[&s]).unwrap();
        let second = cache.embed_skills(&e, &[&s]).unwrap();
        assert_eq!(first, second);
        assert_eq!(e.calls.load(Ordering::SeqCst), 1);
        let mut changed = s.clone();
        changed.document.push_str(" more");
        cache.embed_skills(&e, &[&changed]).unwrap();
        assert_eq!(e.calls.load(Ordering::SeqCst), 2);
    }

    fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim).prop_filter_map("nonzero", |v| normalize(&v).ok())
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_matches_euclidean(a in unit(16), b in unit(16)) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            prop_assert!((ab - (1.0 - 0.5 * d2)).abs() < 1e-9);
        }

        #[test]
        fn normalized_has_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..64)) {
            if let Ok(n) = normalize(&v) {
                let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
