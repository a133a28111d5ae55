//! HNSW approximate nearest-neighbour index over unit vectors (inner
//! product), plus the exhaustive-scan reference used to check it.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vector::{cosine_unchecked, SkillEmbedding};

#[derive(Debug, Error, PartialEq)]
pub enum AnnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate name: {0}")]
    DuplicateName(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("vector for {0} is not unit norm")]
    NotUnitNorm(String),
    #[error("k must be positive")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 128, seed: 42 }
    }
}

/// One ranked hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub name: String,
    pub similarity: f64,
}

/// Sort by similarity descending, then name ascending.
pub fn rank_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.name.cmp(&b.name)));
}

/// Exhaustive scan with the same output contract as [`AnnIndex::search`].
pub fn brute_force_search(embeddings: &[SkillEmbedding], query: &[f64], k: usize) -> Result<Vec<Hit>, AnnError> {
    if k == 0 {
        return Err(AnnError::ZeroK);
    }
    let Some(first) = embeddings.first() else { return Err(AnnError::EmptyIndex) };
    if first.vector.dimension() != query.len() {
        return Err(AnnError::DimensionMismatch { expected: first.vector.dimension(), got: query.len() });
    }
    let mut hits: Vec<Hit> = embeddings
        .iter()
        .map(|e| Hit { name: e.skill_name.clone(), similarity: cosine_unchecked(e.vector.as_slice(), query) })
        .collect();
    rank_hits(&mut hits);
    hits.truncate(k);
    Ok(hits)
}

#[derive(Clone, Copy, PartialEq)]
struct Scored {
    sim: f64,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    // Larger similarity is "greater"; lower id wins ties so traversal order
    // is reproducible.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    name: String,
    vector: Vec<f64>,
    /// `links[l]` are the neighbours on layer `l`.
    links: Vec<Vec<u32>>,
}

/// Immutable-after-build HNSW graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    dimension: usize,
    params: HnswParams,
    nodes: Vec<Node>,
    entry: Option<u32>,
    snapshot_id: String,
}

impl AnnIndex {
    /// Build by inserting `embeddings` in order. Levels come from a ChaCha
    /// stream seeded by `params.seed`, one draw per insertion.
    pub fn build(embeddings: &[SkillEmbedding], params: HnswParams) -> Result<Self, AnnError> {
        let first = embeddings.first().ok_or(AnnError::EmptyIndex)?;
        let dimension = first.vector.dimension();
        let mut names = HashSet::new();
        for e in embeddings {
            if e.vector.dimension() != dimension {
                return Err(AnnError::DimensionMismatch { expected: dimension, got: e.vector.dimension() });
            }
            let norm = e.vector.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(AnnError::NotUnitNorm(e.skill_name.clone()));
            }
            if !names.insert(e.skill_name.as_str()) {
                return Err(AnnError::DuplicateName(e.skill_name.clone()));
            }
        }
        let mut index = Self { dimension, params, nodes: Vec::with_capacity(embeddings.len()), entry: None, snapshot_id: String::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m.max(2) as f64).ln();
        for e in embeddings {
            let u: f64 = rng.gen::<f64>();
            let level = (-(1.0 - u).ln() * ml).floor() as usize;
            index.insert(e.skill_name.clone(), e.vector.0.clone(), level.min(32));
        }
        index.snapshot_id = index.compute_snapshot_id();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn snapshot_id(&self) -> &str {
        &self.snapshot_id
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    pub fn vector(&self, name: &str) -> Option<&[f64]> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.vector.as_slice())
    }

    fn sim(&self, id: u32, q: &[f64]) -> f64 {
        cosine_unchecked(&self.nodes[id as usize].vector, q)
    }

    fn top_level(&self) -> usize {
        self.entry.map_or(0, |e| self.nodes[e as usize].links.len() - 1)
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 { self.params.m * 2 } else { self.params.m }
    }

    fn greedy(&self, q: &[f64], mut cur: u32, layer: usize) -> u32 {
        let mut best = self.sim(cur, q);
        loop {
            let mut changed = false;
            for &n in &self.nodes[cur as usize].links[layer] {
                let s = self.sim(n, q);
                if s > best || (s == best && n < cur) {
                    best = s;
                    cur = n;
                    changed = true;
                }
            }
            if !changed {
                return cur;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(&self, q: &[f64], entry: u32, ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = HashSet::new();
        visited.insert(entry);
        let start = Scored { sim: self.sim(entry, q), id: entry };
        let mut candidates = BinaryHeap::new();
        candidates.push(start);
        // min-heap of the current best `ef`
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
        results.push(std::cmp::Reverse(start));
        while let Some(c) = candidates.pop() {
            let worst = results.peek().expect("non-empty").0;
            if c < worst && results.len() >= ef {
                break;
            }
            for &n in &self.nodes[c.id as usize].links[layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored { sim: self.sim(n, q), id: n };
                let worst = results.peek().expect("non-empty").0;
                if results.len() < ef || s > worst {
                    candidates.push(s);
                    results.push(std::cmp::Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Neighbour-selection heuristic: prefer candidates closer to the base
    /// than to any already-selected neighbour, then top up with the rest.
    fn select(&self, candidates: &[Scored], m: usize) -> Vec<u32> {
        let mut chosen: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in candidates {
            if chosen.len() >= m {
                break;
            }
            let cv = &self.nodes[c.id as usize].vector;
            let diverse = chosen.iter().all(|s| cosine_unchecked(cv, &self.nodes[s.id as usize].vector) < c.sim);
            if diverse {
                chosen.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if chosen.len() >= m {
                break;
            }
            chosen.push(c);
        }
        chosen.into_iter().map(|s| s.id).collect()
    }

    fn insert(&mut self, name: String, vector: Vec<f64>, level: usize) {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { name, vector, links: vec![Vec::new(); level + 1] });
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            return;
        };
        let q = self.nodes[id as usize].vector.clone();
        let top = self.top_level();
        let mut cur = entry;
        for layer in (level + 1..=top).rev() {
            cur = self.greedy(&q, cur, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, cur, self.params.ef_construction, layer);
            let m = self.params.m;
            let neighbours = self.select(&found, m);
            self.nodes[id as usize].links[layer] = neighbours.clone();
            for n in neighbours {
                self.nodes[n as usize].links[layer].push(id);
                let cap = self.max_links(layer);
                if self.nodes[n as usize].links[layer].len() > cap {
                    let base = self.nodes[n as usize].vector.clone();
                    let mut scored: Vec<Scored> = self.nodes[n as usize].links[layer]
                        .iter()
                        .map(|&x| Scored { sim: self.sim(x, &base), id: x })
                        .collect();
                    scored.sort_by(|a, b| b.cmp(a));
                    self.nodes[n as usize].links[layer] = self.select(&scored, cap);
                }
            }
            cur = found[0].id;
        }
        if level > top {
            self.entry = Some(id);
        }
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<(), AnnError> {
        if k == 0 {
            return Err(AnnError::ZeroK);
        }
        if self.nodes.is_empty() {
            return Err(AnnError::EmptyIndex);
        }
        if query.len() != self.dimension {
            return Err(AnnError::DimensionMismatch { expected: self.dimension, got: query.len() });
        }
        Ok(())
    }

    /// Exact scan over the stored vectors.
    pub fn exact_search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>, AnnError> {
        self.check_query(query, k)?;
        let mut hits: Vec<Hit> =
            self.nodes.iter().map(|n| Hit { name: n.name.clone(), similarity: cosine_unchecked(&n.vector, query) }).collect();
        rank_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Graph traversal only, never the exact fallback.
    pub fn graph_search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>, AnnError> {
        self.check_query(query, k)?;
        let entry = self.entry.expect("non-empty index has an entry point");
        let mut cur = entry;
        for layer in (1..=self.top_level()).rev() {
            cur = self.greedy(query, cur, layer);
        }
        let found = self.search_layer(query, cur, self.params.ef_search.max(k), 0);
        let mut hits: Vec<Hit> =
            found.into_iter().map(|s| Hit { name: self.nodes[s.id as usize].name.clone(), similarity: s.sim }).collect();
        rank_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Top-`k` by similarity, descending, ties by name. Indexes no larger
    /// than `ef_search` are scanned exactly.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>, AnnError> {
        if self.nodes.len() <= self.params.ef_search {
            self.exact_search(query, k)
        } else {
            self.graph_search(query, k)
        }
    }

    fn compute_snapshot_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}:{}:{}:{}:{}", self.dimension, self.params.m, self.params.ef_construction, self.params.ef_search, self.params.seed));
        for n in &self.nodes {
            h.update(n.name.as_bytes());
            h.update([0u8]);
            for x in &n.vector {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Write the index to a binary cache file tagged with `key` (typically
    /// the library digest).
    pub fn save_cache(&self, path: &Path, key: &str) -> std::io::Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        put_str(&mut buf, key);
        put_str(&mut buf, &self.snapshot_id);
        for v in [self.dimension, self.params.m, self.params.ef_construction, self.params.ef_search] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.params.seed.to_le_bytes());
        buf.extend_from_slice(&self.entry.map_or(u64::MAX, u64::from).to_le_bytes());
        buf.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for n in &self.nodes {
            put_str(&mut buf, &n.name);
            for x in &n.vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&(n.links.len() as u64).to_le_bytes());
            for layer in &n.links {
                buf.extend_from_slice(&(layer.len() as u64).to_le_bytes());
                for id in layer {
                    buf.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&buf)?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Load a cache file; `None` when absent, stale (different key or
    /// format version) or unreadable.
    pub fn load_cache(path: &Path, key: &str) -> Option<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).ok()?.read_to_end(&mut bytes).ok()?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(CACHE_MAGIC.len())? != CACHE_MAGIC || r.u32()? != CACHE_VERSION || r.string()? != key {
            return None;
        }
        let snapshot_id = r.string()?;
        let dimension = r.u64()? as usize;
        let params = HnswParams { m: r.u64()? as usize, ef_construction: r.u64()? as usize, ef_search: r.u64()? as usize, seed: r.u64()? };
        let entry = match r.u64()? {
            u64::MAX => None,
            e => Some(u32::try_from(e).ok()?),
        };
        let n = r.u64()? as usize;
        let mut nodes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let name = r.string()?;
            let vector = (0..dimension).map(|_| r.f64()).collect::<Option<Vec<f64>>>()?;
            let levels = r.u64()? as usize;
            let mut links = Vec::with_capacity(levels.min(64));
            for _ in 0..levels {
                let len = r.u64()? as usize;
                links.push((0..len).map(|_| r.u32()).collect::<Option<Vec<u32>>>()?);
            }
            nodes.push(Node { name, vector, links });
        }
        if r.pos != bytes.len() || nodes.iter().flat_map(|x| x.links.iter().flatten()).any(|&id| id as usize >= n) {
            return None;
        }
        let index = Self { dimension, params, nodes, entry, snapshot_id };
        (index.compute_snapshot_id() == index.snapshot_id).then_some(index)
    }
}

const CACHE_MAGIC: &[u8] = b"SKBHNSW\0";
const CACHE_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn string(&mut self) -> Option<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}
