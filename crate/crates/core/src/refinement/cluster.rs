//! Density clustering over cosine distance.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::skill::SkillLevel;
use crate::vector::cosine_unchecked;

/// Cluster membership by input position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    /// Each cluster's members, ascending.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// DBSCAN with `d = 1 - cos`. Two points are neighbours when their cosine
/// is at least `sim_threshold` (that is, `d <= 1 - sim_threshold`). A point
/// is core when its neighbourhood, itself included, has at least
/// `min_samples` points. Points are visited in input order; a border point
/// joins the first cluster that reaches it.
pub fn dbscan(vectors: &[&[f64]], sim_threshold: f64, min_samples: usize) -> Partition {
    let n = vectors.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && cosine_unchecked(vectors[i], vectors[j]) >= sim_threshold).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() + 1 >= min_samples.max(1)).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if label[start].is_some() || !core[start] {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![start];
        label[start] = Some(id);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            if !core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                    members.push(q);
                    queue.push_back(q);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let noise = (0..n).filter(|&i| label[i].is_none()).collect();
    Partition { clusters, noise }
}

/// Index of the medoid: the member with the largest summed similarity to
/// the others, lowest position on ties.
pub fn medoid(vectors: &[&[f64]], members: &[usize]) -> usize {
    let mut best = members[0];
    let mut best_score = f64::NEG_INFINITY;
    for &i in members {
        let score: f64 = members.iter().filter(|&&j| j != i).map(|&j| cosine_unchecked(vectors[i], vectors[j])).sum();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Keep the `cap` members most similar to the medoid (the medoid first),
/// ties by position. Returns (kept ascending, dropped ascending).
pub fn truncate(vectors: &[&[f64]], members: &[usize], cap: usize) -> (Vec<usize>, Vec<usize>) {
    if members.len() <= cap {
        return (members.to_vec(), Vec::new());
    }
    let m = medoid(vectors, members);
    let mut ranked: Vec<(f64, usize)> =
        members.iter().map(|&i| (if i == m { f64::INFINITY } else { cosine_unchecked(vectors[i], vectors[m]) }, i)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = ranked[..cap].iter().map(|r| r.1).collect();
    let mut dropped: Vec<usize> = ranked[cap..].iter().map(|r| r.1).collect();
    kept.sort_unstable();
    dropped.sort_unstable();
    (kept, dropped)
}

/// A merge group of same-level skills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillCluster {
    pub level: SkillLevel,
    /// Candidate positions of the (truncated) members.
    pub members: Vec<usize>,
    pub member_names: Vec<String>,
    pub medoid: String,
    pub min_similarity_to_medoid: f64,
    pub mean_similarity_to_medoid: f64,
    /// Positions cut by the size cap.
    pub truncated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clustering {
    pub clusters: Vec<SkillCluster>,
    pub noise: Vec<usize>,
}

/// Cluster one level's candidates. `names[i]` and `vectors[i]` describe
/// candidate `i`; all must share `level`.
pub fn cluster_skills(level: SkillLevel, names: &[String], vectors: &[&[f64]], sim_threshold: f64, min_samples: usize, cap: usize) -> Clustering {
    let part = dbscan(vectors, sim_threshold, min_samples);
    let clusters = part
        .clusters
        .iter()
        .map(|members| {
            let (kept, truncated) = truncate(vectors, members, cap.max(1));
            let m = medoid(vectors, &kept);
            let sims: Vec<f64> = kept.iter().filter(|&&i| i != m).map(|&i| cosine_unchecked(vectors[i], vectors[m])).collect();
            let (min_s, mean_s) = if sims.is_empty() {
                (1.0, 1.0)
            } else {
                (sims.iter().copied().fold(f64::INFINITY, f64::min), sims.iter().sum::<f64>() / sims.len() as f64)
            };
            SkillCluster {
                level,
                member_names: kept.iter().map(|&i| names[i].clone()).collect(),
                medoid: names[m].clone(),
                members: kept,
                min_similarity_to_medoid: min_s,
                mean_similarity_to_medoid: mean_s,
                truncated,
            }
        })
        .collect();
    Clustering { clusters, noise: part.noise }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit vectors in the plane with prescribed angles give exact cosines.
    fn at(deg: f64) -> Vec<f64> {
        let r = deg.to_radians();
        vec![r.cos(), r.sin(), 0.0]
    }

    #[test]
    fn chain_forms_one_cluster() {
        // A-B ~0.95, B-C ~0.92, A-C ~0.76, D far away
        let a = at(0.0);
        let b = at(0.95f64.acos().to_degrees());
        let c = at(0.95f64.acos().to_degrees() + 0.92f64.acos().to_degrees());
        let d = vec![0.0, 0.0, 1.0];
        let vs: Vec<&[f64]> = vec![&a, &b, &c, &d];
        let p = dbscan(&vs, 0.9, 2);
        assert_eq!(p.clusters, vec![vec![0, 1, 2]]);
        assert_eq!(p.noise, vec![3]);
    }

    #[test]
    fn all_far_apart_is_noise() {
        let vs: Vec<Vec<f64>> = (0..4).map(|i| at(i as f64 * 40.0)).collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let p = dbscan(&refs, 0.9, 2);
        assert!(p.clusters.is_empty());
        assert_eq!(p.noise, vec![0, 1, 2, 3]);
    }

    #[test]
    fn twenty_similar_truncate_to_fifteen() {
        let vs: Vec<Vec<f64>> = (0..20).map(|i| at(i as f64 * 0.5)).collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let names: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let c = cluster_skills(SkillLevel::Functional, &names, &refs, 0.9, 2, 15);
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].members.len(), 15);
        assert_eq!(c.clusters[0].truncated.len(), 5);
        // the medoid sits in the middle of the arc, so both ends are cut
        assert!(c.clusters[0].truncated.contains(&0) && c.clusters[0].truncated.contains(&19));
    }
}
