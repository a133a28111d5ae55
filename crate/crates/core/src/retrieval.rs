//! Inference-time retrieval: planning retrieval, pseudo-plan rewriting,
//! per-step search, thresholding, dedup, MMR, self-filter and prompt
//! assembly.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ann::{AnnError, AnnIndex, Hit, HnswParams};
use crate::config::RetrievalConfig;
use crate::gateway::{ChatGateway, Embedder, GatewayError};
use crate::skill::{parse_plan_steps, render_plan, PlanStep, Skill, SkillLevel, SkillLibrary};
use crate::templates::{PromptKind, TemplateSet};
use crate::vector::{cosine_unchecked, EmbeddingCache};

/// Slack on the band comparison so that `best - sim` computed in floating
/// point does not reject a value sitting exactly on the band edge.
pub const BAND_TOLERANCE: f64 = 1e-9;

/// Keep hits with similarity at least the floor and within the band of the
/// best hit. Input must be sorted descending; order is preserved.
pub fn hybrid_threshold_filter(hits: &[Hit], config: &RetrievalConfig) -> Vec<Hit> {
    let Some(best) = hits.first().map(|h| h.similarity) else { return Vec::new() };
    hits.iter()
        .filter(|h| h.similarity >= config.min_similarity && best - h.similarity <= config.best_match_band + BAND_TOLERANCE)
        .cloned()
        .collect()
}

/// A retrieval candidate with its embedding and relevance score.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub name: String,
    pub similarity: f64,
    pub vector: Vec<f64>,
}

fn by_score(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.similarity.total_cmp(&a.similarity).then_with(|| a.name.cmp(&b.name))
}

/// Greedy scan in descending score: drop any candidate whose cosine to an
/// already-retained one exceeds `threshold`.
pub fn semantic_dedup(mut candidates: Vec<Scored>, threshold: f64) -> Vec<Scored> {
    candidates.sort_by(by_score);
    let mut kept: Vec<Scored> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| cosine_unchecked(&k.vector, &c.vector) <= threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Greedy maximal marginal relevance over `similarity` as relevance. The
/// first pick is the most relevant candidate; ties go to the smaller name.
pub fn mmr_select(candidates: &[Scored], lambda: f64, cap: usize) -> Vec<Scored> {
    let mut remaining: Vec<&Scored> = candidates.iter().collect();
    remaining.sort_by(|a, b| a.name.cmp(&b.name));
    let mut selected: Vec<Scored> = Vec::new();
    while selected.len() < cap && !remaining.is_empty() {
        let mut best_i = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, d) in remaining.iter().enumerate() {
            let v = if selected.is_empty() {
                d.similarity
            } else {
                let redundancy = selected.iter().map(|s| cosine_unchecked(&d.vector, &s.vector)).fold(f64::NEG_INFINITY, f64::max);
                lambda * d.similarity - (1.0 - lambda) * redundancy
            };
            if v > best_v {
                best_v = v;
                best_i = i;
            }
        }
        selected.push(remaining.remove(best_i).clone());
    }
    selected
}

/// Union per-step lists by name, keeping each skill's highest similarity,
/// then dedup semantically.
pub fn cross_step_dedup(per_step: Vec<Vec<Scored>>, threshold: f64) -> Vec<Scored> {
    let mut best: BTreeMap<String, Scored> = BTreeMap::new();
    for c in per_step.into_iter().flatten() {
        match best.get(&c.name) {
            Some(prev) if prev.similarity >= c.similarity => {}
            _ => {
                best.insert(c.name.clone(), c);
            }
        }
    }
    semantic_dedup(best.into_values().collect(), threshold)
}

/// Searchable views over one library snapshot: planning skills keyed by
/// their source task text, functional and atomic skills by name and
/// document.
pub struct LibraryIndex {
    pub library: SkillLibrary,
    planning: Option<AnnIndex>,
    skills: Option<AnnIndex>,
}

impl LibraryIndex {
    pub fn build(library: &SkillLibrary, embedder: &dyn Embedder, cache: &EmbeddingCache, params: HnswParams) -> Result<Self, RetrievalError> {
        let tier = |levels: &[SkillLevel]| -> Result<Option<AnnIndex>, RetrievalError> {
            let skills: Vec<&Skill> = library.skills.values().filter(|s| levels.contains(&s.level)).collect();
            if skills.is_empty() {
                return Ok(None);
            }
            let emb = cache.embed_skills(embedder, &skills)?;
            Ok(Some(AnnIndex::build(&emb, params)?))
        };
        Ok(Self {
            planning: tier(&[SkillLevel::Planning])?,
            skills: tier(&[SkillLevel::Functional, SkillLevel::Atomic])?,
            library: library.clone(),
        })
    }

    pub fn planning_len(&self) -> usize {
        self.planning.as_ref().map_or(0, AnnIndex::len)
    }

    pub fn skills_len(&self) -> usize {
        self.skills.as_ref().map_or(0, AnnIndex::len)
    }

    fn scored(index: &AnnIndex, hits: Vec<Hit>) -> Vec<Scored> {
        hits.into_iter()
            .map(|h| Scored { vector: index.vector(&h.name).expect("hit names come from the index").to_vec(), name: h.name, similarity: h.similarity })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(#[from] AnnError),
}

/// Per-stage candidate counts and fallback flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub planning_candidates: usize,
    pub planning_kept: usize,
    pub plan_steps: usize,
    pub rewrite_fallback: bool,
    pub per_step_broad: Vec<usize>,
    pub per_step_filtered: Vec<usize>,
    pub union_deduped: usize,
    pub mmr_selected: usize,
    pub self_filter_fallback: bool,
    pub final_selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSkill {
    pub skill: Skill,
    pub similarity: f64,
}

/// Final skill set for one query. The pseudo-plan is kept only for
/// inspection and never reaches the assembled prompt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalBundle {
    pub planning_skills: Vec<Skill>,
    pub pseudo_plan: Vec<PlanStep>,
    pub selected_skills: Vec<SelectedSkill>,
    pub trace: RetrievalTrace,
}

impl RetrievalBundle {
    pub fn to_json(&self) -> Value {
        json!({
            "plan_steps": self.pseudo_plan.iter().map(PlanStep::render).collect::<Vec<_>>(),
            "selected": self.selected_skills.iter().map(|s| json!({
                "name": s.skill.name,
                "level": s.skill.level,
                "similarity": s.similarity,
            })).collect::<Vec<_>>(),
            "trace": self.trace,
        })
    }
}

/// Render the skill section of the system prompt: reference plans, then
/// functional skills, then atomic skills. Returns the text and whether
/// anything had to be withheld to keep pseudo-plan text out of it.
pub fn assemble_prompt(bundle: &RetrievalBundle, include_plans: bool) -> (String, bool) {
    let block = |s: &Skill| format!("### {}\n{}\n```\n{}\n```\n", s.name, s.document, s.content);
    let plan_block = |s: &Skill| format!("### {}\n{}\n", s.name, s.content);
    let leaks = |text: &str| bundle.pseudo_plan.iter().any(|p| !p.goal_text.is_empty() && text.contains(&p.goal_text));
    let mut withheld = false;
    let mut plans: Vec<String> = Vec::new();
    if include_plans {
        for s in &bundle.planning_skills {
            let b = plan_block(s);
            if leaks(&b) {
                withheld = true;
            } else {
                plans.push(b);
            }
        }
    }
    let mut tier = |level: SkillLevel| -> Vec<String> {
        let mut out = Vec::new();
        for s in bundle.selected_skills.iter().filter(|s| s.skill.level == level) {
            let b = block(&s.skill);
            if leaks(&b) {
                withheld = true;
            } else {
                out.push(b);
            }
        }
        out
    };
    let functional = tier(SkillLevel::Functional);
    let atomic = tier(SkillLevel::Atomic);
    let mut text = String::new();
    for (title, blocks) in [("Reference plans", plans), ("Functional skills", functional), ("Atomic skills", atomic)] {
        if !blocks.is_empty() {
            text.push_str(&format!("## {title}\n"));
            for b in blocks {
                text.push_str(&b);
            }
        }
    }
    (text, withheld)
}

/// The retrieval path bound to a library snapshot and services.
pub struct Retriever<'a> {
    pub chat: &'a dyn ChatGateway,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a EmbeddingCache,
    pub templates: &'a TemplateSet,
    pub index: &'a LibraryIndex,
    pub config: RetrievalConfig,
}

impl<'a> Retriever<'a> {
    fn embed_one(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(self.cache.embed_texts(self.embedder, &[text.to_string()])?.remove(0).0)
    }

    /// Planning skills whose source task resembles `query`.
    pub fn retrieve_planning(&self, query: &str, trace: &mut RetrievalTrace) -> Result<Vec<Skill>, RetrievalError> {
        let Some(index) = &self.index.planning else { return Ok(Vec::new()) };
        let q = self.embed_one(query)?;
        let hits = index.search(&q, self.config.broad_k)?;
        trace.planning_candidates = hits.len();
        let kept: Vec<Skill> = hybrid_threshold_filter(&hits, &self.config)
            .into_iter()
            .take(self.config.planning_cap)
            .filter_map(|h| self.index.library.get(&h.name).cloned())
            .collect();
        trace.planning_kept = kept.len();
        Ok(kept)
    }

    /// Rewrite `query` into ordered steps, conditioned on reference plans.
    /// Falls back to a single step holding the query when the reply has no
    /// steps; the bool reports the fallback.
    pub fn rewrite_pseudo_plan(&self, query: &str, plans: &[Skill]) -> (Vec<PlanStep>, bool) {
        let rendered = plans.iter().map(|p| format!("{}\n{}", p.name, p.content)).collect::<Vec<_>>().join("\n\n");
        let steps = self
            .templates
            .request(PromptKind::Rewrite, &[("task", query.to_string()), ("plans", rendered)], 0.0, 1024)
            .map_err(|e| e.to_string())
            .and_then(|req| self.chat.complete(&req).map_err(|e| e.to_string()))
            .map(|reply| parse_plan_steps(&reply));
        match steps {
            Ok(s) if !s.is_empty() => (s, false),
            other => {
                if let Err(e) = other {
                    log::warn!("pseudo-plan rewrite failed: {e}");
                }
                (vec![PlanStep { ordinal: 1, goal_text: query.trim().to_string(), key_tools: Vec::new() }], true)
            }
        }
    }

    /// Broad search per step goal, thresholded per step.
    pub fn retrieve_for_plan(&self, plan: &[PlanStep], trace: &mut RetrievalTrace) -> Result<Vec<Vec<Scored>>, RetrievalError> {
        let Some(index) = &self.index.skills else {
            trace.per_step_broad = vec![0; plan.len()];
            trace.per_step_filtered = vec![0; plan.len()];
            return Ok(vec![Vec::new(); plan.len()]);
        };
        let goals: Vec<String> = plan.iter().map(|p| p.goal_text.clone()).collect();
        let queries = if goals.is_empty() { Vec::new() } else { self.cache.embed_texts(self.embedder, &goals)? };
        let per: Vec<(usize, Vec<Scored>)> = queries
            .par_iter()
            .map(|q| {
                let hits = index.search(q.as_slice(), self.config.broad_k)?;
                let n = hits.len();
                Ok((n, LibraryIndex::scored(index, hybrid_threshold_filter(&hits, &self.config))))
            })
            .collect::<Result<_, AnnError>>()?;
        trace.per_step_broad = per.iter().map(|p| p.0).collect();
        trace.per_step_filtered = per.iter().map(|p| p.1.len()).collect();
        Ok(per.into_iter().map(|p| p.1).collect())
    }

    /// Ask the model which candidates apply. Unknown names are ignored; a
    /// reply naming no known candidate keeps the input unchanged, flagged.
    pub fn self_filter(&self, query: &str, plan: &[PlanStep], candidates: Vec<SelectedSkill>) -> (Vec<SelectedSkill>, bool) {
        if candidates.is_empty() {
            return (candidates, false);
        }
        let listing = candidates
            .iter()
            .map(|c| format!("- name: {}\n  level: {}\n  document: {}", c.skill.name, c.skill.level, c.skill.document.replace('\n', " ")))
            .collect::<Vec<_>>()
            .join("\n");
        let reply = self
            .templates
            .request(PromptKind::SelfFilter, &[("task", query.to_string()), ("plan", render_plan(plan)), ("candidates", listing)], 0.0, 512)
            .map_err(|e| e.to_string())
            .and_then(|req| self.chat.complete(&req).map_err(|e| e.to_string()));
        let chosen: Option<BTreeSet<String>> = reply.ok().and_then(|r| parse_name_list(&r));
        match chosen {
            Some(names) => {
                let kept: Vec<SelectedSkill> = candidates.iter().filter(|c| names.contains(&c.skill.name)).cloned().collect();
                if kept.is_empty() {
                    (candidates, true)
                } else {
                    (kept, false)
                }
            }
            None => (candidates, true),
        }
    }

    /// The full path for one query.
    pub fn retrieve(&self, query: &str) -> Result<RetrievalBundle, RetrievalError> {
        let mut trace = RetrievalTrace::default();
        let planning = self.retrieve_planning(query, &mut trace)?;
        let (plan, fallback) = self.rewrite_pseudo_plan(query, &planning);
        trace.plan_steps = plan.len();
        trace.rewrite_fallback = fallback;
        let per_step = self.retrieve_for_plan(&plan, &mut trace)?;
        let union = cross_step_dedup(per_step, self.config.dedup_threshold);
        trace.union_deduped = union.len();
        let picked = mmr_select(&union, self.config.mmr_lambda, self.config.final_cap);
        trace.mmr_selected = picked.len();
        let candidates: Vec<SelectedSkill> = picked
            .into_iter()
            .filter_map(|s| self.index.library.get(&s.name).map(|k| SelectedSkill { skill: k.clone(), similarity: s.similarity }))
            .collect();
        let (selected, flagged) = self.self_filter(query, &plan, candidates);
        trace.self_filter_fallback = flagged;
        trace.final_selected = selected.len();
        Ok(RetrievalBundle { planning_skills: planning, pseudo_plan: plan, selected_skills: selected, trace })
    }
}

/// Names from a JSON string array anywhere in `text`.
fn parse_name_list(text: &str) -> Option<BTreeSet<String>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end < start {
        return None;
    }
    let v: Vec<Value> = serde_json::from_str(&text[start..=end]).ok()?;
    Some(v.into_iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
}
