//! Candidate refinement: cluster near-duplicates, merge each cluster with one
//! model call, filter the survivors, and turn them into library updates.

pub mod cluster;
pub mod filter;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RefinementConfig;
use crate::extraction::{Candidate, ExtractionError, SkillDraft};
use crate::gateway::{ChatGateway, Embedder, GatewayError};
use crate::schema::ToolSchemaSet;
use crate::skill::{apply_update, validate_skill, Origin, Provenance, Skill, SkillLevel, SkillLibrary, SkillUpdate, UpdateKind};
use crate::templates::{extract_tagged, PromptKind, TemplateSet};
use crate::vector::EmbeddingCache;

pub use cluster::{cluster_skills, dbscan, Clustering, Partition, SkillCluster};
pub use filter::{general_filter, tool_schema_llm_check, tool_schema_static_check, SchemaVerdict, StaticViolation, Verdict};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub add: usize,
    pub modify: usize,
    pub keep: usize,
}

/// Per-round refinement accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub iteration: u32,
    pub candidates_in: usize,
    pub clusters: usize,
    pub merged_out: usize,
    pub filtered_general: usize,
    pub filtered_static: usize,
    pub filtered_llm: usize,
    pub updates: UpdateCounts,
    /// Human-readable reasons for every candidate that did not survive.
    pub drops: Vec<String>,
}

/// Merge one cluster with a single model call. The reply must carry a JSON
/// array of skills inside `<skill>` tags.
pub fn merge_cluster(chat: &dyn ChatGateway, templates: &TemplateSet, members: &[&Skill]) -> Result<Vec<SkillDraft>, ExtractionError> {
    if members.len() < 2 {
        return Err(ExtractionError::Precondition("a merge needs at least two skills".into()));
    }
    let drafts: Vec<SkillDraft> = members.iter().map(|s| SkillDraft::of(s)).collect();
    let req = templates.request(PromptKind::Merge, &[("skills", serde_json::to_string_pretty(&drafts).expect("json"))], 0.0, 4096)?;
    let reply = chat.complete(&req)?;
    let body = extract_tagged(&reply, "skill").ok_or_else(|| ExtractionError::Parse("no <skill> tags".into()))?;
    let body = body.trim().trim_start_matches("```json").trim_start_matches("```").trim_end_matches("```").trim();
    let v: Value = serde_json::from_str(body).map_err(|e| ExtractionError::Parse(e.to_string()))?;
    let items = match v {
        Value::Array(a) => a,
        obj @ Value::Object(_) => vec![obj],
        _ => return Err(ExtractionError::Parse("merge reply is not a skill list".into())),
    };
    let out: Vec<SkillDraft> = items.iter().map(SkillDraft::from_value).collect::<Result<_, _>>().map_err(ExtractionError::Parse)?;
    if out.is_empty() {
        return Err(ExtractionError::Parse("merge produced no skills".into()));
    }
    Ok(out)
}

fn same_body(a: &Skill, b: &Skill) -> bool {
    a.document == b.document && a.content == b.content && a.tools == b.tools
}

/// Stateless refinement stage bound to its services.
pub struct Refiner<'a> {
    pub chat: &'a dyn ChatGateway,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a EmbeddingCache,
    pub templates: &'a TemplateSet,
    pub schemas: &'a ToolSchemaSet,
    pub config: RefinementConfig,
    pub iteration: u32,
    /// Origin stamped on merge outputs: `merged`, or `expanded` during
    /// expansion.
    pub origin: Origin,
}

enum Fate {
    Keep(Candidate),
    Drop(&'static str, String),
}

impl<'a> Refiner<'a> {
    fn merged_origin(&self) -> Origin {
        if self.origin == Origin::Expanded { Origin::Expanded } else { Origin::Merged }
    }

    /// Cluster and merge one level's candidates.
    fn merge_level(&self, level: SkillLevel, cands: &[&Candidate], report: &mut RefinementReport) -> Result<Vec<Candidate>, GatewayError> {
        let skills: Vec<&Skill> = cands.iter().map(|c| &c.skill).collect();
        let embeddings = self.cache.embed_skills(self.embedder, &skills)?;
        let vectors: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
        let names: Vec<String> = skills.iter().map(|s| s.name.clone()).collect();
        let cfg = &self.config;
        let clustering = cluster_skills(level, &names, &vectors, cfg.cluster_sim_threshold, cfg.min_cluster_points, cfg.cluster_cap);
        report.clusters += clustering.clusters.len();
        for c in &clustering.clusters {
            for &t in &c.truncated {
                report.drops.push(format!("{level} {}: cut from cluster of {} by the size cap", names[t], c.medoid));
            }
        }
        let merged: Vec<(usize, Vec<Candidate>, Option<String>)> = clustering
            .clusters
            .par_iter()
            .map(|c| {
                let members: Vec<&Skill> = c.members.iter().map(|&i| skills[i]).collect();
                let first = c.members[0];
                match merge_cluster(self.chat, self.templates, &members) {
                    Ok(drafts) => {
                        let lead = skills[first];
                        let modified_from = c.members.iter().find_map(|&i| cands[i].modified_from.clone());
                        let prov = Provenance {
                            source_task_id: lead.provenance.source_task_id.clone(),
                            iteration: self.iteration,
                            origin: self.merged_origin(),
                        };
                        let out = drafts
                            .into_iter()
                            .map(|d| {
                                let skill = d.into_skill(level, prov.clone(), lead.source_task_text.clone());
                                let flag = modified_from.clone().filter(|_| drafts_single_target(&skill, &members));
                                Candidate { skill, modified_from: flag }
                            })
                            .collect();
                        (first, out, None)
                    }
                    Err(e) => {
                        let pass: Vec<Candidate> = c.members.iter().map(|&i| cands[i].clone()).collect();
                        (first, pass, Some(format!("merge of cluster {} failed ({e}); members pass through", c.medoid)))
                    }
                }
            })
            .collect();
        let mut slots: Vec<(usize, Vec<Candidate>)> = clustering.noise.iter().map(|&i| (i, vec![cands[i].clone()])).collect();
        for (first, out, note) in merged {
            if let Some(n) = note {
                log::warn!("{n}");
                report.drops.push(n);
            } else {
                report.merged_out += out.len();
            }
            slots.push((first, out));
        }
        slots.sort_by_key(|s| s.0);
        Ok(slots.into_iter().flat_map(|s| s.1).collect())
    }

    fn filter_one(&self, c: Candidate) -> Fate {
        let s = &c.skill;
        let structural = validate_skill(s);
        if !structural.is_empty() {
            let why = structural.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Fate::Drop("structure", format!("{}: {why}", s.name));
        }
        if general_filter(self.chat, self.templates, s) == Verdict::Bad {
            return Fate::Drop("general", format!("{}: judged not portable", s.name));
        }
        let violations = tool_schema_static_check(s, self.schemas);
        if !violations.is_empty() {
            let why = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Fate::Drop("static", format!("{}: {why}", s.name));
        }
        if tool_schema_llm_check(self.chat, self.templates, s, self.schemas) == SchemaVerdict::Fail {
            return Fate::Drop("llm", format!("{}: schema check failed", s.name));
        }
        Fate::Keep(c)
    }

    /// The refinement operator: returns the updates to apply to `library`,
    /// in application order, plus the round report.
    pub fn refine(&self, candidates: &[Candidate], library: &SkillLibrary) -> Result<(Vec<SkillUpdate>, RefinementReport), GatewayError> {
        let mut report = RefinementReport { iteration: self.iteration, candidates_in: candidates.len(), ..Default::default() };
        let mut merged = Vec::new();
        for level in SkillLevel::ALL {
            let at: Vec<&Candidate> = candidates.iter().filter(|c| c.skill.level == level).collect();
            if !at.is_empty() {
                merged.extend(self.merge_level(level, &at, &mut report)?);
            }
        }
        let fates: Vec<Fate> = merged.into_par_iter().map(|c| self.filter_one(c)).collect();
        let mut survivors = Vec::new();
        for f in fates {
            match f {
                Fate::Keep(c) => survivors.push(c),
                Fate::Drop(stage, why) => {
                    match stage {
                        "general" => report.filtered_general += 1,
                        "static" => report.filtered_static += 1,
                        "llm" => report.filtered_llm += 1,
                        _ => {}
                    }
                    report.drops.push(format!("{stage}: {why}"));
                }
            }
        }
        let updates = to_updates(survivors, library, &mut report.drops);
        for u in &updates {
            match u.kind() {
                UpdateKind::Add => report.updates.add += 1,
                UpdateKind::Modify => report.updates.modify += 1,
                UpdateKind::Keep => report.updates.keep += 1,
            }
        }
        Ok((updates, report))
    }
}

/// A modify flag survives a merge only when the merge did not split the
/// cluster into differently named skills.
fn drafts_single_target(skill: &Skill, members: &[&Skill]) -> bool {
    members.iter().any(|m| m.name == skill.name)
}

fn fresh_name(base: &str, taken: impl Fn(&str) -> bool) -> String {
    (2..).map(|i| format!("{base} ({i})")).find(|n| !taken(n)).expect("unbounded")
}

/// Convert surviving candidates into updates that apply cleanly in order:
/// a name new to the library is an add; a resolvable `modified_from` is a
/// modify; an existing name is a keep when unchanged and a modify
/// otherwise. Same-name survivors within one round are kept once (atomic)
/// or renamed (other levels).
pub fn to_updates(mut survivors: Vec<Candidate>, library: &SkillLibrary, drops: &mut Vec<String>) -> Vec<SkillUpdate> {
    survivors.sort_by(|a, b| a.skill.level.cmp(&b.skill.level).then_with(|| a.skill.name.cmp(&b.skill.name)));
    let mut work = library.clone();
    let mut emitted: BTreeSet<String> = BTreeSet::new();
    let mut consumed: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    for c in survivors {
        let mut skill = c.skill;
        if emitted.contains(&skill.name) {
            if work.get(&skill.name).is_some_and(|w| same_body(w, &skill)) {
                out.push(SkillUpdate::Keep { kept_name: skill.name });
                continue;
            }
            if skill.level == SkillLevel::Atomic {
                drops.push(format!("duplicate: {} already updated this round", skill.name));
                continue;
            }
            skill.name = fresh_name(&skill.name, |n| work.contains(n) || emitted.contains(n));
        }
        let update = match c.modified_from.filter(|f| work.contains(f) && !consumed.contains(f)) {
            Some(from) => {
                if skill.name != from && work.contains(&skill.name) {
                    skill.name = fresh_name(&skill.name, |n| work.contains(n) || emitted.contains(n));
                }
                consumed.insert(from.clone());
                SkillUpdate::Modify { modified_from: from, skill }
            }
            None => match work.get(&skill.name) {
                Some(existing) if same_body(existing, &skill) => SkillUpdate::Keep { kept_name: skill.name },
                Some(_) => SkillUpdate::Modify { modified_from: skill.name.clone(), skill },
                None => SkillUpdate::Add { skill },
            },
        };
        match apply_update(&work, &update) {
            Ok(next) => {
                work = next;
                if let Some(s) = update.skill() {
                    emitted.insert(s.name.clone());
                } else if let SkillUpdate::Keep { kept_name } = &update {
                    emitted.insert(kept_name.clone());
                }
                out.push(update);
            }
            Err(e) => drops.push(format!("update rejected: {e}")),
        }
    }
    out
}

/// Apply updates in order; the result carries `iteration`.
pub fn apply_all(library: &SkillLibrary, updates: &[SkillUpdate], iteration: u32) -> Result<SkillLibrary, crate::skill::UpdateError> {
    let mut lib = library.with_iteration(iteration);
    for u in updates {
        lib = apply_update(&lib, u)?;
    }
    Ok(lib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Fallback, HashEmbedder, MockChat, MockRule};
    use crate::schema::{ParamSpec, ParamType, ToolSchema};
    use crate::skill::tests::functional;

    fn schemas() -> ToolSchemaSet {
        let p = |name: &str, ty: ParamType, required: bool| ParamSpec { name: name.into(), ty, required, description: String::new() };
        ToolSchemaSet::new(vec![
            ToolSchema {
                name: "login".into(),
                description: String::new(),
                parameters: vec![p("username", ParamType::String, true), p("password", ParamType::String, true)],
                returns: String::new(),
            },
            ToolSchema { name: "list_playlists".into(), description: String::new(), parameters: vec![p("page", ParamType::Integer, false)], returns: String::new() },
        ])
        .unwrap()
    }

    fn cand(s: Skill) -> Candidate {
        Candidate { skill: s, modified_from: None }
    }

    fn rules() -> Vec<MockRule> {
        vec![
            MockRule {
                tag: Some("merge".into()),
                reply: "<skill>[{\"name\": \"get all playlists\", \"document\": \"Fetch every playlist. Parameters: page: int\", \"content\": \"login(username=username, password=password)\\nlist_playlists(page=page)\", \"tools\": [\"login\", \"list_playlists\"]}]</skill>".into(),
                ..Default::default()
            },
            MockRule { tag: Some("general_filter".into()), contains: vec!["bad skill".into()], reply: "bad".into(), ..Default::default() },
            MockRule { tag: Some("general_filter".into()), reply: "good".into(), ..Default::default() },
            MockRule { tag: Some("tool_schema_filter".into()), reply: "<answer>correct</answer>".into(), ..Default::default() },
        ]
    }

    fn refiner<'a>(chat: &'a MockChat, emb: &'a HashEmbedder, cache: &'a EmbeddingCache, t: &'a TemplateSet, s: &'a ToolSchemaSet) -> Refiner<'a> {
        Refiner { chat, embedder: emb, cache, templates: t, schemas: s, config: RefinementConfig::default(), iteration: 1, origin: Origin::Extracted }
    }

    #[test]
    fn duplicates_merge_and_bad_skill_is_dropped() {
        let chat = MockChat::with_rules(rules(), Fallback::Fail);
        let (emb, cache, t, s) = (HashEmbedder::default(), EmbeddingCache::new(), TemplateSet::builtin(), schemas());
        let a = functional("get all playlists");
        let b = functional("get all playlists");
        let mut bad = functional("a bad skill with a very different name");
        bad.document = "bad skill: hard-coded to one user".into();
        let (updates, report) = refiner(&chat, &emb, &cache, &t, &s).refine(&[cand(a), cand(b), cand(bad)], &SkillLibrary::new()).unwrap();
        assert_eq!(updates.len(), 1);
        assert_eq!(updates[0].kind(), UpdateKind::Add);
        assert_eq!(updates[0].skill().unwrap().provenance.origin, Origin::Merged);
        assert_eq!((report.clusters, report.merged_out, report.filtered_general), (1, 1, 1));
    }

    #[test]
    fn empty_candidates_give_no_updates() {
        let chat = MockChat::with_rules(rules(), Fallback::Fail);
        let (emb, cache, t, s) = (HashEmbedder::default(), EmbeddingCache::new(), TemplateSet::builtin(), schemas());
        let (updates, _) = refiner(&chat, &emb, &cache, &t, &s).refine(&[], &SkillLibrary::new()).unwrap();
        assert!(updates.is_empty());
        assert_eq!(chat.total_calls(), 0);
    }

    #[test]
    fn static_failure_never_reaches_llm_check() {
        let chat = MockChat::with_rules(rules(), Fallback::Fail);
        let (emb, cache, t, s) = (HashEmbedder::default(), EmbeddingCache::new(), TemplateSet::builtin(), schemas());
        let mut broken = functional("x");
        broken.content = "frobnicate(a=1)".into();
        let (updates, report) = refiner(&chat, &emb, &cache, &t, &s).refine(&[cand(broken)], &SkillLibrary::new()).unwrap();
        assert!(updates.is_empty());
        assert_eq!(report.filtered_static, 1);
        assert_eq!(chat.calls_for("tool_schema_filter"), 0);
    }

    #[test]
    fn unparseable_merge_passes_members_through() {
        let mut r = rules();
        r[0].reply = "no tags".into();
        let chat = MockChat::with_rules(r, Fallback::Fail);
        let (emb, cache, t, s) = (HashEmbedder::default(), EmbeddingCache::new(), TemplateSet::builtin(), schemas());
        let a = functional("get all playlists");
        let mut b = functional("get all playlists");
        b.document.push('.');
        let (updates, _) = refiner(&chat, &emb, &cache, &t, &s).refine(&[cand(a), cand(b)], &SkillLibrary::new()).unwrap();
        // same name, different body: the second is renamed
        let names: Vec<&str> = updates.iter().map(|u| u.skill().unwrap().name.as_str()).collect();
        assert_eq!(names, ["get all playlists", "get all playlists (2)"]);
    }

    #[test]
    fn conversion_rules() {
        let existing = functional("a");
        let lib = apply_update(&SkillLibrary::new(), &SkillUpdate::Add { skill: existing.clone() }).unwrap();
        let mut drops = Vec::new();
        let mut changed = existing.clone();
        changed.document = "new doc".into();
        let mut renamed = existing.clone();
        renamed.name = "a2".into();
        let u = to_updates(vec![cand(existing.clone())], &lib, &mut drops);
        assert_eq!(u, vec![SkillUpdate::Keep { kept_name: "a".into() }]);
        let u = to_updates(vec![cand(changed.clone())], &lib, &mut drops);
        assert_eq!(u[0].kind(), UpdateKind::Modify);
        let u = to_updates(vec![Candidate { skill: renamed, modified_from: Some("a".into()) }], &lib, &mut drops);
        assert!(matches!(&u[0], SkillUpdate::Modify { modified_from, skill } if modified_from == "a" && skill.name == "a2"));
        let u = to_updates(vec![cand(functional("b"))], &lib, &mut drops);
        assert_eq!(u[0].kind(), UpdateKind::Add);
        assert!(drops.is_empty());
    }
}
