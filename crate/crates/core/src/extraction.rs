//! Rollouts and skill extraction at the planning, functional and atomic
//! levels, including observation summarization and update parsing.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::env::{Decision, EnvError, Environment, Guidance, Observed, Policy};
use crate::gateway::{ChatGateway, GatewayError};
use crate::skill::{parse_plan_steps, render_plan, validate_skill, Origin, PlanStep, Provenance, Skill, SkillLevel, SkillLibrary, SkillUpdate};
use crate::task::{Task, ToolOutcome, Trajectory, TrajectoryStep};
use crate::templates::{extract_tagged, PromptKind, TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("plan has no steps")]
    EmptyPlan,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// The four model-facing fields of a skill, as they appear in prompts and
/// model replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillDraft {
    pub name: String,
    pub document: String,
    pub content: String,
    pub tools: Vec<String>,
}

fn text_field(v: &Value, key: &str) -> String {
    match v.get(key) {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        // models sometimes emit code as a list of lines
        Some(Value::Array(a)) if a.iter().all(Value::is_string) => {
            a.iter().filter_map(Value::as_str).collect::<Vec<_>>().join("\n")
        }
        Some(other) => serde_json::to_string_pretty(other).expect("json"),
    }
}

impl SkillDraft {
    pub fn of(skill: &Skill) -> Self {
        Self { name: skill.name.clone(), document: skill.document.clone(), content: skill.content.clone(), tools: skill.tools.clone() }
    }

    /// Lenient reading of a model-produced skill object.
    pub fn from_value(v: &Value) -> Result<Self, String> {
        if !v.is_object() {
            return Err("skill is not an object".into());
        }
        let name = text_field(v, "name").trim().to_string();
        if name.is_empty() {
            return Err("skill without a name".into());
        }
        let tools = match v.get("tools") {
            Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            Some(Value::String(s)) => s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
            _ => Vec::new(),
        };
        Ok(Self { name, document: text_field(v, "document"), content: text_field(v, "content"), tools })
    }

    pub fn into_skill(self, level: SkillLevel, provenance: Provenance, source_task_text: Option<String>) -> Skill {
        Skill {
            name: self.name,
            document: self.document,
            content: self.content,
            tools: self.tools,
            level,
            provenance,
            source_task_text,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("json")
    }
}

/// A candidate skill leaving extraction, with the extractor's modify flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub skill: Skill,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_from: Option<String>,
}

/// Whitespace-delimited token count.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(start) = t.find("```") else { return t };
    let after = &t[start + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.rfind("```") {
        Some(end) => body[..end].trim(),
        None => body.trim(),
    }
}

/// Drop `# ...` comments that models copy from the format example; only
/// outside of strings.
fn strip_json_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_str = false;
        let mut escaped = false;
        let mut cut = line.len();
        for (i, c) in line.char_indices() {
            if escaped {
                escaped = false;
                continue;
            }
            match c {
                '\\' if in_str => escaped = true,
                '"' => in_str = !in_str,
                '#' if !in_str => {
                    cut = i;
                    break;
                }
                _ => {}
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

fn parse_json_lenient(text: &str) -> Result<Value, ExtractionError> {
    let body = strip_fences(text);
    if let Ok(v) = serde_json::from_str(body) {
        return Ok(v);
    }
    // Trailing commas and comment annotations are common in model output.
    let cleaned = strip_json_comments(body);
    let cleaned = regex_lite_trailing_commas(&cleaned);
    serde_json::from_str(&cleaned).map_err(|e| ExtractionError::Parse(e.to_string()))
}

fn regex_lite_trailing_commas(text: &str) -> String {
    let re = regex::Regex::new(r",(\s*[\]}])").expect("regex");
    re.replace_all(text, "$1").into_owned()
}

/// Parse an update list reply. Skills are materialized at `level` with the
/// given provenance.
pub fn parse_update_response(text: &str, level: SkillLevel, provenance: &Provenance) -> Result<Vec<SkillUpdate>, ExtractionError> {
    let v = parse_json_lenient(text)?;
    let items = match v {
        Value::Array(a) => a,
        Value::Object(_) => vec![v],
        _ => return Err(ExtractionError::Parse("expected a JSON array of updates".into())),
    };
    let mut out = Vec::with_capacity(items.len());
    for item in &items {
        let option = item.get("option").and_then(Value::as_str).map(|s| s.trim().to_ascii_lowercase());
        let skill = |item: &Value| -> Result<Skill, ExtractionError> {
            let s = item.get("skill").ok_or_else(|| ExtractionError::Schema("update lacks \"skill\"".into()))?;
            let draft = SkillDraft::from_value(s).map_err(ExtractionError::Schema)?;
            Ok(draft.into_skill(level, provenance.clone(), None))
        };
        match option.as_deref() {
            Some("add") => out.push(SkillUpdate::Add { skill: skill(item)? }),
            Some("modify") => {
                let from = item
                    .get("modified_from")
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| ExtractionError::Schema("modify lacks \"modified_from\"".into()))?;
                out.push(SkillUpdate::Modify { modified_from: from.to_string(), skill: skill(item)? });
            }
            Some("keep") => {
                let name = item
                    .get("skill_name")
                    .or_else(|| item.get("kept_name"))
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| ExtractionError::Schema("keep lacks \"skill_name\"".into()))?;
                out.push(SkillUpdate::Keep { kept_name: name.to_string() });
            }
            Some(other) => return Err(ExtractionError::Schema(format!("unknown option {other:?}"))),
            None => return Err(ExtractionError::Schema("update lacks \"option\"".into())),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub m: u32,
    pub temperature: f64,
    pub step_cap: u32,
}

/// Run `m` episodes of `policy` on fresh sessions of `env`.
pub fn rollout(
    task: &Task,
    policy: &dyn Policy,
    env: &dyn Environment,
    guidance: &Guidance,
    settings: RolloutSettings,
) -> Result<Vec<Trajectory>, EnvError> {
    (1..=settings.m.max(1)).map(|r| rollout_one(task, policy, env, guidance, settings, r)).collect()
}

pub fn rollout_one(
    task: &Task,
    policy: &dyn Policy,
    env: &dyn Environment,
    guidance: &Guidance,
    settings: RolloutSettings,
    rollout_index: u32,
) -> Result<Trajectory, EnvError> {
    let mut session = env.start(task)?;
    let mut episode = policy.begin(task, guidance, settings.temperature, rollout_index);
    let mut steps: Vec<TrajectoryStep> = Vec::new();
    let mut last: Option<Observed> = None;
    while (steps.len() as u32) < settings.step_cap {
        let (thought, action) = match episode.next(last.as_ref()) {
            Decision::Finish { .. } => break,
            Decision::Act { thought, action } => (thought, action),
        };
        let (observation, outcome) = match session.step(&action) {
            Ok(r) => r,
            Err(EnvError::UnknownTool(t)) => (json!({"ok": false, "error": "unknown_tool", "tool": t}).to_string(), ToolOutcome::Failure),
            Err(e) => return Err(e),
        };
        steps.push(TrajectoryStep { t: steps.len() as u32 + 1, thought, action, observation: observation.clone(), outcome });
        last = Some(Observed { observation, outcome });
    }
    let success = session.evaluate()?;
    Ok(Trajectory { task_id: task.id.clone(), rollout_index, steps, success })
}

/// Turns successful trajectories into validated skill candidates.
pub struct Extractor<'a> {
    pub chat: &'a dyn ChatGateway,
    pub templates: &'a TemplateSet,
    pub token_limit: usize,
    pub iteration: u32,
    pub origin: Origin,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

/// Everything one trajectory yielded.
#[derive(Debug, Clone, Default)]
pub struct Extracted {
    pub planning: Option<Skill>,
    pub updates: Vec<SkillUpdate>,
    pub dropped: Vec<String>,
}

impl Extracted {
    /// Add and modify updates as candidates, plan first; keeps are dropped.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = self.planning.iter().map(|s| Candidate { skill: s.clone(), modified_from: None }).collect();
        for u in &self.updates {
            match u {
                SkillUpdate::Add { skill } => out.push(Candidate { skill: skill.clone(), modified_from: None }),
                SkillUpdate::Modify { modified_from, skill } => {
                    out.push(Candidate { skill: skill.clone(), modified_from: Some(modified_from.clone()) })
                }
                SkillUpdate::Keep { .. } => {}
            }
        }
        out
    }
}

impl<'a> Extractor<'a> {
    pub fn new(chat: &'a dyn ChatGateway, templates: &'a TemplateSet) -> Self {
        Self { chat, templates, token_limit: 1500, iteration: 0, origin: Origin::Extracted, temperature: 0.0, max_output_tokens: 4096 }
    }

    fn provenance(&self, task: &Task) -> Provenance {
        Provenance { source_task_id: task.id.clone(), iteration: self.iteration, origin: self.origin }
    }

    fn ask(&self, kind: PromptKind, vars: &[(&str, String)]) -> Result<String, ExtractionError> {
        let req = self.templates.request(kind, vars, self.temperature, self.max_output_tokens)?;
        Ok(self.chat.complete(&req)?)
    }

    /// Observations over the token limit are replaced by the model's
    /// `<feedback>` summary. Returns the text and whether the hard-truncation
    /// fallback had to be used.
    pub fn summarize_feedback(&self, action: &str, observation: &str) -> (String, bool) {
        if count_tokens(observation) <= self.token_limit {
            return (observation.to_string(), false);
        }
        for _ in 0..2 {
            match self.ask(PromptKind::ToolSummary, &[("action", action.to_string()), ("observation", observation.to_string())]) {
                Ok(reply) => {
                    if let Some(s) = extract_tagged(&reply, "feedback").filter(|s| !s.is_empty()) {
                        return (s.to_string(), false);
                    }
                }
                Err(e) => log::warn!("feedback summary failed: {e}"),
            }
        }
        log::warn!("feedback summary unavailable; truncating to {} tokens", self.token_limit);
        (observation.split_whitespace().take(self.token_limit).collect::<Vec<_>>().join(" "), true)
    }

    /// Trajectory as JSON lines in the trajectory-log step shape, with long
    /// observations summarized.
    pub fn render_trajectory(&self, trajectory: &Trajectory) -> String {
        trajectory
            .steps
            .iter()
            .map(|s| {
                let (observation, _) = self.summarize_feedback(&format!("{}\n{}", s.thought, s.action.render_call()), &s.observation);
                serde_json::to_string(&TrajectoryStep { observation, ..s.clone() }).expect("json")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn extract_planning_skill(&self, trajectory: &Trajectory, task: &Task, rendered: &str) -> Result<Skill, ExtractionError> {
        if !trajectory.success {
            return Err(ExtractionError::Precondition(format!("trajectory {} did not succeed", trajectory.id())));
        }
        let reply = self.ask(PromptKind::PlanExtract, &[("task", task.text.clone()), ("trajectory", rendered.to_string())])?;
        let body = extract_tagged(&reply, "plan").ok_or_else(|| ExtractionError::Parse("no <plan> tags".into()))?;
        let steps = parse_plan_steps(body);
        if steps.is_empty() {
            return Err(ExtractionError::EmptyPlan);
        }
        let mut tools: Vec<String> = Vec::new();
        for t in steps.iter().flat_map(|s| &s.key_tools) {
            if !tools.contains(t) {
                tools.push(t.clone());
            }
        }
        let skill = Skill {
            name: format!("plan:{}", task.id),
            document: format!("Reference plan for tasks like: {}", task.text),
            content: render_plan(&steps),
            tools,
            level: SkillLevel::Planning,
            provenance: self.provenance(task),
            source_task_text: Some(task.text.clone()),
        };
        Ok(skill)
    }

    fn library_section(library: &SkillLibrary, level: SkillLevel) -> String {
        library.skills_at(level).map(|s| SkillDraft::of(s).to_json_line()).collect::<Vec<_>>().join("\n")
    }

    fn keep_valid(updates: Vec<SkillUpdate>, dropped: &mut Vec<String>, accept: impl Fn(&Skill) -> bool) -> Vec<SkillUpdate> {
        updates
            .into_iter()
            .filter(|u| match u.skill() {
                None => true,
                Some(s) => {
                    let v = validate_skill(s);
                    if !v.is_empty() {
                        dropped.push(format!("{}: {}", s.name, v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")));
                        false
                    } else if !accept(s) {
                        dropped.push(format!("{}: outside the requested scope", s.name));
                        false
                    } else {
                        true
                    }
                }
            })
            .collect()
    }

    /// One chat call per plan step.
    pub fn extract_functional_skills(
        &self,
        task: &Task,
        rendered: &str,
        plan: &[PlanStep],
        library: &SkillLibrary,
    ) -> Result<(Vec<SkillUpdate>, Vec<String>), ExtractionError> {
        if plan.is_empty() {
            return Err(ExtractionError::EmptyPlan);
        }
        let lib = Self::library_section(library, SkillLevel::Functional);
        let prov = self.provenance(task);
        let per_step: Vec<Result<Vec<SkillUpdate>, ExtractionError>> = plan
            .par_iter()
            .map(|step| {
                let reply = self.ask(
                    PromptKind::FunctionalExtract,
                    &[("task", task.text.clone()), ("trajectory", rendered.to_string()), ("library", lib.clone()), ("step", step.render())],
                )?;
                parse_update_response(&reply, SkillLevel::Functional, &prov)
            })
            .collect();
        let mut updates = Vec::new();
        let mut dropped = Vec::new();
        for (step, r) in plan.iter().zip(per_step) {
            match r {
                Ok(u) => updates.extend(Self::keep_valid(u, &mut dropped, |_| true)),
                Err(e) => dropped.push(format!("step {}: {e}", step.ordinal)),
            }
        }
        Ok((updates, dropped))
    }

    pub fn extract_atomic_skills(
        &self,
        trajectory: &Trajectory,
        task: &Task,
        rendered: &str,
        tool: &str,
        library: &SkillLibrary,
    ) -> Result<(Vec<SkillUpdate>, Vec<String>), ExtractionError> {
        if !trajectory.invokes(tool) {
            return Err(ExtractionError::Precondition(format!("tool {tool} not invoked in {}", trajectory.id())));
        }
        let reply = self.ask(
            PromptKind::AtomicExtract,
            &[
                ("task", task.text.clone()),
                ("trajectory", rendered.to_string()),
                ("library", Self::library_section(library, SkillLevel::Atomic)),
                ("tool", tool.to_string()),
            ],
        )?;
        let updates = parse_update_response(&reply, SkillLevel::Atomic, &self.provenance(task))?;
        let mut dropped = Vec::new();
        let mut kept = Self::keep_valid(updates, &mut dropped, |s| s.name == tool);
        // one reusable skill per tool
        let mut seen_skill = false;
        kept.retain(|u| {
            if u.skill().is_none() {
                return true;
            }
            let first = !seen_skill;
            seen_skill = true;
            first
        });
        Ok((kept, dropped))
    }

    /// Planning, functional and atomic extraction for one trajectory.
    pub fn extract_all(&self, task: &Task, trajectory: &Trajectory, library: &SkillLibrary) -> Result<Extracted, ExtractionError> {
        if !trajectory.success {
            return Err(ExtractionError::Precondition(format!("trajectory {} did not succeed", trajectory.id())));
        }
        let rendered = self.render_trajectory(trajectory);
        let plan = self.extract_planning_skill(trajectory, task, &rendered)?;
        let mut out = Extracted::default();
        let steps = plan.plan_steps();
        let (functional, dropped) = self.extract_functional_skills(task, &rendered, &steps, library)?;
        out.updates.extend(functional);
        out.dropped.extend(dropped);
        let tools: Vec<String> = trajectory.tools_used();
        let atomic: Vec<Result<(Vec<SkillUpdate>, Vec<String>), ExtractionError>> =
            tools.par_iter().map(|t| self.extract_atomic_skills(trajectory, task, &rendered, t, library)).collect();
        for (tool, r) in tools.iter().zip(atomic) {
            match r {
                Ok((u, d)) => {
                    out.updates.extend(u);
                    out.dropped.extend(d);
                }
                Err(e) => out.dropped.push(format!("atomic {tool}: {e}")),
            }
        }
        out.planning = Some(plan);
        Ok(out)
    }
}

/// Distinct tool names across the steps, in order of first use.
pub fn distinct_tools(steps: &[TrajectoryStep]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    steps
        .iter()
        .filter_map(|s| s.action.tool_name())
        .filter(|t| seen.insert(t.to_string()))
        .map(str::to_string)
        .collect()
}
