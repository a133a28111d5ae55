//! Experience-guided exploration: find tools the seed experience never or
//! rarely exercised successfully, explore them, turn the exploration into
//! new tasks and run acquisition on those.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::env::{Environment, Guidance, Policy};
use crate::extraction::{rollout_one, Extractor, RolloutSettings};
use crate::pipeline::{run_round, PipelineError, RoundOutput, Services};
use crate::schema::ToolSchemaSet;
use crate::skill::{Origin, SkillLibrary};
use crate::task::{Split, Task, ToolOutcome, Trajectory};
use crate::templates::{extract_tagged, PromptKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolStats {
    pub tool: String,
    pub invocation_count: usize,
    pub success_count: usize,
    pub failure_count: usize,
    pub failure_rate: f64,
    pub never_invoked: bool,
}

/// One entry per universe tool, in universe order. Calls with outcome
/// `none` count as invocations that neither succeeded nor failed; tool
/// calls always carry an outcome, so in practice success + failure equals
/// invocations.
pub fn compute_tool_stats(trajectories: &[Trajectory], universe: &[String]) -> Vec<ToolStats> {
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for s in trajectories.iter().flat_map(|t| &t.steps) {
        let Some(tool) = s.action.tool_name() else { continue };
        let c = counts.entry(tool).or_default();
        c.0 += 1;
        match s.outcome {
            ToolOutcome::Success => c.1 += 1,
            ToolOutcome::Failure => c.2 += 1,
            ToolOutcome::None => {}
        }
    }
    universe
        .iter()
        .map(|t| {
            let (n, ok, bad) = counts.get(t.as_str()).copied().unwrap_or_default();
            ToolStats {
                tool: t.clone(),
                invocation_count: n,
                success_count: ok,
                failure_count: bad,
                failure_rate: if n == 0 { 0.0 } else { bad as f64 / n as f64 },
                never_invoked: n == 0,
            }
        })
        .collect()
}

/// Priority tier: 0 never invoked, 1 failure rate at or above the
/// threshold, 2 the rest.
pub fn tier(s: &ToolStats, failure_threshold: f64) -> u8 {
    if s.never_invoked {
        0
    } else if s.failure_rate >= failure_threshold {
        1
    } else {
        2
    }
}

/// Rank by tier, then ascending invocation count, then name.
pub fn prioritize_tools(stats: &[ToolStats], failure_threshold: f64) -> Vec<String> {
    let mut v: Vec<&ToolStats> = stats.iter().collect();
    v.sort_by(|a, b| {
        tier(a, failure_threshold)
            .cmp(&tier(b, failure_threshold))
            .then(a.invocation_count.cmp(&b.invocation_count))
            .then_with(|| a.tool.cmp(&b.tool))
    });
    v.into_iter().map(|s| s.tool.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationDirective {
    pub targets: Vec<String>,
    pub temperature: f64,
    pub rollouts_per_task: u32,
}

impl ExplorationDirective {
    pub fn guided(stats: &[ToolStats], config: &PipelineConfig) -> Self {
        let mut targets = prioritize_tools(stats, config.expansion.failure_tier_threshold);
        targets.truncate(config.expansion.budget);
        Self { targets, temperature: config.rollout.explore_temperature, rollouts_per_task: config.rollout.explore_rollouts }
    }

    /// Uniformly random targets of the same budget, for comparison runs.
    pub fn random(universe: &[String], config: &PipelineConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<String> = universe.choose_multiple(&mut rng, config.expansion.budget.min(universe.len())).cloned().collect();
        Self { targets, temperature: config.rollout.explore_temperature, rollouts_per_task: config.rollout.explore_rollouts }
    }

    pub fn validate(&self, schemas: &ToolSchemaSet) -> Result<(), PipelineError> {
        match self.targets.iter().find(|t| !schemas.contains(t)) {
            Some(t) => Err(PipelineError::Precondition(format!("exploration target {t} is not a declared tool"))),
            None => Ok(()),
        }
    }
}

/// One exploratory rollout per seed task. Seed task `i` is steered toward
/// target `i mod |targets|`, so the budget is spread across tasks. Tasks
/// whose environment fails are skipped.
pub fn explore(env: &dyn Environment, directive: &ExplorationDirective, seeds: &[Task], policy: &dyn Policy, step_cap: u32) -> Vec<(Task, Trajectory)> {
    if directive.targets.is_empty() {
        return Vec::new();
    }
    let settings = RolloutSettings { m: 1, temperature: directive.temperature, step_cap };
    let runs: Vec<Option<(Task, Trajectory)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let g = Guidance { skill_prompt: String::new(), exploration_targets: vec![directive.targets[i % directive.targets.len()].clone()] };
            let mut out = None;
            for r in 1..=directive.rollouts_per_task.max(1) {
                match rollout_one(task, policy, env, &g, settings, r) {
                    Ok(t) => out = Some((Task { split: Split::Synthesized, ..task.clone() }, t)),
                    Err(e) => {
                        log::warn!("exploration on {} skipped: {e}", task.id);
                        return None;
                    }
                }
            }
            out
        })
        .collect();
    runs.into_iter().flatten().collect()
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// One model call per exploratory trajectory; replies without a `<task>`
/// answer are skipped. Duplicates (by normalized text) are dropped.
pub fn synthesize_tasks(svc: Services<'_>, explored: &[(Task, Trajectory)]) -> Result<Vec<Task>, PipelineError> {
    if explored.is_empty() {
        return Err(PipelineError::Precondition("no exploratory trajectories to synthesize from".into()));
    }
    let extractor = Extractor::new(svc.chat, svc.templates);
    let replies: Vec<(String, Result<String, String>)> = explored
        .par_iter()
        .map(|(_, t)| {
            let rendered = extractor.render_trajectory(t);
            let tools = t.tools_succeeded().join(", ");
            let reply = svc
                .templates
                .request(PromptKind::TaskSynthesis, &[("trajectory", rendered), ("tools", tools)], 0.0, 512)
                .map_err(|e| e.to_string())
                .and_then(|req| svc.chat.complete(&req).map_err(|e| e.to_string()));
            (t.id(), reply)
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (source, reply) in replies {
        let text = match reply {
            Ok(r) => match extract_tagged(&r, "task").map(str::trim).filter(|t| !t.is_empty()) {
                Some(t) => t.to_string(),
                None => {
                    log::info!("{source}: no task in synthesis reply");
                    continue;
                }
            },
            Err(e) => {
                log::warn!("{source}: synthesis failed: {e}");
                continue;
            }
        };
        if seen.insert(normalize(&text)) {
            out.push(Task { id: format!("syn-{:03}", out.len() + 1), text, split: Split::Synthesized, source_trajectory: Some(source) });
        }
    }
    Ok(out)
}

/// Acquisition on synthesized tasks; new skills carry origin `expanded`.
#[allow(clippy::too_many_arguments)]
pub fn expand(
    svc: Services<'_>,
    config: &PipelineConfig,
    schemas: &ToolSchemaSet,
    library: &SkillLibrary,
    synthesized: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
) -> Result<RoundOutput, PipelineError> {
    if synthesized.is_empty() {
        return Ok(RoundOutput { library: library.clone(), report: Default::default(), trajectories: Vec::new(), candidates: 0 });
    }
    run_round(svc, config, schemas, library, synthesized, policy, env, library.iteration + 1, Origin::Expanded)
}

/// Everything an expansion run produced.
#[derive(Debug)]
pub struct ExpansionRun {
    pub stats: Vec<ToolStats>,
    pub directive: ExplorationDirective,
    pub explored: Vec<(Task, Trajectory)>,
    pub synthesized: Vec<Task>,
    pub round: RoundOutput,
}

/// Stats, directive, exploration, synthesis and acquisition in one call.
/// `directive` overrides the experience-guided one.
#[allow(clippy::too_many_arguments)]
pub fn run_expansion(
    svc: Services<'_>,
    config: &PipelineConfig,
    schemas: &ToolSchemaSet,
    library: &SkillLibrary,
    experience: &[Trajectory],
    seeds: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
    directive: Option<ExplorationDirective>,
) -> Result<ExpansionRun, PipelineError> {
    if experience.is_empty() {
        return Err(PipelineError::Precondition("no experience to guide exploration".into()));
    }
    let universe: Vec<String> = schemas.names().map(str::to_string).collect();
    let stats = compute_tool_stats(experience, &universe);
    let directive = directive.unwrap_or_else(|| ExplorationDirective::guided(&stats, config));
    directive.validate(schemas)?;
    let explored = explore(env, &directive, seeds, policy, config.rollout.step_cap);
    let synthesized = if explored.is_empty() { Vec::new() } else { synthesize_tasks(svc, &explored)? };
    let round = expand(svc, config, schemas, library, &synthesized, policy, env)?;
    Ok(ExpansionRun { stats, directive, explored, synthesized, round })
}

/// Distinct tools named by any skill, over the universe size.
pub fn tool_coverage(library: &SkillLibrary, universe: &[String]) -> (usize, f64) {
    let covered = library.tools_covered().into_iter().filter(|t| universe.contains(t)).count();
    (covered, if universe.is_empty() { 0.0 } else { covered as f64 / universe.len() as f64 })
}
