//! Orchestration: one acquisition round (rollout, extract, refine, apply),
//! the multi-round refinement loop, and skill-conditioned guidance.

use rayon::prelude::*;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::env::{EnvError, Environment, Guidance, Policy};
use crate::extraction::{rollout, Candidate, ExtractionError, Extractor, RolloutSettings};
use crate::gateway::{ChatGateway, Embedder, GatewayError};
use crate::refinement::{apply_all, RefinementReport, Refiner};
use crate::retrieval::{assemble_prompt, LibraryIndex, RetrievalError, Retriever};
use crate::schema::ToolSchemaSet;
use crate::skill::{Origin, SkillLibrary, UpdateError};
use crate::task::{Task, Trajectory};
use crate::templates::TemplateSet;
use crate::vector::EmbeddingCache;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error("{0}")]
    Precondition(String),
}

/// Model-facing services shared by every stage.
#[derive(Clone, Copy)]
pub struct Services<'a> {
    pub chat: &'a dyn ChatGateway,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a EmbeddingCache,
    pub templates: &'a TemplateSet,
}

impl<'a> Services<'a> {
    pub fn index(&self, library: &SkillLibrary, config: &PipelineConfig) -> Result<LibraryIndex, RetrievalError> {
        LibraryIndex::build(library, self.embedder, self.cache, config.hnsw)
    }

    pub fn retriever<'b>(&'b self, index: &'b LibraryIndex, config: &PipelineConfig) -> Retriever<'b> {
        Retriever { chat: self.chat, embedder: self.embedder, cache: self.cache, templates: self.templates, index, config: config.retrieval }
    }

    /// Skill prompt for `task`; empty when the library is empty.
    pub fn guidance(&self, index: Option<&LibraryIndex>, task: &Task, config: &PipelineConfig) -> Result<Guidance, PipelineError> {
        let Some(index) = index.filter(|i| !i.library.is_empty()) else { return Ok(Guidance::default()) };
        let bundle = self.retriever(index, config).retrieve(&task.text)?;
        let (skill_prompt, withheld) = assemble_prompt(&bundle, config.retrieval.include_plans_in_prompt);
        if withheld {
            log::warn!("task {}: skill text overlapping the pseudo-plan was withheld from the prompt", task.id);
        }
        Ok(Guidance { skill_prompt, exploration_targets: Vec::new() })
    }
}

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub library: SkillLibrary,
    pub report: RefinementReport,
    pub trajectories: Vec<(Task, Vec<Trajectory>)>,
    pub candidates: usize,
}

/// Roll out every task under the current library, extract from every
/// successful trajectory, refine, and apply.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    svc: Services<'_>,
    config: &PipelineConfig,
    schemas: &ToolSchemaSet,
    library: &SkillLibrary,
    tasks: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
    iteration: u32,
    origin: Origin,
) -> Result<RoundOutput, PipelineError> {
    let index = if library.is_empty() { None } else { Some(svc.index(library, config)?) };
    let settings = RolloutSettings { m: config.rollout.m, temperature: config.rollout.temperature, step_cap: config.rollout.step_cap };
    let trajectories: Vec<(Task, Vec<Trajectory>)> = tasks
        .par_iter()
        .map(|t| {
            env.prepare_task(t)?;
            let g = svc.guidance(index.as_ref(), t, config)?;
            Ok((t.clone(), rollout(t, policy, env, &g, settings)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut extractor = Extractor::new(svc.chat, svc.templates);
    extractor.token_limit = config.rollout.summary_token_limit;
    extractor.iteration = iteration;
    extractor.origin = origin;
    let jobs: Vec<(&Task, &Trajectory)> =
        trajectories.iter().flat_map(|(t, ts)| ts.iter().filter(|x| x.success).map(move |x| (t, x))).collect();
    let extracted: Vec<_> = jobs.par_iter().map(|(t, x)| (x.id(), extractor.extract_all(t, x, library))).collect();
    let mut candidates: Vec<Candidate> = Vec::new();
    for (id, r) in extracted {
        match r {
            Ok(e) => {
                for d in &e.dropped {
                    log::info!("{id}: dropped {d}");
                }
                candidates.extend(e.candidates());
            }
            Err(e) => log::warn!("{id}: extraction failed: {e}"),
        }
    }
    let refiner = Refiner {
        chat: svc.chat,
        embedder: svc.embedder,
        cache: svc.cache,
        templates: svc.templates,
        schemas,
        config: config.refinement,
        iteration,
        origin,
    };
    let (updates, report) = refiner.refine(&candidates, library)?;
    let next = if updates.is_empty() { library.with_iteration(iteration) } else { apply_all(library, &updates, iteration)? };
    Ok(RoundOutput { library: next, report, trajectories, candidates: candidates.len() })
}

/// Result of the refinement loop. On error, the snapshots completed before
/// the failing round are retained.
#[derive(Debug)]
pub struct Iterated {
    /// D0 first, then one snapshot per completed round.
    pub snapshots: Vec<SkillLibrary>,
    pub reports: Vec<RefinementReport>,
    pub error: Option<PipelineError>,
}

/// Run up to `rounds` rounds from `library`. `improved(prev, next)` may stop
/// the loop early; the snapshot that failed to improve is still kept.
#[allow(clippy::too_many_arguments)]
pub fn iterate(
    svc: Services<'_>,
    config: &PipelineConfig,
    schemas: &ToolSchemaSet,
    library: &SkillLibrary,
    tasks: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
    rounds: u32,
    improved: Option<&dyn Fn(&SkillLibrary, &SkillLibrary) -> bool>,
) -> Iterated {
    let mut out = Iterated { snapshots: vec![library.clone()], reports: Vec::new(), error: None };
    for _ in 0..rounds {
        let current = out.snapshots.last().expect("D0 present").clone();
        let k = current.iteration + 1;
        match run_round(svc, config, schemas, &current, tasks, policy, env, k, Origin::Extracted) {
            Ok(r) => {
                out.snapshots.push(r.library);
                out.reports.push(r.report);
            }
            Err(e) => {
                out.error = Some(e);
                break;
            }
        }
        let n = out.snapshots.len();
        if let Some(f) = improved {
            if !f(&out.snapshots[n - 2], &out.snapshots[n - 1]) {
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{HashEmbedder, MockChat};
    use crate::toy_env::{AgentMode, ScriptedAgent, ToyWorld};
    use std::sync::Arc;

    fn small_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.rollout.m = 1;
        c
    }

    #[test]
    fn rounds_grow_monotonically_and_stop_on_request() {
        let (chat, emb, cache, t) = (MockChat::scripted(), HashEmbedder::default(), EmbeddingCache::new(), TemplateSet::builtin());
        let svc = Services { chat: &chat, embedder: &emb, cache: &cache, templates: &t };
        let world = ToyWorld::bundled();
        let agent = ScriptedAgent::new(Arc::clone(&world.fixture), AgentMode::SkillAware);
        let tasks = world.fixture.seed_tasks();
        let cfg = small_config();
        let schemas = world_schemas(&world);
        let it = iterate(svc, &cfg, &schemas, &SkillLibrary::new(), &tasks[..3], &agent, &world, 3, None);
        assert!(it.error.is_none());
        assert_eq!(it.snapshots.len(), 4);
        assert!(it.snapshots.windows(2).all(|w| w[0].len() <= w[1].len()));
        assert!(!it.snapshots[1].is_empty());
        let never = |_: &SkillLibrary, _: &SkillLibrary| false;
        let it = iterate(svc, &cfg, &schemas, &SkillLibrary::new(), &tasks[..1], &agent, &world, 3, Some(&never));
        assert_eq!(it.snapshots.len(), 2);
        let it = iterate(svc, &cfg, &schemas, &SkillLibrary::new(), &[], &agent, &world, 1, None);
        assert_eq!(it.snapshots[0].skills, it.snapshots[1].skills);
        assert_eq!(it.snapshots[1].iteration, 1);
    }

    fn world_schemas(w: &ToyWorld) -> ToolSchemaSet {
        w.schemas().clone()
    }
}
