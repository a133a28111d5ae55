use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use skillkb::config::PipelineConfig;
use skillkb::env::{EnvError, Environment, Session};
use skillkb::expansion::{explore, run_expansion, synthesize_tasks, ExplorationDirective};
use skillkb::gateway::{Fallback, HashEmbedder, MockChat, MockRule};
use skillkb::pipeline::{run_round, PipelineError, Services};
use skillkb::schema::ToolSchemaSet;
use skillkb::skill::{Origin, SkillLibrary};
use skillkb::task::{Split, Task, Trajectory};
use skillkb::templates::TemplateSet;
use skillkb::toy_env::{AgentMode, ScriptedAgent, ToyWorld};
use skillkb::vector::EmbeddingCache;

/// The toy world, except that sessions for the listed tasks fail to start.
struct Flaky {
    inner: ToyWorld,
    failing: BTreeSet<String>,
}

impl Environment for Flaky {
    fn schemas(&self) -> &ToolSchemaSet {
        self.inner.schemas()
    }

    fn prepare_task(&self, task: &Task) -> Result<(), EnvError> {
        self.inner.prepare_task(task)
    }

    fn start(&self, task: &Task) -> Result<Box<dyn Session>, EnvError> {
        if self.failing.contains(&task.id) {
            return Err(EnvError::Backend(format!("{} is down", task.id)));
        }
        self.inner.start(task)
    }
}

struct Offline {
    chat: MockChat,
    embedder: HashEmbedder,
    cache: EmbeddingCache,
    templates: TemplateSet,
}

impl Offline {
    fn new(chat: MockChat) -> Self {
        Self { chat, embedder: HashEmbedder::new(1024, 42), cache: EmbeddingCache::new(), templates: TemplateSet::builtin() }
    }

    fn svc(&self) -> Services<'_> {
        Services { chat: &self.chat, embedder: &self.embedder, cache: &self.cache, templates: &self.templates }
    }
}

fn agent(world: &ToyWorld) -> ScriptedAgent {
    ScriptedAgent::new(Arc::clone(&world.fixture), AgentMode::SkillAware)
}

fn directive(targets: &[&str]) -> ExplorationDirective {
    ExplorationDirective { targets: targets.iter().map(|t| t.to_string()).collect(), temperature: 1.0, rollouts_per_task: 1 }
}

fn d1(off: &Offline, cfg: &PipelineConfig, world: &ToyWorld) -> (SkillLibrary, Vec<Trajectory>) {
    let r = run_round(off.svc(), cfg, world.schemas(), &SkillLibrary::new(), &world.fixture.seed_tasks(), &agent(world), world, 1, Origin::Extracted).unwrap();
    (r.library, r.trajectories.into_iter().flat_map(|(_, ts)| ts).collect())
}

#[test]
fn explore_skips_tasks_whose_environment_fails() {
    let world = ToyWorld::bundled();
    let seeds = world.fixture.seed_tasks();
    let env = Flaky { inner: ToyWorld::bundled(), failing: ["T3".to_string()].into() };
    let out = explore(&env, &directive(&["archive_file", "delete_message"]), &seeds, &agent(&world), 40);
    let ids: Vec<&str> = out.iter().map(|(t, _)| t.id.as_str()).collect();
    assert_eq!(ids, ["T1", "T2", "T4", "T5", "T6"]);
    assert!(out.iter().all(|(t, _)| t.split == Split::Synthesized));
}

#[test]
fn explore_with_no_targets_does_nothing() {
    let world = ToyWorld::bundled();
    assert!(explore(&world, &directive(&[]), &world.fixture.seed_tasks(), &agent(&world), 40).is_empty());
}

#[test]
fn explore_reaches_each_target() {
    let world = ToyWorld::bundled();
    let out = explore(&world, &directive(&["archive_file", "delete_message"]), &world.fixture.seed_tasks(), &agent(&world), 40);
    let used: BTreeSet<String> = out.iter().flat_map(|(_, t)| t.tools_succeeded()).collect();
    assert!(used.contains("archive_file") && used.contains("delete_message"), "{used:?}");
}

#[test]
fn synthesis_drops_duplicate_tasks() {
    let world = ToyWorld::bundled();
    let explored = explore(&world, &directive(&["archive_file"]), &world.fixture.seed_tasks(), &agent(&world), 40);
    assert_eq!(explored.len(), 6);
    let rule = MockRule { tag: Some("task_synthesis".into()), reply: "<task>Archive   the OLD report</task>".into(), ..Default::default() };
    let other = MockRule {
        tag: Some("task_synthesis".into()),
        contains: vec!["Budget".into()],
        reply: "<task>archive the old report</task>".into(),
        ..Default::default()
    };
    let off = Offline::new(MockChat::with_rules(vec![other, rule], Fallback::Fail));
    let tasks = synthesize_tasks(off.svc(), &explored).unwrap();
    assert_eq!(tasks.len(), 1);
    assert_eq!(tasks[0].id, "syn-001");
    assert_eq!(tasks[0].split, Split::Synthesized);
    assert!(tasks[0].source_trajectory.is_some());
}

#[test]
fn synthesis_skips_replies_without_a_task() {
    let world = ToyWorld::bundled();
    let explored = explore(&world, &directive(&["archive_file"]), &world.fixture.seed_tasks(), &agent(&world), 40);
    let off = Offline::new(MockChat::with_rules(Vec::new(), Fallback::Reply("no idea".into())));
    assert!(synthesize_tasks(off.svc(), &explored).unwrap().is_empty());
    assert!(matches!(synthesize_tasks(off.svc(), &[]), Err(PipelineError::Precondition(_))));
}

#[test]
fn expansion_with_zero_synthesized_tasks_keeps_library() {
    let cfg = PipelineConfig::default();
    let world = ToyWorld::bundled();
    let off = Offline::new(MockChat::scripted());
    let (lib, experience) = d1(&off, &cfg, &world);

    let silent = Offline::new(MockChat::with_rules(Vec::new(), Fallback::Reply("nothing".into())));
    let run = run_expansion(silent.svc(), &cfg, world.schemas(), &lib, &experience, &world.fixture.seed_tasks(), &agent(&world), &world, None).unwrap();
    assert_eq!(run.explored.len(), 6);
    assert!(run.synthesized.is_empty());
    assert_eq!(run.round.library, lib);
    assert_eq!(run.round.candidates, 0);
}

#[test]
fn expansion_needs_experience_and_declared_targets() {
    let cfg = PipelineConfig::default();
    let world = ToyWorld::bundled();
    let off = Offline::new(MockChat::scripted());
    let seeds = world.fixture.seed_tasks();
    let err = run_expansion(off.svc(), &cfg, world.schemas(), &SkillLibrary::new(), &[], &seeds, &agent(&world), &world, None).unwrap_err();
    assert!(matches!(err, PipelineError::Precondition(_)));

    let (lib, experience) = d1(&off, &cfg, &world);
    let bogus = Some(directive(&["teleport"]));
    let err = run_expansion(off.svc(), &cfg, world.schemas(), &lib, &experience, &seeds, &agent(&world), &world, bogus).unwrap_err();
    assert!(matches!(err, PipelineError::Precondition(_)));
}

#[test]
fn expanded_skills_are_marked_and_nothing_is_lost() {
    let cfg = PipelineConfig::default();
    let world = ToyWorld::bundled();
    let off = Offline::new(MockChat::scripted());
    let (lib, experience) = d1(&off, &cfg, &world);
    let run = run_expansion(off.svc(), &cfg, world.schemas(), &lib, &experience, &world.fixture.seed_tasks(), &agent(&world), &world, None).unwrap();
    let out = &run.round.library;
    assert_eq!(out.iteration, lib.iteration + 1);
    assert!(lib.skills.keys().all(|n| out.contains(n)), "expansion never deletes");
    let fresh: Vec<_> = out.skills.values().filter(|s| !lib.contains(&s.name)).collect();
    assert!(!fresh.is_empty());
    assert!(fresh.iter().all(|s| s.provenance.origin == Origin::Expanded));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn explore_returns_exactly_the_healthy_seeds(mask in proptest::collection::vec(any::<bool>(), 6), pick in 1usize..=3) {
        let world = ToyWorld::bundled();
        let seeds = world.fixture.seed_tasks();
        let failing: BTreeSet<String> = seeds.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t.id.clone()).collect();
        let env = Flaky { inner: ToyWorld::bundled(), failing: failing.clone() };
        let targets = ["archive_file", "delete_message", "list_files"];
        let out = explore(&env, &directive(&targets[..pick]), &seeds, &agent(&world), 40);
        let got: Vec<String> = out.iter().map(|(t, _)| t.id.clone()).collect();
        let want: Vec<String> = seeds.iter().map(|t| t.id.clone()).filter(|id| !failing.contains(id)).collect();
        prop_assert_eq!(got, want);
    }
}
