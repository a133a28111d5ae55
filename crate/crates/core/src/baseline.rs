//! A/B measurement: the same policy with and without retrieved skills.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::env::{Environment, Guidance, Policy};
use crate::extraction::{rollout, RolloutSettings};
use crate::pipeline::{PipelineError, Services};
use crate::skill::SkillLibrary;
use crate::task::{Task, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub successes: u32,
    pub rollouts: u32,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over tasks of the per-task success fraction.
    pub avg_at_m: f64,
    /// Fraction of tasks with at least one success.
    pub pass_at_m: f64,
    /// Mean step count over all rollouts.
    pub mean_steps: f64,
    pub per_task: Vec<TaskMetrics>,
}

pub fn metrics(runs: &[(Task, Vec<Trajectory>)]) -> Metrics {
    let per_task: Vec<TaskMetrics> = runs
        .iter()
        .map(|(t, ts)| TaskMetrics {
            task_id: t.id.clone(),
            successes: ts.iter().filter(|x| x.success).count() as u32,
            rollouts: ts.len() as u32,
            mean_steps: if ts.is_empty() { 0.0 } else { ts.iter().map(|x| x.steps.len()).sum::<usize>() as f64 / ts.len() as f64 },
        })
        .collect();
    let n = per_task.len().max(1) as f64;
    let all: Vec<usize> = runs.iter().flat_map(|(_, ts)| ts.iter().map(|x| x.steps.len())).collect();
    Metrics {
        avg_at_m: per_task.iter().map(|p| if p.rollouts == 0 { 0.0 } else { p.successes as f64 / p.rollouts as f64 }).sum::<f64>() / n,
        pass_at_m: per_task.iter().filter(|p| p.successes > 0).count() as f64 / n,
        mean_steps: if all.is_empty() { 0.0 } else { all.iter().sum::<usize>() as f64 / all.len() as f64 },
        per_task,
    }
}

fn run(
    tasks: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
    settings: RolloutSettings,
    guidance: &(dyn Fn(&Task) -> Result<Guidance, PipelineError> + Sync),
) -> Result<Vec<(Task, Vec<Trajectory>)>, PipelineError> {
    tasks
        .par_iter()
        .map(|t| {
            env.prepare_task(t)?;
            let g = guidance(t)?;
            Ok((t.clone(), rollout(t, policy, env, &g, settings)?))
        })
        .collect()
}

/// No skill conditioning.
pub fn run_baseline(
    tasks: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
    settings: RolloutSettings,
) -> Result<(Metrics, Vec<(Task, Vec<Trajectory>)>), PipelineError> {
    let runs = run(tasks, policy, env, settings, &|_| Ok(Guidance::default()))?;
    Ok((metrics(&runs), runs))
}

/// Each task's rollouts see the skill prompt retrieved for it from `library`.
pub fn run_conditioned(
    svc: Services<'_>,
    config: &PipelineConfig,
    tasks: &[Task],
    policy: &dyn Policy,
    env: &dyn Environment,
    library: &SkillLibrary,
    settings: RolloutSettings,
) -> Result<(Metrics, Vec<(Task, Vec<Trajectory>)>), PipelineError> {
    let index = if library.is_empty() { None } else { Some(svc.index(library, config)?) };
    let runs = run(tasks, policy, env, settings, &|t| svc.guidance(index.as_ref(), t, config))?;
    Ok((metrics(&runs), runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_env::{AgentMode, ScriptedAgent, ToyWorld};
    use std::sync::Arc;

    #[test]
    fn deterministic_policy_collapses_avg_and_pass() {
        let w = ToyWorld::bundled();
        let agent = ScriptedAgent::new(Arc::clone(&w.fixture), AgentMode::Naive);
        let (m, runs) = run_baseline(&w.fixture.seed_tasks(), &agent, &w, RolloutSettings { m: 4, temperature: 0.9, step_cap: 40 }).unwrap();
        assert_eq!(m.avg_at_m, 1.0);
        assert_eq!(m.avg_at_m, m.pass_at_m);
        assert_eq!(runs.len(), 6);
        // naive step counts 6, 4, 5, 5, 5, 5
        assert!((m.mean_steps - 30.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_of_mixed_runs() {
        let t = |ok: bool, n: usize| Trajectory {
            task_id: "x".into(),
            rollout_index: 1,
            steps: (0..n)
                .map(|i| crate::task::TrajectoryStep {
                    t: i as u32 + 1,
                    thought: String::new(),
                    action: crate::task::Action::Code { code: String::new() },
                    observation: String::new(),
                    outcome: crate::task::ToolOutcome::None,
                })
                .collect(),
            success: ok,
        };
        let runs = vec![(Task::train("a", "a"), vec![t(true, 2), t(false, 4)]), (Task::train("b", "b"), vec![t(false, 3), t(false, 3)])];
        let m = metrics(&runs);
        assert_eq!(m.avg_at_m, 0.25);
        assert_eq!(m.pass_at_m, 0.5);
        assert_eq!(m.mean_steps, 3.0);
    }
}
