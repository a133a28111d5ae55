//! Environment and policy contracts used by rollouts.
//!
//! An [`Environment`] hands out one independent [`Session`] per rollout; a
//! [`Policy`] hands out one [`Episode`], a step function from the last
//! observation to the next decision.

use thiserror::Error;

use crate::schema::ToolSchemaSet;
use crate::task::{Action, Task, ToolOutcome};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("environment failure: {0}")]
    Backend(String),
}

/// One rollout's private world.
pub trait Session: Send {
    /// Execute an action; returns the observation text and the tool outcome.
    fn step(&mut self, action: &Action) -> Result<(String, ToolOutcome), EnvError>;
    /// The task's success predicate over the current state.
    fn evaluate(&self) -> Result<bool, EnvError>;
}

pub trait Environment: Send + Sync {
    fn schemas(&self) -> &ToolSchemaSet;
    /// Register a task created after construction (synthesized tasks).
    fn prepare_task(&self, _task: &Task) -> Result<(), EnvError> {
        Ok(())
    }
    fn start(&self, task: &Task) -> Result<Box<dyn Session>, EnvError>;
}

/// Context injected into the policy: the assembled skill prompt section and
/// optional exploration targets. Empty guidance means no conditioning.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Guidance {
    pub skill_prompt: String,
    pub exploration_targets: Vec<String>,
}

impl Guidance {
    pub fn is_empty(&self) -> bool {
        self.skill_prompt.trim().is_empty() && self.exploration_targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Act { thought: String, action: Action },
    Finish { thought: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub observation: String,
    pub outcome: ToolOutcome,
}

pub trait Episode {
    fn next(&mut self, last: Option<&Observed>) -> Decision;
}

pub trait Policy: Send + Sync {
    fn begin<'a>(&'a self, task: &Task, guidance: &Guidance, temperature: f64, rollout: u32) -> Box<dyn Episode + 'a>;
}
