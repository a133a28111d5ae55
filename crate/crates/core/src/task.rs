//! Tasks, actions and trajectories.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Synthesized,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub text: String,
    pub split: Split,
    /// For synthesized tasks: id of the exploratory trajectory it came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_trajectory: Option<String>,
}

impl Task {
    pub fn train(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), split: Split::Train, source_trajectory: None }
    }
}

/// An agent action: a named tool call with keyword arguments, or raw code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Tool { tool: String, args: Map<String, Value> },
    Code { code: String },
}

impl Action {
    pub fn tool(name: impl Into<String>, args: Map<String, Value>) -> Self {
        Action::Tool { tool: name.into(), args }
    }

    pub fn tool_name(&self) -> Option<&str> {
        match self {
            Action::Tool { tool, .. } => Some(tool),
            Action::Code { .. } => None,
        }
    }

    /// `tool(key=value, ...)` with JSON-literal values, keys in sorted order.
    pub fn render_call(&self) -> String {
        match self {
            Action::Tool { tool, args } => {
                let inner = args.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
                format!("{tool}({inner})")
            }
            Action::Code { code } => code.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolOutcome {
    Success,
    Failure,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: u32,
    pub thought: String,
    pub action: Action,
    pub observation: String,
    pub outcome: ToolOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub rollout_index: u32,
    pub steps: Vec<TrajectoryStep>,
    /// Set from the environment's evaluator only.
    pub success: bool,
}

impl Trajectory {
    /// Stable identifier `task_id#rollout`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.task_id, self.rollout_index)
    }

    /// Distinct tool names in order of first use.
    pub fn tools_used(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.steps
            .iter()
            .filter_map(|s| s.action.tool_name())
            .filter(|t| seen.insert(t.to_string()))
            .map(str::to_string)
            .collect()
    }

    /// Distinct tools with at least one successful call, in order of first success.
    pub fn tools_succeeded(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.steps
            .iter()
            .filter(|s| s.outcome == ToolOutcome::Success)
            .filter_map(|s| s.action.tool_name())
            .filter(|t| seen.insert(t.to_string()))
            .map(str::to_string)
            .collect()
    }

    pub fn invokes(&self, tool: &str) -> bool {
        self.steps.iter().any(|s| s.action.tool_name() == Some(tool))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn action_serializes_to_log_shape() {
        let mut args = Map::new();
        args.insert("page".into(), json!(1));
        let a = Action::tool("list_playlists", args);
        assert_eq!(serde_json::to_value(&a).unwrap(), json!({"tool": "list_playlists", "args": {"page": 1}}));
        assert_eq!(a.render_call(), "list_playlists(page=1)");
        let c: Action = serde_json::from_value(json!({"code": "print(1)"})).unwrap();
        assert_eq!(c, Action::Code { code: "print(1)".into() });
    }
}
