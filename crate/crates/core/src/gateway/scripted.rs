//! Deterministic offline stand-in for the chat model.
//!
//! It reads the `## ...` sections of the bundled prompt templates and
//! answers each template kind with a plausible, fully deterministic reply:
//! plans built from the successful tool calls of a trajectory, call-pattern
//! skills with abstract parameters, same-name merges, permissive filter
//! verdicts, and so on. It is what the `scripted` mock fallback runs, and
//! what the bundled fixture pipeline is tested against.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use super::{ChatRequest, GatewayError};
use crate::extraction::SkillDraft;
use crate::skill::{parse_plan_steps, PlanStep};
use crate::task::{Action, ToolOutcome, TrajectoryStep};
use crate::templates::{sections, PromptKind};

/// Tool whose success unlocks the session-gated tools of an environment.
pub const LOGIN_TOOL: &str = "login";

/// Suffix the rewrite answer appends to every goal. It keeps the draft plan
/// textually distinct from the reference plans it was derived from.
pub const REWRITE_SUFFIX: &str = " for this request";

#[derive(Debug, Clone, Default)]
pub struct ScriptedResponder;

fn malformed(msg: impl Into<String>) -> GatewayError {
    GatewayError::MalformedResponse(msg.into())
}

impl ScriptedResponder {
    pub fn respond(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let user = request.last_user().ok_or_else(|| malformed("no user message"))?;
        let Some(kind) = request.tag.as_deref().and_then(PromptKind::from_id) else {
            return Ok(user.to_string());
        };
        let secs = sections(user);
        let sec = |name: &str| secs.get(name).map(String::as_str).unwrap_or("");
        Ok(match kind {
            PromptKind::ToolSummary => summary(sec("Environment feedback")),
            PromptKind::PlanExtract => plan(&parse_steps(sec("Trajectory"))),
            PromptKind::FunctionalExtract => functional(
                &parse_steps(sec("Trajectory")),
                &library_names(sec("skills library")),
                sec("Specific-step"),
            ),
            PromptKind::AtomicExtract => atomic(
                &parse_steps(sec("Trajectory")),
                &library_names(sec("skills library")),
                sec("Specific-Tool").trim(),
            ),
            PromptKind::Merge => merge(sec("Skills"))?,
            PromptKind::GeneralFilter => {
                if sec("Skill").contains("import ") { "bad".into() } else { "good".into() }
            }
            PromptKind::ToolSchemaFilter => "The invocation matches the specification.\n<answer>correct</answer>".into(),
            PromptKind::Rewrite => rewrite(sec("Task"), sec("Reference plans")),
            PromptKind::SelfFilter => self_filter(sec("Candidate skills")),
            PromptKind::TaskSynthesis => synthesize(&parse_steps(sec("Exploration trajectory"))),
        })
    }
}

fn parse_steps(text: &str) -> Vec<TrajectoryStep> {
    text.lines().filter_map(|l| serde_json::from_str(l.trim()).ok()).collect()
}

fn library_names(text: &str) -> BTreeSet<String> {
    text.lines()
        .filter_map(|l| serde_json::from_str::<Value>(l.trim()).ok())
        .filter_map(|v| v.get("name").and_then(Value::as_str).map(str::to_string))
        .collect()
}

fn humanize(tool: &str) -> String {
    tool.replace(['_', '.', '-'], " ")
}

fn summary(observation: &str) -> String {
    let words: Vec<&str> = observation.split_whitespace().take(50).collect();
    format!("<feedback>{}</feedback>", words.join(" "))
}

/// Successful tool calls, with consecutive repeats of a tool collapsed and a
/// preceding login folded into the following step.
fn plan_segments(steps: &[TrajectoryStep]) -> Vec<PlanStep> {
    let mut out: Vec<PlanStep> = Vec::new();
    let mut pending_login = false;
    for s in steps.iter().filter(|s| s.outcome == ToolOutcome::Success) {
        let Some(tool) = s.action.tool_name() else { continue };
        if tool == LOGIN_TOOL {
            pending_login = true;
            continue;
        }
        if !pending_login && out.last().is_some_and(|p| p.key_tools.last().map(String::as_str) == Some(tool)) {
            continue;
        }
        let mut key_tools = Vec::new();
        if pending_login {
            key_tools.push(LOGIN_TOOL.to_string());
        }
        key_tools.push(tool.to_string());
        out.push(PlanStep { ordinal: out.len() as u32 + 1, goal_text: humanize(tool), key_tools });
        pending_login = false;
    }
    if out.is_empty() && pending_login {
        out.push(PlanStep { ordinal: 1, goal_text: "log in".into(), key_tools: vec![LOGIN_TOOL.into()] });
    }
    out
}

fn plan(steps: &[TrajectoryStep]) -> String {
    let lines: Vec<String> = plan_segments(steps).iter().map(PlanStep::render).collect();
    format!("<plan>\n{}\n</plan>", lines.join("\n"))
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::Bool(_) => "boolean",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
        Value::Null => "any",
    }
}

/// Argument names and literal types of the successful calls to `tool`.
fn observed_args(steps: &[TrajectoryStep], tool: &str) -> BTreeMap<String, &'static str> {
    let mut out = BTreeMap::new();
    for s in steps.iter().filter(|s| s.outcome == ToolOutcome::Success) {
        if let Action::Tool { tool: t, args } = &s.action {
            if t == tool {
                for (k, v) in args {
                    out.entry(k.clone()).or_insert(type_name(v));
                }
            }
        }
    }
    out
}

fn call_pattern(tool: &str, args: &BTreeMap<String, &'static str>) -> String {
    let inner = args.keys().map(|k| format!("{k}={k}")).collect::<Vec<_>>().join(", ");
    format!("{tool}({inner})")
}

fn success_count(steps: &[TrajectoryStep], tool: &str) -> usize {
    steps.iter().filter(|s| s.outcome == ToolOutcome::Success && s.action.tool_name() == Some(tool)).count()
}

fn failure_notes(steps: &[TrajectoryStep], tool: &str) -> Vec<String> {
    let mut notes = BTreeSet::new();
    for s in steps.iter().filter(|s| s.outcome == ToolOutcome::Failure && s.action.tool_name() == Some(tool)) {
        let reason = serde_json::from_str::<Value>(&s.observation)
            .ok()
            .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| "call failed".into());
        notes.insert(reason);
    }
    notes.into_iter().collect()
}

fn needs_login(steps: &[TrajectoryStep], tool: &str) -> bool {
    let mut logged_in = false;
    for s in steps {
        match s.action.tool_name() {
            Some(LOGIN_TOOL) if s.outcome == ToolOutcome::Success => logged_in = true,
            Some(t) if t == tool
                && s.outcome == ToolOutcome::Success => {
                    return logged_in;
                }
            _ => {}
        }
    }
    false
}

fn params_line(args: &BTreeMap<String, &'static str>) -> String {
    if args.is_empty() {
        "none".into()
    } else {
        args.iter().map(|(k, t)| format!("{k} ({t})")).collect::<Vec<_>>().join(", ")
    }
}

fn updates_json(option: &str, draft: Option<&SkillDraft>, keep: Option<&str>) -> String {
    let v = match (draft, keep) {
        (_, Some(name)) => json!([{ "option": "keep", "skill_name": name }]),
        (Some(d), None) => json!([{ "option": option, "skill": d }]),
        (None, None) => json!([]),
    };
    format!("```json\n{}\n```", serde_json::to_string_pretty(&v).expect("json"))
}

fn functional(steps: &[TrajectoryStep], library: &BTreeSet<String>, step_text: &str) -> String {
    let Some(step) = parse_plan_steps(step_text).into_iter().next() else {
        return updates_json("add", None, None);
    };
    let main: Vec<&String> = step.key_tools.iter().filter(|t| *t != LOGIN_TOOL).collect();
    let with_login = step.key_tools.iter().any(|t| t == LOGIN_TOOL) && !main.is_empty();
    let name = if with_login { format!("{} after login", step.goal_text) } else { step.goal_text.clone() };
    if library.contains(&name) {
        return updates_json("keep", None, Some(&name));
    }
    let mut lines = Vec::new();
    let mut params = BTreeMap::new();
    for tool in &step.key_tools {
        let args = observed_args(steps, tool);
        lines.push(call_pattern(tool, &args));
        if tool != LOGIN_TOOL && args.contains_key("page") && success_count(steps, tool) > 1 {
            lines.push("# repeat with page + 1 while has_more is true".into());
        }
        params.extend(args);
    }
    let mut document = format!("{}.\nParameters: {}.\nOutput: the observation of the last call.", capitalize(&step.goal_text), params_line(&params));
    if with_login {
        document.push_str("\nNotes: log in before the first call.");
    }
    let draft = SkillDraft { name, document, content: lines.join("\n"), tools: step.key_tools.clone() };
    updates_json("add", Some(&draft), None)
}

fn atomic(steps: &[TrajectoryStep], library: &BTreeSet<String>, tool: &str) -> String {
    if tool.is_empty() || !steps.iter().any(|s| s.action.tool_name() == Some(tool)) {
        return updates_json("add", None, None);
    }
    if library.contains(tool) {
        return updates_json("keep", None, Some(tool));
    }
    let args = observed_args(steps, tool);
    let failures = failure_notes(steps, tool);
    let login = tool != LOGIN_TOOL && (needs_login(steps, tool) || failures.iter().any(|f| f == "auth_required"));
    let mut content = Vec::new();
    let mut tools = vec![tool.to_string()];
    if login {
        content.push(format!("{LOGIN_TOOL}(username=username, password=password)"));
        tools.push(LOGIN_TOOL.to_string());
    }
    content.push(call_pattern(tool, &args));
    let mut document = format!("{}.\nParameters: {}.\nOutput: JSON object with an ok flag.", capitalize(&humanize(tool)), params_line(&args));
    if login {
        document.push_str("\nNotes: requires login first.");
    }
    for f in &failures {
        document.push_str(&format!("\nObserved failure: {f}."));
    }
    let draft = SkillDraft { name: tool.to_string(), document, content: content.join("\n"), tools };
    updates_json("add", Some(&draft), None)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn merge(skills: &str) -> Result<String, GatewayError> {
    let list: Vec<Value> = serde_json::from_str(skills.trim()).map_err(|e| malformed(format!("merge input: {e}")))?;
    let drafts: Vec<SkillDraft> = list.iter().filter_map(|v| SkillDraft::from_value(v).ok()).collect();
    // One output per distinct name: the first draft of that name, carrying
    // the union of tools of every draft sharing it.
    let mut merged: Vec<SkillDraft> = Vec::new();
    for d in drafts {
        match merged.iter_mut().find(|m| m.name == d.name) {
            Some(m) => {
                for t in d.tools {
                    if !m.tools.contains(&t) {
                        m.tools.push(t);
                    }
                }
            }
            None => merged.push(d),
        }
    }
    Ok(format!("<skill>{}</skill>", serde_json::to_string_pretty(&merged).expect("json")))
}

fn rewrite(task: &str, plans: &str) -> String {
    let mut steps: Vec<PlanStep> = Vec::new();
    for s in parse_plan_steps(plans) {
        if !steps.iter().any(|p| p.goal_text == s.goal_text) {
            steps.push(s);
        }
    }
    if steps.is_empty() {
        let goal = task.lines().next().unwrap_or("").trim().trim_end_matches('.').to_string();
        steps.push(PlanStep { ordinal: 1, goal_text: goal, key_tools: Vec::new() });
    }
    let lines: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            PlanStep { ordinal: i as u32 + 1, goal_text: format!("{}{REWRITE_SUFFIX}", s.goal_text), key_tools: s.key_tools.clone() }
                .render()
        })
        .collect();
    format!("<plan>\n{}\n</plan>", lines.join("\n"))
}

fn self_filter(candidates: &str) -> String {
    let names: Vec<String> = candidates
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- name: ").map(|n| n.trim().to_string()))
        .collect();
    serde_json::to_string(&names).expect("json")
}

fn synthesize(steps: &[TrajectoryStep]) -> String {
    let mut tools: Vec<String> = Vec::new();
    for s in steps.iter().filter(|s| s.outcome == ToolOutcome::Success) {
        if let Some(t) = s.action.tool_name() {
            if t != LOGIN_TOOL && !tools.iter().any(|x| x == t) {
                tools.push(t.to_string());
            }
        }
    }
    if tools.is_empty() {
        return "No tool was exercised successfully.".into();
    }
    format!("<task>Use {} with the usual arguments and report the result.</task>", tools.join(" and then "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::TemplateSet;
    use serde_json::Map;

    fn step(t: u32, tool: &str, args: Value, outcome: ToolOutcome, obs: &str) -> TrajectoryStep {
        let args: Map<String, Value> = args.as_object().cloned().unwrap_or_default();
        TrajectoryStep { t, thought: String::new(), action: Action::tool(tool, args), observation: obs.into(), outcome }
    }

    fn trajectory() -> Vec<TrajectoryStep> {
        vec![
            step(1, "list_playlists", json!({"page": 1}), ToolOutcome::Failure, r#"{"ok":false,"error":"auth_required"}"#),
            step(2, "login", json!({"username": "me", "password": "pw"}), ToolOutcome::Success, r#"{"ok":true}"#),
            step(3, "list_playlists", json!({"page": 1}), ToolOutcome::Success, r#"{"ok":true}"#),
            step(4, "list_playlists", json!({"page": 2}), ToolOutcome::Success, r#"{"ok":true}"#),
            step(5, "search_songs", json!({"query": "x"}), ToolOutcome::Success, r#"{"ok":true}"#),
        ]
    }

    #[test]
    fn plan_folds_login_and_repeats() {
        let p = plan(&trajectory());
        assert_eq!(
            p,
            "<plan>\n# step 1: list playlists; apis: login, list_playlists\n# step 2: search songs; apis: search_songs\n</plan>"
        );
    }

    #[test]
    fn functional_reply_is_parameterized() {
        let reply = functional(&trajectory(), &BTreeSet::new(), "# step 1: list playlists; apis: login, list_playlists");
        let v: Value = serde_json::from_str(reply.trim_start_matches("```json").trim_end_matches("```").trim()).unwrap();
        let skill = &v[0]["skill"];
        assert_eq!(skill["name"], "list playlists after login");
        assert_eq!(
            skill["content"],
            "login(password=password, username=username)\nlist_playlists(page=page)\n# repeat with page + 1 while has_more is true"
        );
        let kept = functional(&trajectory(), &["list playlists after login".to_string()].into(), "# step 1: list playlists; apis: login, list_playlists");
        assert!(kept.contains("\"keep\""));
    }

    #[test]
    fn atomic_reply_notes_login() {
        let reply = atomic(&trajectory(), &BTreeSet::new(), "list_playlists");
        assert!(reply.contains("requires login first"));
        assert!(reply.contains("auth_required"));
        assert_eq!(atomic(&trajectory(), &BTreeSet::new(), "send_email"), updates_json("add", None, None));
    }

    #[test]
    fn untagged_request_echoes() {
        let r = ChatRequest::new(vec![crate::gateway::ChatMessage::user("hi")]);
        assert_eq!(ScriptedResponder.respond(&r).unwrap(), "hi");
    }

    #[test]
    fn rewrite_suffixes_goals() {
        let set = TemplateSet::builtin();
        let req = set
            .request(PromptKind::Rewrite, &[("task", "Do it.".into()), ("plans", "# step 1: list playlists; apis: list_playlists".into())], 0.0, 256)
            .unwrap();
        let reply = ScriptedResponder.respond(&req).unwrap();
        assert_eq!(reply, format!("<plan>\n# step 1: list playlists{REWRITE_SUFFIX}; apis: list_playlists\n</plan>"));
        let bare = set.request(PromptKind::Rewrite, &[("task", "Do it.".into()), ("plans", String::new())], 0.0, 256).unwrap();
        assert_eq!(ScriptedResponder.respond(&bare).unwrap(), format!("<plan>\n# step 1: Do it{REWRITE_SUFFIX}\n</plan>"));
    }

    #[test]
    fn merge_collapses_same_names_only() {
        let d = |name: &str, tool: &str| serde_json::json!({"name": name, "document": "d", "content": format!("{tool}()"), "tools": [tool]});
        let input = serde_json::to_string(&vec![d("a", "x"), d("b", "y"), d("a", "z")]).unwrap();
        let out = merge(&input).unwrap();
        let body: Vec<Value> = serde_json::from_str(out.trim_start_matches("<skill>").trim_end_matches("</skill>")).unwrap();
        assert_eq!(body.len(), 2);
        assert_eq!(body[0]["tools"], serde_json::json!(["x", "z"]));
        assert_eq!(body[1]["name"], "b");
    }
}
