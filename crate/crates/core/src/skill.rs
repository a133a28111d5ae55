//! Skill and library types with the add / modify / keep update algebra.
//!
//! A [`SkillLibrary`] is an immutable value. [`apply_update`] returns a new
//! library; there is no delete operation, so names only ever accumulate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three tiers of the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillLevel {
    Planning,
    Functional,
    Atomic,
}

impl SkillLevel {
    pub const ALL: [SkillLevel; 3] = [SkillLevel::Planning, SkillLevel::Functional, SkillLevel::Atomic];

    pub fn as_str(self) -> &'static str {
        match self {
            SkillLevel::Planning => "planning",
            SkillLevel::Functional => "functional",
            SkillLevel::Atomic => "atomic",
        }
    }
}

impl fmt::Display for SkillLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Extracted,
    Merged,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_task_id: String,
    pub iteration: u32,
    pub origin: Origin,
}

impl Provenance {
    pub fn extracted(task_id: impl Into<String>, iteration: u32) -> Self {
        Self { source_task_id: task_id.into(), iteration, origin: Origin::Extracted }
    }
}

/// One unit of reusable agent competence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub name: String,
    /// Functionality, key parameters with types, output and notes.
    pub document: String,
    /// Implementation or invocation pattern; for planning skills the ordered
    /// `# step N:` list.
    pub content: String,
    pub tools: Vec<String>,
    pub level: SkillLevel,
    pub provenance: Provenance,
    /// Retrieval key of planning skills: the task they were distilled from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_task_text: Option<String>,
}

impl Skill {
    /// Parsed `# step N:` lines of a planning skill's content.
    pub fn plan_steps(&self) -> Vec<PlanStep> {
        parse_plan_steps(&self.content)
    }
}

/// One line of a plan: `# step 1: goal text; apis: tool_a, tool_b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub ordinal: u32,
    pub goal_text: String,
    pub key_tools: Vec<String>,
}

impl PlanStep {
    pub fn render(&self) -> String {
        if self.key_tools.is_empty() {
            format!("# step {}: {}", self.ordinal, self.goal_text)
        } else {
            format!("# step {}: {}; apis: {}", self.ordinal, self.goal_text, self.key_tools.join(", "))
        }
    }
}

/// Render an ordered step list, one `# step` line each.
pub fn render_plan(steps: &[PlanStep]) -> String {
    steps.iter().map(PlanStep::render).collect::<Vec<_>>().join("\n")
}

/// Parse `# step N: ...` lines. Lines that are not step headers are ignored;
/// ordinals are renumbered from 1 in order of appearance.
pub fn parse_plan_steps(text: &str) -> Vec<PlanStep> {
    let mut steps = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix('#') else { continue };
        let rest = rest.trim_start();
        let lower = rest.to_ascii_lowercase();
        if !lower.starts_with("step") {
            continue;
        }
        let Some(colon) = rest.find(':') else { continue };
        let body = rest[colon + 1..].trim();
        if body.is_empty() {
            continue;
        }
        let (goal, tools) = split_key_tools(body);
        if goal.is_empty() {
            continue;
        }
        steps.push(PlanStep { ordinal: steps.len() as u32 + 1, goal_text: goal, key_tools: tools });
    }
    steps
}

fn split_key_tools(body: &str) -> (String, Vec<String>) {
    // The tail after the last ';' names the key APIs, optionally prefixed by
    // "apis:" / "key apis:" / "tools:".
    let Some(idx) = body.rfind(';') else {
        return (body.trim().to_string(), Vec::new());
    };
    let goal = body[..idx].trim().to_string();
    let mut tail = body[idx + 1..].trim();
    for prefix in ["key apis used:", "key apis:", "apis:", "api:", "tools:"] {
        if tail.to_ascii_lowercase().starts_with(prefix) {
            tail = tail[prefix.len()..].trim();
            break;
        }
    }
    let tools = tail
        .split(',')
        .map(|t| t.trim().trim_matches('`').to_string())
        .filter(|t| !t.is_empty())
        .collect();
    (goal, tools)
}

/// A structural violation reported by [`validate_skill`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NameEmpty,
    DocumentEmpty,
    ContentEmpty,
    AtomicNameNotSingleTool,
    AtomicToolMissing,
    PlanWithoutSteps,
    PlanWithoutSourceTask,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::NameEmpty => "name empty",
            Violation::DocumentEmpty => "document empty",
            Violation::ContentEmpty => "content empty",
            Violation::AtomicNameNotSingleTool => "atomic name is not a single tool",
            Violation::AtomicToolMissing => "atomic tool not listed in tools",
            Violation::PlanWithoutSteps => "planning content has no steps",
            Violation::PlanWithoutSourceTask => "planning skill has no source task text",
        };
        f.write_str(s)
    }
}

/// Every structural violation of `skill`; empty means valid.
pub fn validate_skill(skill: &Skill) -> Vec<Violation> {
    let mut out = Vec::new();
    if skill.name.trim().is_empty() {
        out.push(Violation::NameEmpty);
    }
    if skill.document.trim().is_empty() {
        out.push(Violation::DocumentEmpty);
    }
    if skill.content.trim().is_empty() {
        out.push(Violation::ContentEmpty);
    }
    match skill.level {
        SkillLevel::Atomic => {
            if !skill.name.trim().is_empty() {
                if !is_tool_identifier(&skill.name) {
                    out.push(Violation::AtomicNameNotSingleTool);
                } else if !skill.tools.iter().any(|t| t == &skill.name) {
                    out.push(Violation::AtomicToolMissing);
                }
            }
        }
        SkillLevel::Planning => {
            if !skill.content.trim().is_empty() && skill.plan_steps().is_empty() {
                out.push(Violation::PlanWithoutSteps);
            }
            if skill.source_task_text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                out.push(Violation::PlanWithoutSourceTask);
            }
        }
        SkillLevel::Functional => {}
    }
    out
}

/// A bare tool identifier: letters, digits, `_`, `.` and `-`, nothing else.
pub fn is_tool_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "option", rename_all = "lowercase")]
pub enum SkillUpdate {
    Add { skill: Skill },
    Modify { modified_from: String, skill: Skill },
    Keep { kept_name: String },
}

impl SkillUpdate {
    pub fn kind(&self) -> UpdateKind {
        match self {
            SkillUpdate::Add { .. } => UpdateKind::Add,
            SkillUpdate::Modify { .. } => UpdateKind::Modify,
            SkillUpdate::Keep { .. } => UpdateKind::Keep,
        }
    }

    pub fn skill(&self) -> Option<&Skill> {
        match self {
            SkillUpdate::Add { skill } | SkillUpdate::Modify { skill, .. } => Some(skill),
            SkillUpdate::Keep { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Add,
    Modify,
    Keep,
}

/// Summary of one applied update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u32,
    pub option: UpdateKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_from: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillLibrary {
    pub version: u64,
    pub iteration: u32,
    pub skills: BTreeMap<String, Skill>,
    pub update_log: Vec<LogEntry>,
}

impl SkillLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Skill> {
        self.skills.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.skills.contains_key(name)
    }

    pub fn skills_at(&self, level: SkillLevel) -> impl Iterator<Item = &Skill> {
        self.skills.values().filter(move |s| s.level == level)
    }

    pub fn count_at(&self, level: SkillLevel) -> usize {
        self.skills_at(level).count()
    }

    /// Distinct tool names referenced by any skill.
    pub fn tools_covered(&self) -> BTreeSet<String> {
        self.skills.values().flat_map(|s| s.tools.iter().cloned()).collect()
    }

    /// Same library with the iteration counter advanced.
    pub fn with_iteration(&self, iteration: u32) -> Self {
        let mut next = self.clone();
        next.iteration = iteration;
        next
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UpdateError {
    #[error("skill name already present: {0}")]
    DuplicateName(String),
    #[error("modify target not found: {0}")]
    UnknownTarget(String),
    #[error("modify renames onto existing skill: {0}")]
    NameCollision(String),
    #[error("skill {name} failed validation: {violations}")]
    InvalidSkill { name: String, violations: String },
}

fn check_valid(skill: &Skill) -> Result<(), UpdateError> {
    let v = validate_skill(skill);
    if v.is_empty() {
        Ok(())
    } else {
        Err(UpdateError::InvalidSkill {
            name: skill.name.clone(),
            violations: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        })
    }
}

/// Apply one update, producing the next library value.
///
/// `keep` returns an identical library and logs nothing; `add` and `modify`
/// bump `version` and append to the update log.
pub fn apply_update(library: &SkillLibrary, update: &SkillUpdate) -> Result<SkillLibrary, UpdateError> {
    match update {
        SkillUpdate::Keep { .. } => Ok(library.clone()),
        SkillUpdate::Add { skill } => {
            check_valid(skill)?;
            if library.contains(&skill.name) {
                return Err(UpdateError::DuplicateName(skill.name.clone()));
            }
            let mut next = library.clone();
            next.skills.insert(skill.name.clone(), skill.clone());
            next.version += 1;
            next.update_log.push(LogEntry {
                iteration: library.iteration,
                option: UpdateKind::Add,
                name: skill.name.clone(),
                modified_from: None,
            });
            Ok(next)
        }
        SkillUpdate::Modify { modified_from, skill } => {
            check_valid(skill)?;
            if !library.contains(modified_from) {
                return Err(UpdateError::UnknownTarget(modified_from.clone()));
            }
            if &skill.name != modified_from && library.contains(&skill.name) {
                return Err(UpdateError::NameCollision(skill.name.clone()));
            }
            let mut next = library.clone();
            next.skills.remove(modified_from);
            next.skills.insert(skill.name.clone(), skill.clone());
            next.version += 1;
            next.update_log.push(LogEntry {
                iteration: library.iteration,
                option: UpdateKind::Modify,
                name: skill.name.clone(),
                modified_from: Some(modified_from.clone()),
            });
            Ok(next)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LibraryDiff {
    pub added: BTreeSet<String>,
    pub modified: BTreeSet<String>,
    pub removed: BTreeSet<String>,
}

impl LibraryDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.modified.is_empty() && self.removed.is_empty()
    }
}

/// Name-keyed diff from `a` to `b`. "Modified" means same name with a
/// different document, content or tool list.
pub fn library_diff(a: &SkillLibrary, b: &SkillLibrary) -> LibraryDiff {
    let mut diff = LibraryDiff::default();
    for (name, sb) in &b.skills {
        match a.skills.get(name) {
            None => {
                diff.added.insert(name.clone());
            }
            Some(sa) => {
                if sa.document != sb.document || sa.content != sb.content || sa.tools != sb.tools {
                    diff.modified.insert(name.clone());
                }
            }
        }
    }
    for name in a.skills.keys() {
        if !b.skills.contains_key(name) {
            diff.removed.insert(name.clone());
        }
    }
    diff
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn functional(name: &str) -> Skill {
        Skill {
            name: name.to_string(),
            document: "Fetch every playlist. Parameters: page: int; Outputs: list[dict]".into(),
            content: "login(username=username, password=password)\nlist_playlists(page=page)".into(),
            tools: vec!["login".into(), "list_playlists".into()],
            level: SkillLevel::Functional,
            provenance: Provenance::extracted("t1", 0),
            source_task_text: None,
        }
    }

    fn atomic(name: &str, tools: &[&str]) -> Skill {
        Skill {
            name: name.into(),
            document: "Send an email. Parameters: to: str".into(),
            content: "send_email(to=to, subject=subject, body=body)".into(),
            tools: tools.iter().map(|t| t.to_string()).collect(),
            level: SkillLevel::Atomic,
            provenance: Provenance::extracted("t1", 0),
            source_task_text: None,
        }
    }

    #[test]
    fn well_formed_functional_is_ok() {
        assert!(validate_skill(&functional("spotify get songs by genre")).is_empty());
    }

    #[test]
    fn empty_document_is_reported() {
        let mut s = functional("x");
        s.document = "  ".into();
        assert_eq!(validate_skill(&s), vec![Violation::DocumentEmpty]);
        assert_eq!(Violation::DocumentEmpty.to_string(), "document empty");
    }

    #[test]
    fn atomic_with_two_tools_in_name_is_rejected() {
        let s = atomic("send_email, read_file", &["send_email", "read_file"]);
        assert_eq!(validate_skill(&s), vec![Violation::AtomicNameNotSingleTool]);
        assert!(validate_skill(&atomic("send_email", &["send_email"])).is_empty());
        assert_eq!(validate_skill(&atomic("send_email", &["read_file"])), vec![Violation::AtomicToolMissing]);
    }

    #[test]
    fn planning_needs_steps_and_source() {
        let mut s = functional("plan:t1");
        s.level = SkillLevel::Planning;
        s.content = "just prose".into();
        let v = validate_skill(&s);
        assert!(v.contains(&Violation::PlanWithoutSteps));
        assert!(v.contains(&Violation::PlanWithoutSourceTask));
        s.content = "# step 1: sign in; apis: login".into();
        s.source_task_text = Some("do it".into());
        assert!(validate_skill(&s).is_empty());
    }

    #[test]
    fn plan_step_parsing() {
        let steps = parse_plan_steps(
            "<plan>\n# step 1: find playlist; apis: list_playlists\n# Step 2: add the song; key APIs used: add_song_to_playlist, login\n# step 3: done\n",
        );
        assert_eq!(steps.len(), 3);
        assert_eq!(steps[0].goal_text, "find playlist");
        assert_eq!(steps[0].key_tools, vec!["list_playlists"]);
        assert_eq!(steps[1].key_tools, vec!["add_song_to_playlist", "login"]);
        assert!(steps[2].key_tools.is_empty());
        assert_eq!(steps.iter().map(|s| s.ordinal).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(parse_plan_steps(&render_plan(&steps)), steps);
    }

    #[test]
    fn keep_is_identity() {
        let lib = apply_update(&SkillLibrary::new(), &SkillUpdate::Add { skill: functional("a") }).unwrap();
        let after = apply_update(&lib, &SkillUpdate::Keep { kept_name: "a".into() }).unwrap();
        assert_eq!(lib, after);
    }

    #[test]
    fn add_then_duplicate() {
        let lib = apply_update(&SkillLibrary::new(), &SkillUpdate::Add { skill: functional("spotify_get_all_playlists") })
            .unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.update_log.len(), 1);
        let err = apply_update(&lib, &SkillUpdate::Add { skill: functional("spotify_get_all_playlists") }).unwrap_err();
        assert!(matches!(err, UpdateError::DuplicateName(_)));
    }

    #[test]
    fn modify_contracts() {
        let mut lib = SkillLibrary::new();
        for n in ["a", "b"] {
            lib = apply_update(&lib, &SkillUpdate::Add { skill: functional(n) }).unwrap();
        }
        let err = apply_update(&lib, &SkillUpdate::Modify { modified_from: "zzz".into(), skill: functional("c") });
        assert!(matches!(err, Err(UpdateError::UnknownTarget(_))));
        let err = apply_update(&lib, &SkillUpdate::Modify { modified_from: "a".into(), skill: functional("b") });
        assert!(matches!(err, Err(UpdateError::NameCollision(_))));
        let renamed = apply_update(&lib, &SkillUpdate::Modify { modified_from: "a".into(), skill: functional("c") }).unwrap();
        assert!(renamed.contains("c") && !renamed.contains("a"));
        assert_eq!(renamed.len(), 2);
    }

    #[test]
    fn diff_cases() {
        let lib = apply_update(&SkillLibrary::new(), &SkillUpdate::Add { skill: functional("a") }).unwrap();
        assert!(library_diff(&lib, &lib).is_empty());
        let plus = apply_update(&lib, &SkillUpdate::Add { skill: functional("x") }).unwrap();
        let d = library_diff(&lib, &plus);
        assert_eq!(d.added.iter().collect::<Vec<_>>(), vec!["x"]);
        assert!(d.modified.is_empty() && d.removed.is_empty());
        let mut edited = functional("a");
        edited.document.push_str(" Notes: paginated.");
        let mod_lib = apply_update(&lib, &SkillUpdate::Modify { modified_from: "a".into(), skill: edited }).unwrap();
        let d = library_diff(&lib, &mod_lib);
        assert_eq!(d.modified.iter().collect::<Vec<_>>(), vec!["a"]);
        assert!(d.added.is_empty() && d.removed.is_empty());
    }
}
