//! Prompt templates with `{placeholder}` substitution.
//!
//! Each template file holds a system part and a user part separated by a
//! line reading `=== user ===`. Placeholders are lowercase identifiers in
//! braces; any other brace text (JSON examples) is left alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRequest};

const USER_SEPARATOR: &str = "\n=== user ===\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    PlanExtract,
    FunctionalExtract,
    AtomicExtract,
    Merge,
    GeneralFilter,
    ToolSchemaFilter,
    ToolSummary,
    Rewrite,
    SelfFilter,
    TaskSynthesis,
}

impl PromptKind {
    pub const ALL: [PromptKind; 10] = [
        PromptKind::PlanExtract,
        PromptKind::FunctionalExtract,
        PromptKind::AtomicExtract,
        PromptKind::Merge,
        PromptKind::GeneralFilter,
        PromptKind::ToolSchemaFilter,
        PromptKind::ToolSummary,
        PromptKind::Rewrite,
        PromptKind::SelfFilter,
        PromptKind::TaskSynthesis,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PromptKind::PlanExtract => "plan_extract",
            PromptKind::FunctionalExtract => "functional_extract",
            PromptKind::AtomicExtract => "atomic_extract",
            PromptKind::Merge => "merge",
            PromptKind::GeneralFilter => "general_filter",
            PromptKind::ToolSchemaFilter => "tool_schema_filter",
            PromptKind::ToolSummary => "tool_summary",
            PromptKind::Rewrite => "rewrite",
            PromptKind::SelfFilter => "self_filter",
            PromptKind::TaskSynthesis => "task_synthesis",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == id)
    }

    fn builtin_text(self) -> &'static str {
        match self {
            PromptKind::PlanExtract => include_str!("../templates/plan_extract.txt"),
            PromptKind::FunctionalExtract => include_str!("../templates/functional_extract.txt"),
            PromptKind::AtomicExtract => include_str!("../templates/atomic_extract.txt"),
            PromptKind::Merge => include_str!("../templates/merge.txt"),
            PromptKind::GeneralFilter => include_str!("../templates/general_filter.txt"),
            PromptKind::ToolSchemaFilter => include_str!("../templates/tool_schema_filter.txt"),
            PromptKind::ToolSummary => include_str!("../templates/tool_summary.txt"),
            PromptKind::Rewrite => include_str!("../templates/rewrite.txt"),
            PromptKind::SelfFilter => include_str!("../templates/self_filter.txt"),
            PromptKind::TaskSynthesis => include_str!("../templates/task_synthesis.txt"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {0} has no user section")]
    MissingUserSection(String),
    #[error("template {template} needs placeholder {{{placeholder}}}")]
    MissingVar { template: String, placeholder: String },
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub kind: PromptKind,
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(kind: PromptKind, text: &str) -> Result<Self, TemplateError> {
        let text = text.replace("\r\n", "\n");
        let (system, user) =
            text.split_once(USER_SEPARATOR).ok_or_else(|| TemplateError::MissingUserSection(kind.id().into()))?;
        Ok(Self { kind, system: system.trim_end().to_string(), user: user.trim_end().to_string() })
    }

    /// Placeholder names used anywhere in the template, sorted and unique.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = placeholder_re()
            .captures_iter(&self.system)
            .chain(placeholder_re().captures_iter(&self.user))
            .map(|c| c[1].to_string())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Render both parts. Values are inserted verbatim in a single pass, so a
    /// value containing `{name}` is never substituted again.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<(String, String), TemplateError> {
        for name in self.placeholders() {
            if !vars.contains_key(&name) {
                return Err(TemplateError::MissingVar { template: self.kind.id().into(), placeholder: name });
            }
        }
        let sub = |text: &str| placeholder_re().replace_all(text, |c: &regex::Captures| vars[&c[1]].clone()).into_owned();
        Ok((sub(&self.system), sub(&self.user)))
    }
}

/// Default fillers for the example slots in the extraction and filter prompts.
pub fn default_example_vars() -> BTreeMap<String, String> {
    let good = r#"{
    "name": "music get all playlists",
    "document": "Collect every playlist of the signed-in user across all result pages. Parameters: username: str; password: str; Outputs: playlists: list[dict]. Notes: results are paginated, keep requesting pages until has_more is false.",
    "content": "login(username=username, password=password)\nlist_playlists(page=page)",
    "tools": ["login", "list_playlists"]
}"#;
    let bad_import = r#"{
    "name": "get pop songs",
    "document": "Get pop songs.",
    "content": "import requests\nsearch_songs(genre=\"pop\", page=1)",
    "tools": ["search_songs"]
}"#;
    let bad_wrapper = r#"{
    "name": "call music get all playlists",
    "document": "Calls another skill.",
    "content": "music_get_all_playlists()",
    "tools": []
}"#;
    let mut vars = BTreeMap::new();
    vars.insert("example".to_string(), good.to_string());
    vars.insert("examples".to_string(), "<plan>\n# step 1: Sign in to the music app; login\n# step 2: Find the target playlist across result pages; list_playlists\n# step 3: Add the requested song to that playlist; add_song_to_playlist\n</plan>".to_string());
    vars.insert("good_example".to_string(), good.to_string());
    vars.insert("bad_example_1".to_string(), bad_import.to_string());
    vars.insert("bad_example_2".to_string(), bad_wrapper.to_string());
    vars.insert("good_name_example".to_string(), "music get songs by genre".to_string());
    vars.insert("bad_name_example".to_string(), "get pop songs".to_string());
    vars.insert("email_example".to_string(), "\"jay@gmail.com\"".to_string());
    vars.insert("example_name".to_string(), "\"music get all playlists\"".to_string());
    vars.insert(
        "example_document".to_string(),
        "\"Collect every playlist of the signed-in user. Parameters: page: int; Outputs: playlists: list[dict]\"".to_string(),
    );
    vars.insert("example_content".to_string(), "\"list_playlists(page=page)\"".to_string());
    vars.insert("example_tools".to_string(), "[\"list_playlists\"]".to_string());
    vars.insert("api".to_string(), "the environment's tool names".to_string());
    vars
}

/// The full set of templates, built-in unless overridden from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<PromptKind, Template>,
    defaults: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = PromptKind::ALL
            .into_iter()
            .map(|k| (k, Template::parse(k, k.builtin_text()).expect("built-in template is well formed")))
            .collect();
        Self { templates, defaults: default_example_vars() }
    }

    /// Built-ins with any `<id>.txt` in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(format!("{}.txt", kind.id()));
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
                set.templates.insert(kind, Template::parse(kind, &text)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &Template {
        &self.templates[&kind]
    }

    /// Set a default variable, e.g. `api` to the environment's tool list.
    pub fn set_default(&mut self, key: &str, value: impl Into<String>) {
        self.defaults.insert(key.to_string(), value.into());
    }

    /// Render a chat request. `vars` override the example defaults.
    pub fn request(
        &self,
        kind: PromptKind,
        vars: &[(&str, String)],
        temperature: f64,
        max_output_tokens: u32,
    ) -> Result<ChatRequest, TemplateError> {
        let mut all = self.defaults.clone();
        for (k, v) in vars {
            all.insert((*k).to_string(), v.clone());
        }
        let (system, user) = self.get(kind).render(&all)?;
        Ok(ChatRequest {
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature,
            max_output_tokens,
            tag: Some(kind.id().to_string()),
        })
    }
}

/// Split a rendered user message into its `## Heading` sections.
pub fn sections(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut body = Vec::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("## ") {
            if let Some(name) = current.take() {
                out.insert(name, body.join("\n").trim().to_string());
            }
            current = Some(h.trim().to_string());
            body.clear();
        } else if current.is_some() {
            body.push(line);
        }
    }
    if let Some(name) = current {
        out.insert(name, body.join("\n").trim().to_string());
    }
    out
}

/// Text between the first `<tag>` and the following `</tag>`.
pub fn extract_tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim())
}
