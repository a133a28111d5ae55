//! Skill filters: the portability judgement, the static tool-schema check
//! and the model-based schema check.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::extraction::SkillDraft;
use crate::gateway::ChatGateway;
use crate::schema::ToolSchemaSet;
use crate::skill::Skill;
use crate::templates::{extract_tagged, PromptKind, TemplateSet};

/// Literal kinds the static check can recognize in a call pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Literal(Value),
    /// A variable or expression; its type is unknown.
    Expr(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallArg {
    pub key: Option<String>,
    pub value: ArgValue,
}

/// A `name(args)` occurrence in skill content.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSite {
    /// Full dotted callee as written, e.g. `apis.spotify.login`.
    pub callee: String,
    pub args: Vec<CallArg>,
    pub line: usize,
}

/// Names that read like calls in code but are never tools.
const NON_TOOLS: &[&str] = &[
    "if", "elif", "while", "for", "return", "and", "or", "not", "in", "assert", "with", "lambda", "yield", "except", "print", "len",
    "range", "str", "int", "float", "bool", "list", "dict", "set", "tuple", "sorted", "enumerate", "zip", "min", "max", "sum", "any",
    "all", "isinstance", "open", "format", "type", "abs", "round", "map", "filter", "reversed", "repr", "super", "getattr", "setattr",
];

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Byte index just past the string literal starting at `start` (a quote).
fn skip_string(chars: &[(usize, char)], start: usize) -> usize {
    let quote = chars[start].1;
    let mut i = start + 1;
    while i < chars.len() {
        match chars[i].1 {
            '\\' => i += 2,
            c if c == quote => return i + 1,
            _ => i += 1,
        }
    }
    chars.len()
}

/// Split `inner` (text between the call's parens) on top-level commas.
fn split_args(inner: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = inner.char_indices().collect();
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        match c {
            '"' | '\'' => {
                let end = skip_string(&chars, i);
                for (_, ch) in &chars[i..end.min(chars.len())] {
                    cur.push(*ch);
                }
                i = end;
                continue;
            }
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(std::mem::take(&mut cur));
                i += 1;
                continue;
            }
            _ => {}
        }
        cur.push(c);
        i += 1;
    }
    if !cur.trim().is_empty() {
        parts.push(cur);
    }
    parts.into_iter().map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

fn parse_literal(text: &str) -> ArgValue {
    let t = text.trim();
    let lit = match t {
        "True" | "true" => Some(Value::Bool(true)),
        "False" | "false" => Some(Value::Bool(false)),
        "None" | "null" => Some(Value::Null),
        _ => None,
    };
    if let Some(v) = lit {
        return ArgValue::Literal(v);
    }
    if let Some(first) = t.chars().next() {
        if first == '\'' && t.len() >= 2 && t.ends_with('\'') {
            return ArgValue::Literal(Value::String(t[1..t.len() - 1].to_string()));
        }
        if matches!(first, '"' | '[' | '{') || first.is_ascii_digit() || (first == '-' && t.len() > 1) {
            if let Ok(v) = serde_json::from_str::<Value>(t) {
                return ArgValue::Literal(v);
            }
            if first == '[' && t.ends_with(']') {
                return ArgValue::Literal(Value::Array(Vec::new()));
            }
            if first == '{' && t.ends_with('}') {
                return ArgValue::Literal(Value::Object(Default::default()));
            }
        }
    }
    ArgValue::Expr(t.to_string())
}

fn parse_arg(text: &str) -> CallArg {
    // `key=value`, but not `a == b`
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() && is_ident_char(chars[i]) {
        i += 1;
    }
    if i > 0 && is_ident_start(chars[0]) {
        let mut j = i;
        while j < chars.len() && chars[j] == ' ' {
            j += 1;
        }
        if j < chars.len() && chars[j] == '=' && chars.get(j + 1) != Some(&'=') {
            let key: String = chars[..i].iter().collect();
            let value: String = chars[j + 1..].iter().collect();
            return CallArg { key: Some(key), value: parse_literal(&value) };
        }
    }
    CallArg { key: None, value: parse_literal(text) }
}

/// Every call site in `content`, skipping string literals, `#` and `//`
/// comments, and `def` headers.
pub fn parse_calls(content: &str) -> (Vec<CallSite>, BTreeSet<String>) {
    let chars: Vec<(usize, char)> = content.char_indices().collect();
    let mut calls = Vec::new();
    let mut defined = BTreeSet::new();
    let mut i = 0;
    let mut line = 1;
    while i < chars.len() {
        let c = chars[i].1;
        if c == '\n' {
            line += 1;
            i += 1;
            continue;
        }
        if c == '"' || c == '\'' {
            let end = skip_string(&chars, i);
            line += chars[i..end.min(chars.len())].iter().filter(|x| x.1 == '\n').count();
            i = end;
            continue;
        }
        if c == '#' || (c == '/' && chars.get(i + 1).map(|x| x.1) == Some('/')) {
            while i < chars.len() && chars[i].1 != '\n' {
                i += 1;
            }
            continue;
        }
        let prev = if i == 0 { None } else { Some(chars[i - 1].1) };
        if is_ident_start(c) && !prev.is_some_and(|p| is_ident_char(p) || p == '.') {
            // dotted identifier chain
            let start = i;
            let mut j = i;
            while j < chars.len() && (is_ident_char(chars[j].1) || (chars[j].1 == '.' && chars.get(j + 1).is_some_and(|x| is_ident_start(x.1)))) {
                j += 1;
            }
            let callee: String = chars[start..j].iter().map(|x| x.1).collect();
            let mut k = j;
            while k < chars.len() && chars[k].1 == ' ' {
                k += 1;
            }
            if k < chars.len() && chars[k].1 == '(' {
                // find the matching paren
                let mut depth = 0i32;
                let mut m = k;
                while m < chars.len() {
                    match chars[m].1 {
                        '"' | '\'' => {
                            m = skip_string(&chars, m);
                            continue;
                        }
                        '(' => depth += 1,
                        ')' => {
                            depth -= 1;
                            if depth == 0 {
                                break;
                            }
                        }
                        _ => {}
                    }
                    m += 1;
                }
                let inner_start = chars[k].0 + 1;
                let inner_end = if m < chars.len() { chars[m].0 } else { content.len() };
                let inner = &content[inner_start..inner_end.max(inner_start)];
                let head: String = content[..chars[start].0].chars().rev().take_while(|c| *c != '\n').collect::<String>().chars().rev().collect();
                if head.trim_end().ends_with("def") {
                    defined.insert(callee);
                } else {
                    calls.push(CallSite { callee, args: split_args(inner).iter().map(|a| parse_arg(a)).collect(), line });
                }
                // continue scanning inside the arguments for nested calls
                i = k + 1;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    (calls, defined)
}

/// Parameter names declared as supplied by the caller, from lines like
/// `caller-supplied: playlist_id, song_id`.
pub fn caller_supplied(content: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for line in content.lines() {
        let lower = line.to_ascii_lowercase();
        for marker in ["caller-supplied:", "caller supplied:", "caller_supplied:"] {
            if let Some(pos) = lower.find(marker) {
                for name in line[pos + marker.len()..].split(',') {
                    let n = name.trim().trim_matches('`');
                    if !n.is_empty() {
                        out.insert(n.to_string());
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StaticViolation {
    NonexistentTool { tool: String },
    UnknownParameter { tool: String, param: String },
    MissingRequired { tool: String, param: String },
    TypeMismatch { tool: String, param: String, expected: String, found: String },
    TooManyPositional { tool: String },
}

impl fmt::Display for StaticViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StaticViolation::NonexistentTool { tool } => write!(f, "nonexistent tool \"{tool}\""),
            StaticViolation::UnknownParameter { tool, param } => write!(f, "unknown parameter \"{param}\" for tool \"{tool}\""),
            StaticViolation::MissingRequired { tool, param } => write!(f, "missing required parameter \"{param}\" for tool \"{tool}\""),
            StaticViolation::TypeMismatch { tool, param, expected, found } => {
                write!(f, "type mismatch for \"{tool}.{param}\": expected {expected}, found {found}")
            }
            StaticViolation::TooManyPositional { tool } => write!(f, "too many positional arguments for tool \"{tool}\""),
        }
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::Bool(_) => "boolean",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
        Value::Null => "null",
    }
}

/// Resolve a dotted callee against the schema set: the full chain or any of
/// its dotted suffixes.
fn resolve<'a>(callee: &'a str, schemas: &ToolSchemaSet) -> Option<&'a str> {
    if schemas.contains(callee) {
        return Some(callee);
    }
    let mut rest = callee;
    while let Some(pos) = rest.find('.') {
        rest = &rest[pos + 1..];
        if schemas.contains(rest) {
            return Some(rest);
        }
    }
    None
}

/// Check tool references in `skill.tools` and in call patterns of the
/// content against the declared schemas. Empty report means the skill
/// passes.
pub fn tool_schema_static_check(skill: &Skill, schemas: &ToolSchemaSet) -> Vec<StaticViolation> {
    let mut out: Vec<StaticViolation> = Vec::new();
    let push = |v: StaticViolation, out: &mut Vec<StaticViolation>| {
        if !out.contains(&v) {
            out.push(v);
        }
    };
    for t in &skill.tools {
        if !schemas.contains(t) {
            push(StaticViolation::NonexistentTool { tool: t.clone() }, &mut out);
        }
    }
    let supplied = caller_supplied(&skill.content);
    let (calls, defined) = parse_calls(&skill.content);
    for call in &calls {
        let Some(tool) = resolve(&call.callee, schemas) else {
            let keyworded = call.args.iter().any(|a| a.key.is_some());
            let bare = !call.callee.contains('.');
            if bare && !defined.contains(&call.callee) && !NON_TOOLS.contains(&call.callee.as_str()) && (keyworded || call.args.is_empty()) {
                push(StaticViolation::NonexistentTool { tool: call.callee.clone() }, &mut out);
            }
            continue;
        };
        let schema = schemas.get(tool).expect("resolved");
        let mut present = BTreeSet::new();
        let mut positional = 0usize;
        for arg in &call.args {
            let param = match &arg.key {
                Some(k) => match schema.param(k) {
                    Some(p) => p,
                    None => {
                        push(StaticViolation::UnknownParameter { tool: tool.to_string(), param: k.clone() }, &mut out);
                        continue;
                    }
                },
                None => {
                    // `*args`/`**kwargs` spreads hide their contents
                    if matches!(&arg.value, ArgValue::Expr(e) if e.starts_with('*')) {
                        present.extend(schema.parameters.iter().map(|p| p.name.clone()));
                        continue;
                    }
                    let Some(p) = schema.parameters.get(positional) else {
                        push(StaticViolation::TooManyPositional { tool: tool.to_string() }, &mut out);
                        continue;
                    };
                    positional += 1;
                    p
                }
            };
            present.insert(param.name.clone());
            if let ArgValue::Literal(v) = &arg.value {
                if !v.is_null() && !param.ty.accepts(v) {
                    push(
                        StaticViolation::TypeMismatch {
                            tool: tool.to_string(),
                            param: param.name.clone(),
                            expected: param.ty.as_str().to_string(),
                            found: json_type(v).to_string(),
                        },
                        &mut out,
                    );
                }
            }
        }
        for p in schema.required() {
            if !present.contains(&p.name) && !supplied.contains(&p.name) {
                push(StaticViolation::MissingRequired { tool: tool.to_string(), param: p.name.clone() }, &mut out);
            }
        }
    }
    out
}

/// Declared tools referenced by the skill, via `tools` or call sites.
pub fn referenced_tools(skill: &Skill, schemas: &ToolSchemaSet) -> Vec<String> {
    let mut out: BTreeSet<String> = skill.tools.iter().filter(|t| schemas.contains(t)).cloned().collect();
    for c in parse_calls(&skill.content).0 {
        if let Some(t) = resolve(&c.callee, schemas) {
            out.insert(t.to_string());
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaVerdict {
    Correct,
    Fail,
}

fn letters(s: &str) -> String {
    s.chars().filter(|c| c.is_alphabetic()).flat_map(char::to_lowercase).collect()
}

/// Portability judgement. Unrecognized replies are retried once, then
/// treated as bad.
pub fn general_filter(chat: &dyn ChatGateway, templates: &TemplateSet, skill: &Skill) -> Verdict {
    let body = serde_json::to_string_pretty(&SkillDraft::of(skill)).expect("json");
    for attempt in 0..2 {
        let reply = templates
            .request(PromptKind::GeneralFilter, &[("skill", body.clone())], 0.0, 16)
            .map_err(|e| e.to_string())
            .and_then(|r| chat.complete(&r).map_err(|e| e.to_string()));
        match reply.as_deref().map(letters).as_deref() {
            Ok("good") => return Verdict::Good,
            Ok("bad") => return Verdict::Bad,
            Ok(other) => log::warn!("general filter reply {other:?} for {} (attempt {})", skill.name, attempt + 1),
            Err(e) => log::warn!("general filter failed for {}: {e}", skill.name),
        }
    }
    Verdict::Bad
}

/// Model-based check of the call patterns against the schemas. The answer
/// must be wrapped in `<answer>` tags; otherwise retried once, then fail.
pub fn tool_schema_llm_check(chat: &dyn ChatGateway, templates: &TemplateSet, skill: &Skill, schemas: &ToolSchemaSet) -> SchemaVerdict {
    let specs = referenced_tools(skill, schemas)
        .iter()
        .filter_map(|t| schemas.get(t))
        .map(|s| s.render())
        .collect::<Vec<_>>()
        .join("\n");
    for attempt in 0..2 {
        let reply = templates
            .request(PromptKind::ToolSchemaFilter, &[("content", skill.content.clone()), ("specs", specs.clone())], 0.0, 1024)
            .map_err(|e| e.to_string())
            .and_then(|r| chat.complete(&r).map_err(|e| e.to_string()));
        match reply {
            Ok(text) => match extract_tagged(&text, "answer").map(letters).as_deref() {
                Some("correct") => return SchemaVerdict::Correct,
                Some("fail") => return SchemaVerdict::Fail,
                _ => log::warn!("schema check reply without a usable answer for {} (attempt {})", skill.name, attempt + 1),
            },
            Err(e) => log::warn!("schema check failed for {}: {e}", skill.name),
        }
    }
    SchemaVerdict::Fail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Fallback, MockChat, MockRule};
    use crate::schema::{ParamSpec, ParamType, ToolSchema};
    use crate::skill::tests::functional;

    fn schemas() -> ToolSchemaSet {
        let p = |name: &str, ty: ParamType, required: bool| ParamSpec { name: name.into(), ty, required, description: String::new() };
        ToolSchemaSet::new(vec![
            ToolSchema {
                name: "login".into(),
                description: String::new(),
                parameters: vec![p("username", ParamType::String, true), p("password", ParamType::String, true)],
                returns: String::new(),
            },
            ToolSchema {
                name: "list_playlists".into(),
                description: String::new(),
                parameters: vec![p("page", ParamType::Integer, false)],
                returns: String::new(),
            },
            ToolSchema {
                name: "add_song_to_playlist".into(),
                description: String::new(),
                parameters: vec![p("playlist_id", ParamType::Integer, true), p("song_id", ParamType::Integer, true)],
                returns: String::new(),
            },
        ])
        .unwrap()
    }

    fn with_content(content: &str) -> Skill {
        let mut s = functional("x");
        s.content = content.into();
        s.tools = vec![];
        s
    }

    #[test]
    fn clean_skill_passes() {
        assert!(tool_schema_static_check(&functional("x"), &schemas()).is_empty());
    }

    #[test]
    fn undeclared_tool() {
        let v = tool_schema_static_check(&with_content("foo(bar=1)"), &schemas());
        assert_eq!(v, vec![StaticViolation::NonexistentTool { tool: "foo".into() }]);
        assert!(v[0].to_string().contains("nonexistent tool"));
        let mut s = functional("x");
        s.tools.push("frobnicate".into());
        assert_eq!(tool_schema_static_check(&s, &schemas()), vec![StaticViolation::NonexistentTool { tool: "frobnicate".into() }]);
    }

    #[test]
    fn missing_required_and_caller_supplied() {
        let v = tool_schema_static_check(&with_content("add_song_to_playlist(playlist_id=pid)"), &schemas());
        assert_eq!(v, vec![StaticViolation::MissingRequired { tool: "add_song_to_playlist".into(), param: "song_id".into() }]);
        let ok = with_content("# caller-supplied: song_id\nadd_song_to_playlist(playlist_id=pid)");
        assert!(tool_schema_static_check(&ok, &schemas()).is_empty());
    }

    #[test]
    fn literal_type_mismatch() {
        let v = tool_schema_static_check(&with_content("add_song_to_playlist(playlist_id=\"7\", song_id=3)"), &schemas());
        assert_eq!(
            v,
            vec![StaticViolation::TypeMismatch {
                tool: "add_song_to_playlist".into(),
                param: "playlist_id".into(),
                expected: "integer".into(),
                found: "string".into()
            }]
        );
    }

    #[test]
    fn code_constructs_are_not_tools() {
        let content = "def helper(a, b=2):\n    if (a):\n        print(a, end=\"\")\n    x = obj.method(k=1)\n    s = \"login(username=1)\"\n    return helper(a, b=3)\n";
        assert!(tool_schema_static_check(&with_content(content), &schemas()).is_empty());
        let dotted = with_content("apis.app.list_playlists(page=\"one\")");
        assert_eq!(tool_schema_static_check(&dotted, &schemas()).len(), 1);
    }

    #[test]
    fn unknown_parameter_and_positional() {
        let v = tool_schema_static_check(&with_content("list_playlists(pages=2)"), &schemas());
        assert_eq!(v, vec![StaticViolation::UnknownParameter { tool: "list_playlists".into(), param: "pages".into() }]);
        assert!(tool_schema_static_check(&with_content("add_song_to_playlist(1, 2)"), &schemas()).is_empty());
        assert_eq!(tool_schema_static_check(&with_content("list_playlists(1, 2)"), &schemas()).len(), 1);
    }

    #[test]
    fn general_filter_verdicts() {
        let t = TemplateSet::builtin();
        let s = functional("x");
        for (reply, want) in [("good", Verdict::Good), ("bad", Verdict::Bad), ("GOOD.", Verdict::Good)] {
            let chat = MockChat::with_rules(vec![], Fallback::Reply(reply.into()));
            assert_eq!(general_filter(&chat, &t, &s), want);
        }
        let chat = MockChat::with_rules(vec![], Fallback::Reply("maybe".into()));
        assert_eq!(general_filter(&chat, &t, &s), Verdict::Bad);
        assert_eq!(chat.total_calls(), 2);
    }

    #[test]
    fn llm_check_verdicts() {
        let t = TemplateSet::builtin();
        let s = functional("x");
        let chat = MockChat::with_rules(vec![], Fallback::Reply("<answer>correct</answer>".into()));
        assert_eq!(tool_schema_llm_check(&chat, &t, &s, &schemas()), SchemaVerdict::Correct);
        let chat = MockChat::with_rules(vec![], Fallback::Reply("reasoning... <answer>fail</answer>".into()));
        assert_eq!(tool_schema_llm_check(&chat, &t, &s, &schemas()), SchemaVerdict::Fail);
        let chat = MockChat::with_rules(
            vec![MockRule { tag: Some("general_filter".into()), reply: "good".into(), ..Default::default() }],
            Fallback::Reply("no tags".into()),
        );
        assert_eq!(tool_schema_llm_check(&chat, &t, &s, &schemas()), SchemaVerdict::Fail);
        assert_eq!(chat.calls_for("tool_schema_filter"), 2);
    }
}
