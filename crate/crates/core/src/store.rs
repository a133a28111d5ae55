//! On-disk formats: libraries, tool schemas, trajectory logs and task files.
//! Everything is canonical JSON (sorted keys, two-space indent, trailing
//! newline) written atomically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::EmbeddingVector;
use crate::schema::{ToolSchema, ToolSchemaSet};
use crate::skill::{validate_skill, LogEntry, Skill, SkillLevel, SkillLibrary};
use crate::task::{Task, Trajectory, TrajectoryStep};
use crate::vector::SkillEmbedding;

pub const LIBRARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed file: {message}")]
    Format { path: String, message: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: String, found: u64, expected: u32 },
    #[error("{path}: invalid skill {name}: {message}")]
    Validation { path: String, name: String, message: String },
    #[error("{path}: duplicate tool {name}")]
    DuplicateTool { path: String, name: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, message: impl ToString) -> StoreError {
    StoreError::Format { path: path.display().to_string(), message: message.to_string() }
}

/// Canonical text of any serializable value.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // Going through `Value` sorts object keys.
    let v = serde_json::to_value(value).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("json");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a sibling temp file and rename. Missing parent directories
/// are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(path))?;
    tmp.write_all(bytes).map_err(io(path))?;
    tmp.as_file().sync_all().map_err(io(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

fn read(path: &Path) -> Result<String, StoreError> {
    std::fs::read_to_string(path).map_err(io(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredEmbedding {
    vector: EmbeddingVector,
    embedded_text_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LibraryBody {
    format_version: u32,
    version: u64,
    iteration: u32,
    skills: BTreeMap<SkillLevel, Vec<Skill>>,
    update_log: Vec<LogEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<BTreeMap<String, StoredEmbedding>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LibraryFile {
    #[serde(flatten)]
    body: LibraryBody,
    content_digest: String,
}

/// A library read from disk, with any vectors stored beside it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLibrary {
    pub library: SkillLibrary,
    pub embeddings: Vec<SkillEmbedding>,
    /// False when the stored content digest did not match the content.
    pub digest_ok: bool,
}

/// Canonical bytes for a library; `embeddings` are stored when given.
pub fn library_bytes(library: &SkillLibrary, embeddings: Option<&[SkillEmbedding]>) -> Vec<u8> {
    let mut skills: BTreeMap<SkillLevel, Vec<Skill>> = SkillLevel::ALL.iter().map(|l| (*l, Vec::new())).collect();
    for s in library.skills.values() {
        skills.get_mut(&s.level).expect("all levels present").push(s.clone());
    }
    let body = LibraryBody {
        format_version: LIBRARY_FORMAT_VERSION,
        version: library.version,
        iteration: library.iteration,
        skills,
        update_log: library.update_log.clone(),
        embeddings: embeddings.map(|es| {
            es.iter()
                .map(|e| (e.skill_name.clone(), StoredEmbedding { vector: e.vector.clone(), embedded_text_digest: e.embedded_text_digest.clone() }))
                .collect()
        }),
    };
    let content_digest = sha256_hex(canonical_json(&body).as_bytes());
    canonical_json(&LibraryFile { body, content_digest }).into_bytes()
}

/// Save and return the sha256 of the written bytes.
pub fn save_library(library: &SkillLibrary, path: &Path, embeddings: Option<&[SkillEmbedding]>) -> Result<String, StoreError> {
    let bytes = library_bytes(library, embeddings);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn parse_library(text: &str, path: &Path) -> Result<LoadedLibrary, StoreError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| format_err(path, e))?;
    let found = raw.get("format_version").and_then(Value::as_u64).ok_or_else(|| format_err(path, "missing format_version"))?;
    if found != u64::from(LIBRARY_FORMAT_VERSION) {
        return Err(StoreError::Version { path: path.display().to_string(), found, expected: LIBRARY_FORMAT_VERSION });
    }
    let file: LibraryFile = serde_json::from_value(raw).map_err(|e| format_err(path, e))?;
    let digest_ok = sha256_hex(canonical_json(&file.body).as_bytes()) == file.content_digest;
    if !digest_ok {
        log::warn!("{}: content digest mismatch; the file was edited by hand", path.display());
    }
    let invalid = |name: &str, message: String| StoreError::Validation { path: path.display().to_string(), name: name.to_string(), message };
    let mut library = SkillLibrary { version: file.body.version, iteration: file.body.iteration, skills: BTreeMap::new(), update_log: file.body.update_log };
    for (level, list) in file.body.skills {
        for s in list {
            if s.level != level {
                return Err(invalid(&s.name, format!("listed under {level} but declares {}", s.level)));
            }
            let violations = validate_skill(&s);
            if !violations.is_empty() {
                return Err(invalid(&s.name, violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")));
            }
            if library.skills.contains_key(&s.name) {
                return Err(invalid(&s.name, "duplicate skill name".into()));
            }
            library.skills.insert(s.name.clone(), s);
        }
    }
    let embeddings = file
        .body
        .embeddings
        .unwrap_or_default()
        .into_iter()
        .map(|(name, e)| SkillEmbedding { skill_name: name, vector: e.vector, embedded_text_digest: e.embedded_text_digest })
        .collect();
    Ok(LoadedLibrary { library, embeddings, digest_ok })
}

pub fn load_library(path: &Path) -> Result<LoadedLibrary, StoreError> {
    parse_library(&read(path)?, path)
}

#[derive(Serialize)]
struct SchemaFileOut<'a> {
    tools: Vec<&'a ToolSchema>,
}

pub fn schema_bytes(schemas: &ToolSchemaSet) -> Vec<u8> {
    canonical_json(&SchemaFileOut { tools: schemas.iter().collect() }).into_bytes()
}

pub fn save_tool_schemas(schemas: &ToolSchemaSet, path: &Path) -> Result<String, StoreError> {
    let bytes = schema_bytes(schemas);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Read `{"tools": [...]}`. Extra top-level keys and extra per-tool keys are
/// ignored, so a toy-world fixture doubles as a schema file.
pub fn load_tool_schemas(path: &Path) -> Result<ToolSchemaSet, StoreError> {
    let raw: Value = serde_json::from_str(&read(path)?).map_err(|e| format_err(path, e))?;
    let tools = raw.get("tools").cloned().ok_or_else(|| format_err(path, "missing \"tools\""))?;
    let list: Vec<ToolSchema> = serde_json::from_value(tools).map_err(|e| format_err(path, e))?;
    ToolSchemaSet::new(list).map_err(|e| match e {
        crate::schema::SchemaSetError::DuplicateTool(name) => StoreError::DuplicateTool { path: path.display().to_string(), name },
        other => format_err(path, other),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryHeader {
    task_id: String,
    split: crate::task::Split,
    text: String,
    rollout: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryTrailer {
    success: bool,
    steps: usize,
}

fn line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_value(v).expect("serializable").to_string();
    s.push('\n');
    s
}

/// Line-delimited log: per trajectory a header, one line per step and a
/// trailer. Trajectories must belong to `task`.
pub fn trajectory_log(task: &Task, trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        out.push_str(&line(&TrajectoryHeader { task_id: task.id.clone(), split: task.split, text: task.text.clone(), rollout: t.rollout_index }));
        for s in &t.steps {
            out.push_str(&line(s));
        }
        out.push_str(&line(&TrajectoryTrailer { success: t.success, steps: t.steps.len() }));
    }
    out
}

pub fn save_trajectories(path: &Path, task: &Task, trajectories: &[Trajectory]) -> Result<(), StoreError> {
    write_atomic(path, trajectory_log(task, trajectories).as_bytes())
}

pub fn parse_trajectory_log(text: &str, path: &Path) -> Result<(Task, Vec<Trajectory>), StoreError> {
    let mut task: Option<Task> = None;
    let mut out: Vec<Trajectory> = Vec::new();
    let mut open: Option<Trajectory> = None;
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| format_err(path, format!("line {}: {m}", i + 1));
        let v: Value = serde_json::from_str(l).map_err(|e| bad(e.to_string()))?;
        if v.get("task_id").is_some() {
            let h: TrajectoryHeader = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            if open.is_some() {
                return Err(bad("header before the previous trailer".into()));
            }
            let this = Task { id: h.task_id.clone(), text: h.text, split: h.split, source_trajectory: None };
            match &task {
                Some(t) if t.id != this.id => return Err(bad("log mixes tasks".into())),
                None => task = Some(this),
                _ => {}
            }
            open = Some(Trajectory { task_id: h.task_id, rollout_index: h.rollout, steps: Vec::new(), success: false });
        } else if v.get("success").is_some() {
            let tr: TrajectoryTrailer = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            let mut t = open.take().ok_or_else(|| bad("trailer without header".into()))?;
            if t.steps.len() != tr.steps {
                return Err(bad(format!("trailer counts {} steps, found {}", tr.steps, t.steps.len())));
            }
            t.success = tr.success;
            out.push(t);
        } else {
            let s: TrajectoryStep = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            let t = open.as_mut().ok_or_else(|| bad("step outside a trajectory".into()))?;
            if t.steps.last().is_some_and(|p| p.t >= s.t) {
                return Err(bad("step indices must increase".into()));
            }
            t.steps.push(s);
        }
    }
    if open.is_some() {
        return Err(format_err(path, "truncated log: missing trailer"));
    }
    let task = task.ok_or_else(|| format_err(path, "empty trajectory log"))?;
    Ok((task, out))
}

pub fn load_trajectories(path: &Path) -> Result<(Task, Vec<Trajectory>), StoreError> {
    parse_trajectory_log(&read(path)?, path)
}

/// One task per line.
pub fn tasks_jsonl(tasks: &[Task]) -> String {
    tasks.iter().map(line).collect()
}

pub fn save_tasks(path: &Path, tasks: &[Task]) -> Result<(), StoreError> {
    write_atomic(path, tasks_jsonl(tasks).as_bytes())
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>, StoreError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t: Task = serde_json::from_str(l).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        if t.text.trim().is_empty() {
            return Err(format_err(path, format!("line {}: task text is empty", i + 1)));
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill::tests::functional;
    use crate::task::{Action, ToolOutcome};
    use serde_json::Map;

    fn lib() -> SkillLibrary {
        let mut l = SkillLibrary::new();
        l.skills.insert("b".into(), functional("b"));
        l.skills.insert("a".into(), functional("a"));
        l.version = 3;
        l
    }

    #[test]
    fn library_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lib.json");
        let d1 = save_library(&lib(), &p, None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let loaded = load_library(&p).unwrap();
        assert!(loaded.digest_ok);
        assert_eq!(loaded.library, lib());
        let d2 = save_library(&loaded.library, &p, None).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(d1, sha256_hex(&bytes));
        assert!(bytes.ends_with(b"\n"));
    }

    #[test]
    fn empty_library_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lib.json");
        save_library(&SkillLibrary::new(), &p, None).unwrap();
        assert!(load_library(&p).unwrap().library.is_empty());
        let mut v: Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        v["format_version"] = 99.into();
        std::fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(load_library(&p), Err(StoreError::Version { found: 99, .. })));
        let text = String::from_utf8(library_bytes(&lib(), None)).unwrap().replace("\"name\": \"b\"", "\"name\": \"a\"");
        assert!(matches!(parse_library(&text, &p), Err(StoreError::Validation { .. })));
        // parent is a regular file, so the directory cannot be created
        assert!(matches!(save_library(&lib(), &p.join("lib.json"), None), Err(StoreError::Io { .. })));
    }

    #[test]
    fn hand_edit_is_detected_but_loads() {
        let text = String::from_utf8(library_bytes(&lib(), None)).unwrap().replace("\"version\": 3", "\"version\": 4");
        let l = parse_library(&text, Path::new("x")).unwrap();
        assert!(!l.digest_ok);
        assert_eq!(l.library.version, 4);
    }

    #[test]
    fn schemas_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let tool = |n: &str| serde_json::json!({"name": n, "description": "", "parameters": [{"name": "x", "type": "integer", "required": true}], "returns": ""});
        std::fs::write(&p, serde_json::json!({"tools": [tool("a"), tool("b"), tool("c")], "extra": 1}).to_string()).unwrap();
        let s = load_tool_schemas(&p).unwrap();
        assert_eq!(s.len(), 3);
        save_tool_schemas(&s, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(load_tool_schemas(&p).unwrap(), s);
        save_tool_schemas(&load_tool_schemas(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        std::fs::write(&p, serde_json::json!({"tools": [tool("a"), tool("a")]}).to_string()).unwrap();
        assert!(matches!(load_tool_schemas(&p), Err(StoreError::DuplicateTool { .. })));
        let mut bad = tool("a");
        bad["parameters"][0]["type"] = "decimal".into();
        std::fs::write(&p, serde_json::json!({"tools": [bad]}).to_string()).unwrap();
        assert!(matches!(load_tool_schemas(&p), Err(StoreError::Format { .. })));
    }

    #[test]
    fn trajectory_log_round_trip() {
        let task = Task::train("T1", "Do it");
        let mut args = Map::new();
        args.insert("page".into(), 1.into());
        let step = |t| TrajectoryStep { t, thought: "go".into(), action: Action::tool("list_playlists", args.clone()), observation: "{\"ok\":true}".into(), outcome: ToolOutcome::Success };
        let trajs = vec![
            Trajectory { task_id: "T1".into(), rollout_index: 1, steps: vec![step(1), step(2)], success: true },
            Trajectory { task_id: "T1".into(), rollout_index: 2, steps: vec![], success: false },
        ];
        let text = trajectory_log(&task, &trajs);
        let (t, back) = parse_trajectory_log(&text, Path::new("x")).unwrap();
        assert_eq!((t, back.clone()), (task.clone(), trajs));
        assert_eq!(trajectory_log(&task, &back), text);
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(parse_trajectory_log(&truncated, Path::new("x")).is_err());
    }
}
