use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_skillkb"))
        .args(args)
        .env_remove("SKILLKB_CHAT_URL")
        .env_remove("SKILLKB_EMBED_URL")
        .env_remove("SKILLKB_API_KEY")
        .output()
        .expect("spawn skillkb");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn common(&self) -> Vec<String> {
        vec!["--config".into(), fixture("config.json").to_str().unwrap().into(), "--library".into(), self.path("lib.json"), "--out".into(), self.path("")]
    }

    fn run(&self, head: &[&str], tail: &[&str]) -> (i32, String, String) {
        let common = self.common();
        let mut args: Vec<&str> = head.to_vec();
        args.extend(common.iter().map(String::as_str));
        args.extend_from_slice(tail);
        run(&args)
    }
}

#[test]
fn build_refine_validate_stats_flow() {
    let w = Work::new();
    let (code, out, err) = w.run(&["build"], &[]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("sha256"));
    assert!(Path::new(&w.path("trajectories")).is_dir());

    let (code, out, _) = w.run(&["refine", "--rounds", "3"], &[]);
    assert_eq!(code, 0, "{out}");
    for k in 1..=4 {
        assert!(Path::new(&w.path(&format!("snapshot-{k}.json"))).is_file(), "snapshot-{k}");
    }

    let (code, out, _) = w.run(&["validate", "--schemas", fixture("toy_world.json").to_str().unwrap()], &[]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("violations 0"));

    let (code, out, _) = w.run(&["stats"], &[]);
    assert_eq!(code, 0, "{out}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(v["universe"], 12);
    let sizes: Vec<u64> = rows.iter().map(|r| r["size"].as_u64().unwrap()).collect();
    assert!(sizes.windows(2).all(|p| p[0] <= p[1]));
    assert!(rows.iter().all(|r| r["updates"]["keep"].is_u64()));
}

#[test]
fn refine_zero_rounds_leaves_library_untouched() {
    let w = Work::new();
    assert_eq!(w.run(&["build"], &[]).0, 0);
    let before = std::fs::read(w.path("lib.json")).unwrap();
    let (code, out, _) = w.run(&["refine", "--rounds", "0"], &[]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(std::fs::read(w.path("lib.json")).unwrap(), before);
}

#[test]
fn expand_reports_targets_and_coverage() {
    let w = Work::new();
    assert_eq!(w.run(&["build"], &[]).0, 0);
    let (code, out, _) = w.run(&["expand"], &["--trajectories", &w.path("trajectories")]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("targets archive_file, delete_message"), "{out}");
    assert!(out.contains("tool coverage 10/12 -> 12/12"), "{out}");
}

#[test]
fn expand_without_experience_is_a_usage_error() {
    let w = Work::new();
    assert_eq!(w.run(&["build"], &[]).0, 0);
    let (code, out, _) = w.run(&["expand"], &["--trajectories", &w.path("nowhere")]);
    assert_eq!(code, 2, "{out}");
    assert!(out.contains("no experience"), "{out}");
}

#[test]
fn retrieve_writes_bundle_and_prompt() {
    let w = Work::new();
    assert_eq!(w.run(&["build"], &[]).0, 0);
    let bundle = w.path("bundle.json");
    let prompt = w.path("prompt.txt");
    let common = w.common();
    let mut args: Vec<&str> = vec!["retrieve", "--query", "Add the first jazz song to my Morning playlist", "--emit-prompt", &prompt];
    args.extend(common[..4].iter().map(String::as_str));
    args.extend(["--out", &bundle]);
    let (code, out, _) = run(&args);
    assert_eq!(code, 0, "{out}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&bundle).unwrap()).unwrap();
    assert!(v["selected"].as_array().unwrap().len() <= 8);
    let text = std::fs::read_to_string(&prompt).unwrap();
    assert!(!text.is_empty());

    // to stdout when no --out is given
    let mut args: Vec<&str> = vec!["retrieve", "--query", "List my files"];
    args.extend(common[..4].iter().map(String::as_str));
    let (code, out, _) = run(&args);
    assert_eq!(code, 0);
    assert!(serde_json::from_str::<Value>(&out).is_ok());
}

#[test]
fn build_is_byte_stable_across_runs() {
    let (a, b) = (Work::new(), Work::new());
    assert_eq!(a.run(&["build"], &[]).0, 0);
    assert_eq!(b.run(&["build"], &[]).0, 0);
    assert_eq!(std::fs::read(a.path("lib.json")).unwrap(), std::fs::read(b.path("lib.json")).unwrap());
}

#[test]
fn build_with_no_tasks_saves_empty_library() {
    let w = Work::new();
    std::fs::write(w.path("empty.jsonl"), "").unwrap();
    let (code, out, _) = w.run(&["build"], &["--tasks", &w.path("empty.jsonl")]);
    assert_eq!(code, 0, "{out}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(w.path("lib.json")).unwrap()).unwrap();
    for level in ["atomic", "functional", "planning"] {
        assert_eq!(v["skills"][level].as_array().unwrap().len(), 0);
    }
}

#[test]
fn exit_codes() {
    // usage
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["refine", "--rounds", "many"]).0, 2);
    let w = Work::new();
    let (code, out, _) = w.run(&["validate", "--schemas", "/no/such/schemas.json"], &[]);
    assert_eq!(code, 2);
    assert!(out.contains("schemas not found"));
    let (code, out, _) = w.run(&["refine"], &[]);
    assert_eq!(code, 2);
    assert!(out.contains("library not found"), "{out}");
    std::fs::write(w.path("lib.json"), "{broken").unwrap();
    assert_eq!(w.run(&["validate", "--schemas", fixture("toy_world.json").to_str().unwrap()], &[]).0, 2);

    // no mock table and no endpoint
    let w = Work::new();
    let lib = w.path("lib.json");
    let (code, out, _) = run(&["build", "--schemas", fixture("toy_world.json").to_str().unwrap(), "--tasks", fixture("tasks.jsonl").to_str().unwrap(), "--library", &lib]);
    assert_eq!(code, 2, "{out}");
    assert!(out.contains("SKILLKB_CHAT_URL"), "{out}");

    // violations
    let w = Work::new();
    assert_eq!(w.run(&["build"], &[]).0, 0);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(w.path("lib.json")).unwrap()).unwrap();
    let bad = inject_bad_call(&mut v);
    std::fs::write(w.path("lib.json"), serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let (code, out, _) = w.run(&["validate", "--schemas", fixture("toy_world.json").to_str().unwrap()], &[]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains(&bad), "{out}");
}

/// Rewrites the first functional skill to call a tool the schemas lack.
/// Returns the skill's name.
fn inject_bad_call(v: &mut Value) -> String {
    let s = v["skills"]["functional"].get_mut(0).expect("a functional skill");
    s["content"] = Value::String("teleport(where=\"moon\")".into());
    s["name"].as_str().unwrap().to_string()
}
