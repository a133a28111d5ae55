//! The `skillkb` command line: build, refine, expand, retrieve, validate
//! and stats over the toy environment or any fixture in its format.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::expansion::{run_expansion, tool_coverage};
use crate::gateway::{ChatGateway, Embedder, HashEmbedder, HttpChat, HttpEmbedder, MockChat, MockTable, RetryPolicy, Retrying, ENV_CHAT_URL, ENV_EMBED_URL};
use crate::pipeline::{iterate, run_round, PipelineError, Services};
use crate::refinement::filter::tool_schema_static_check;
use crate::refinement::RefinementReport;
use crate::retrieval::assemble_prompt;
use crate::schema::ToolSchemaSet;
use crate::skill::{validate_skill, Origin, SkillLevel, SkillLibrary, UpdateKind};
use crate::store::{self, StoreError};
use crate::task::{Task, Trajectory};
use crate::templates::TemplateSet;
use crate::toy_env::{AgentMode, Fixture, ScriptedAgent, ToyWorld};
use crate::vector::EmbeddingCache;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "skillkb", version, about = "Build, refine, expand and serve a three-level skill library")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub library: Option<PathBuf>,
    #[arg(long, global = true)]
    pub schemas: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tasks: Option<PathBuf>,
    /// Directory of trajectory logs (one JSONL file per task).
    #[arg(long, global = true)]
    pub trajectories: Option<PathBuf>,
    /// Environment fixture; the bundled toy world when absent.
    #[arg(long, global = true)]
    pub fixture: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the offline mock chat gateway with this table and the hash embedder.
    #[arg(long, global = true)]
    pub mock_table: Option<PathBuf>,
    /// Output directory (or file, for `retrieve`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the tasks, extract skills, refine once and save the library.
    Build,
    /// Run further refinement rounds over an existing library.
    Refine {
        #[arg(long, default_value_t = 3)]
        rounds: u32,
    },
    /// Experience-guided exploration, task synthesis and acquisition.
    Expand,
    /// Retrieve skills for a query and print the bundle as JSON.
    Retrieve {
        #[arg(long)]
        query: String,
        /// Also write the assembled skill prompt to this file.
        #[arg(long)]
        emit_prompt: Option<PathBuf>,
    },
    /// Re-run the structural and static schema checks on every skill.
    Validate,
    /// Per-snapshot sizes, level breakdown, tool coverage and update counts.
    Stats {
        /// Snapshot files; defaults to `snapshot-*.json` under --out.
        snapshots: Vec<PathBuf>,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = if matches!(e, PipelineError::Precondition(_)) { EXIT_USAGE } else { EXIT_PIPELINE };
        Self { code, message: e.to_string() }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::Io { .. } => EXIT_PIPELINE,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

/// What a command printed plus its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
}

/// Parse `args` (program name first) and run. Usage errors from clap come
/// back as exit code 2 with clap's message on stdout.
pub fn run_args<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            Outcome { code, stdout: e.to_string() }
        }
    }
}

pub fn run(cli: Cli) -> Outcome {
    let jobs = cli.common.jobs;
    let go = move || match execute(&cli) {
        Ok(o) => o,
        Err(e) => Outcome { code: e.code, stdout: format!("error: {}\n", e.message) },
    };
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(go),
            Err(e) => Outcome { code: EXIT_USAGE, stdout: format!("error: {e}\n") },
        },
        None => go(),
    }
}

struct Ctx {
    config: PipelineConfig,
    chat: Box<dyn ChatGateway>,
    embedder: Box<dyn Embedder>,
    cache: EmbeddingCache,
    templates: TemplateSet,
}

impl Ctx {
    fn services(&self) -> Services<'_> {
        Services { chat: self.chat.as_ref(), embedder: self.embedder.as_ref(), cache: &self.cache, templates: &self.templates }
    }
}

fn resolve_config(c: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| CliError::usage(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.library, &c.library),
        (&mut p.schemas, &c.schemas),
        (&mut p.tasks, &c.tasks),
        (&mut p.trajectories, &c.trajectories),
        (&mut p.fixture, &c.fixture),
        (&mut p.out, &c.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.hnsw.seed = s;
    }
    if c.mock_table.is_some() {
        cfg.gateway.mock_table.clone_from(&c.mock_table);
    }
    if c.jobs.is_some() {
        cfg.jobs = c.jobs;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn context(config: PipelineConfig) -> Result<Ctx, CliError> {
    let templates = match &config.paths.templates {
        Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| CliError::usage(e.to_string()))?,
        None => TemplateSet::builtin(),
    };
    let g = &config.gateway;
    let (chat, embedder): (Box<dyn ChatGateway>, Box<dyn Embedder>) = match &g.mock_table {
        Some(path) => {
            let table = MockTable::load(path).map_err(CliError::usage)?;
            (Box::new(MockChat::new(table)), Box::new(HashEmbedder::new(g.embed_dimension, config.seed)))
        }
        None => {
            let policy = RetryPolicy { attempts: g.retry_attempts, base_backoff_ms: g.retry_backoff_ms };
            let chat = HttpChat::from_env(g.chat_model.clone())
                .ok_or_else(|| CliError::usage(format!("no chat endpoint: set {ENV_CHAT_URL} or pass --mock-table")))?;
            let emb = HttpEmbedder::from_env(g.embed_model.clone(), g.embed_dimension)
                .ok_or_else(|| CliError::usage(format!("no embedding endpoint: set {ENV_EMBED_URL} or pass --mock-table")))?;
            (Box::new(Retrying { inner: chat, policy }), Box::new(Retrying { inner: emb, policy }))
        }
    };
    Ok(Ctx { config, chat, embedder, cache: EmbeddingCache::new(), templates })
}

fn world(config: &PipelineConfig) -> Result<ToyWorld, CliError> {
    let fixture = match &config.paths.fixture {
        Some(p) => Fixture::load(p).map_err(CliError::usage)?,
        None => Fixture::bundled(),
    };
    ToyWorld::new(fixture).map_err(CliError::usage)
}

fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    slot.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

fn load_schemas(config: &PipelineConfig) -> Result<ToolSchemaSet, CliError> {
    let path = required(&config.paths.schemas, "schemas")?;
    if !path.exists() {
        return Err(CliError::usage(format!("schemas not found: {}", path.display())));
    }
    Ok(store::load_tool_schemas(path)?)
}

fn load_library(config: &PipelineConfig) -> Result<SkillLibrary, CliError> {
    let path = required(&config.paths.library, "library")?;
    if !path.exists() {
        return Err(CliError::usage(format!("library not found: {}", path.display())));
    }
    let loaded = store::load_library(path)?;
    if !loaded.digest_ok {
        log::warn!("{}: content digest mismatch", path.display());
    }
    Ok(loaded.library)
}

fn load_tasks(config: &PipelineConfig) -> Result<Vec<Task>, CliError> {
    let path = required(&config.paths.tasks, "tasks")?;
    if !path.exists() {
        return Err(CliError::usage(format!("tasks not found: {}", path.display())));
    }
    Ok(store::load_tasks(path)?)
}

fn trajectories_dir(config: &PipelineConfig) -> Option<PathBuf> {
    config.paths.trajectories.clone().or_else(|| config.paths.out.as_ref().map(|o| o.join("trajectories")))
}

fn out_dir(config: &PipelineConfig) -> PathBuf {
    config
        .paths
        .out
        .clone()
        .or_else(|| config.paths.library.as_ref().and_then(|l| l.parent().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn save_with_vectors(ctx: &Ctx, library: &SkillLibrary, path: &Path) -> Result<String, CliError> {
    let skills: Vec<_> = library.skills.values().collect();
    let vectors = ctx.cache.embed_skills(ctx.embedder.as_ref(), &skills).map_err(|e| CliError { code: EXIT_PIPELINE, message: e.to_string() })?;
    Ok(store::save_library(library, path, Some(&vectors))?)
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    Ok(store::write_atomic(path, store::canonical_json(v).as_bytes())?)
}

fn report_line(r: &RefinementReport) -> String {
    format!(
        "round {}: candidates {} clusters {} merged {} filtered general/static/llm {}/{}/{} add {} modify {} keep {}",
        r.iteration,
        r.candidates_in,
        r.clusters,
        r.merged_out,
        r.filtered_general,
        r.filtered_static,
        r.filtered_llm,
        r.updates.add,
        r.updates.modify,
        r.updates.keep
    )
}

fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let config = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Build => build(config),
        Command::Refine { rounds } => refine(config, *rounds),
        Command::Expand => expand(config),
        Command::Retrieve { query, emit_prompt } => retrieve(config, query, emit_prompt.as_deref()),
        Command::Validate => validate(config),
        Command::Stats { snapshots } => stats(config, snapshots),
    }
}

fn build(config: PipelineConfig) -> Result<Outcome, CliError> {
    let schemas = load_schemas(&config)?;
    let tasks = load_tasks(&config)?;
    let library_path = required(&config.paths.library, "library")?.to_path_buf();
    let ctx = context(config)?;
    let mut out = String::new();
    if tasks.is_empty() {
        log::warn!("no tasks: saving an empty library");
        out.push_str("warning: no tasks, library is empty\n");
        let digest = save_with_vectors(&ctx, &SkillLibrary::new(), &library_path)?;
        out.push_str(&format!("library {} sha256 {digest}\n", library_path.display()));
        return Ok(Outcome { code: EXIT_OK, stdout: out });
    }
    let env = world(&ctx.config)?;
    let agent = ScriptedAgent::new(Arc::clone(&env.fixture), AgentMode::SkillAware);
    let round = run_round(ctx.services(), &ctx.config, &schemas, &SkillLibrary::new(), &tasks, &agent, &env, 1, Origin::Extracted)?;
    let ok = round.trajectories.iter().flat_map(|(_, ts)| ts).filter(|t| t.success).count();
    let total: usize = round.trajectories.iter().map(|(_, ts)| ts.len()).sum();
    out.push_str(&format!("rollouts {total} successful {ok}\ncandidates {}\n", round.candidates));
    out.push_str(&report_line(&round.report));
    out.push('\n');
    if let Some(dir) = trajectories_dir(&ctx.config) {
        for (task, ts) in &round.trajectories {
            store::save_trajectories(&dir.join(format!("{}.jsonl", task.id)), task, ts)?;
        }
        out.push_str(&format!("trajectories {}\n", dir.display()));
    }
    if ctx.config.paths.out.is_some() {
        let dir = out_dir(&ctx.config);
        write_json(&dir.join("report-1.json"), &json!(round.report))?;
        save_with_vectors(&ctx, &round.library, &dir.join("snapshot-1.json"))?;
    }
    let digest = save_with_vectors(&ctx, &round.library, &library_path)?;
    out.push_str(&format!("library {} skills {} sha256 {digest}\n", library_path.display(), round.library.len()));
    Ok(Outcome { code: EXIT_OK, stdout: out })
}

fn refine(config: PipelineConfig, rounds: u32) -> Result<Outcome, CliError> {
    let library = load_library(&config)?;
    if rounds == 0 {
        return Ok(Outcome { code: EXIT_OK, stdout: "rounds 0: nothing to do\n".into() });
    }
    let schemas = load_schemas(&config)?;
    let tasks = load_tasks(&config)?;
    let library_path = required(&config.paths.library, "library")?.to_path_buf();
    let ctx = context(config)?;
    let env = world(&ctx.config)?;
    let agent = ScriptedAgent::new(Arc::clone(&env.fixture), AgentMode::SkillAware);
    let it = iterate(ctx.services(), &ctx.config, &schemas, &library, &tasks, &agent, &env, rounds, None);
    let dir = out_dir(&ctx.config);
    let mut out = String::new();
    for (snap, report) in it.snapshots.iter().skip(1).zip(&it.reports) {
        let k = snap.iteration;
        let digest = save_with_vectors(&ctx, snap, &dir.join(format!("snapshot-{k}.json")))?;
        write_json(&dir.join(format!("report-{k}.json")), &json!(report))?;
        out.push_str(&report_line(report));
        out.push_str(&format!(" size {} sha256 {digest}\n", snap.len()));
    }
    let last = it.snapshots.last().expect("D0 present");
    let digest = save_with_vectors(&ctx, last, &library_path)?;
    out.push_str(&format!("library {} skills {} sha256 {digest}\n", library_path.display(), last.len()));
    match it.error {
        Some(e) => {
            let e = CliError::from(e);
            Ok(Outcome { code: e.code, stdout: format!("{out}error: {}\n", e.message) })
        }
        None => Ok(Outcome { code: EXIT_OK, stdout: out }),
    }
}

fn load_experience(config: &PipelineConfig) -> Result<Vec<(Task, Vec<Trajectory>)>, CliError> {
    let Some(dir) = trajectories_dir(config) else { return Ok(Vec::new()) };
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files.iter().map(|p| store::load_trajectories(p).map_err(CliError::from)).collect()
}

fn expand(config: PipelineConfig) -> Result<Outcome, CliError> {
    let library = load_library(&config)?;
    let schemas = load_schemas(&config)?;
    let experience = load_experience(&config)?;
    let seeds: Vec<Task> = match &config.paths.tasks {
        Some(_) => load_tasks(&config)?,
        None => experience.iter().map(|(t, _)| t.clone()).collect(),
    };
    let trajectories: Vec<Trajectory> = experience.into_iter().flat_map(|(_, ts)| ts).collect();
    let library_path = required(&config.paths.library, "library")?.to_path_buf();
    let ctx = context(config)?;
    let env = world(&ctx.config)?;
    let agent = ScriptedAgent::new(Arc::clone(&env.fixture), AgentMode::SkillAware);
    let run = run_expansion(ctx.services(), &ctx.config, &schemas, &library, &trajectories, &seeds, &agent, &env, None)?;
    let universe: Vec<String> = schemas.names().map(str::to_string).collect();
    let before = tool_coverage(&library, &universe);
    let after = tool_coverage(&run.round.library, &universe);
    let mut out = format!("targets {}\n", run.directive.targets.join(", "));
    out.push_str(&format!("explored {} synthesized {}\n", run.explored.len(), run.synthesized.len()));
    out.push_str(&report_line(&run.round.report));
    out.push('\n');
    out.push_str(&format!("tool coverage {}/{} -> {}/{}\n", before.0, universe.len(), after.0, universe.len()));
    let digest = save_with_vectors(&ctx, &run.round.library, &library_path)?;
    out.push_str(&format!("library {} skills {} sha256 {digest}\n", library_path.display(), run.round.library.len()));
    Ok(Outcome { code: EXIT_OK, stdout: out })
}

fn retrieve(config: PipelineConfig, query: &str, emit_prompt: Option<&Path>) -> Result<Outcome, CliError> {
    let library = load_library(&config)?;
    let ctx = context(config)?;
    let svc = ctx.services();
    let bundle = if library.is_empty() {
        None
    } else {
        let index = svc.index(&library, &ctx.config).map_err(|e| CliError { code: EXIT_PIPELINE, message: e.to_string() })?;
        Some(svc.retriever(&index, &ctx.config).retrieve(query).map_err(|e| CliError { code: EXIT_PIPELINE, message: e.to_string() })?)
    };
    let bundle = bundle.unwrap_or_default();
    let json_v = bundle.to_json();
    let prompt = assemble_prompt(&bundle, ctx.config.retrieval.include_plans_in_prompt).0;
    if let Some(p) = emit_prompt {
        store::write_atomic(p, prompt.as_bytes())?;
    }
    let text = store::canonical_json(&json_v);
    match &ctx.config.paths.out {
        Some(p) => {
            store::write_atomic(p, text.as_bytes())?;
            Ok(Outcome { code: EXIT_OK, stdout: format!("bundle {}\n", p.display()) })
        }
        None => Ok(Outcome { code: EXIT_OK, stdout: text }),
    }
}

fn validate(config: PipelineConfig) -> Result<Outcome, CliError> {
    let schemas = load_schemas(&config)?;
    let library = load_library(&config)?;
    let mut lines = Vec::new();
    for s in library.skills.values() {
        for v in validate_skill(s) {
            lines.push(format!("{}: {v}", s.name));
        }
        if s.level != SkillLevel::Planning {
            for v in tool_schema_static_check(s, &schemas) {
                lines.push(format!("{}: {v}", s.name));
            }
        }
    }
    let mut out = format!("skills {} violations {}\n", library.len(), lines.len());
    for l in &lines {
        out.push_str(l);
        out.push('\n');
    }
    Ok(Outcome { code: if lines.is_empty() { EXIT_OK } else { EXIT_VIOLATIONS }, stdout: out })
}

fn snapshot_number(p: &Path) -> Option<u32> {
    p.file_name()?.to_str()?.strip_prefix("snapshot-")?.strip_suffix(".json")?.parse().ok()
}

fn stats(config: PipelineConfig, given: &[PathBuf]) -> Result<Outcome, CliError> {
    let files: Vec<PathBuf> = if given.is_empty() {
        let dir = out_dir(&config);
        let mut found: Vec<(u32, PathBuf)> = std::fs::read_dir(&dir)
            .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| snapshot_number(&p).map(|k| (k, p)))
            .collect();
        found.sort();
        found.into_iter().map(|(_, p)| p).collect()
    } else {
        given.to_vec()
    };
    if files.is_empty() {
        return Err(CliError::usage("no snapshots found"));
    }
    let universe: Vec<String> = match &config.paths.schemas {
        Some(_) => load_schemas(&config)?.names().map(str::to_string).collect(),
        None => world(&config)?.fixture.tools.iter().map(|t| t.schema.name.clone()).collect(),
    };
    let mut rows = Vec::new();
    for f in &files {
        let lib = store::load_library(f)?.library;
        let (covered, fraction) = tool_coverage(&lib, &universe);
        let count = |k: UpdateKind| lib.update_log.iter().filter(|e| e.iteration == lib.iteration && e.option == k).count();
        // keeps are not logged; the round report beside the snapshot has them
        let report = f.parent().map(|d| d.join(format!("report-{}.json", lib.iteration))).and_then(|p| std::fs::read_to_string(p).ok());
        let updates = report
            .and_then(|t| serde_json::from_str::<RefinementReport>(&t).ok())
            .map(|r| json!(r.updates))
            .unwrap_or_else(|| json!({"add": count(UpdateKind::Add), "modify": count(UpdateKind::Modify), "keep": Value::Null}));
        rows.push(json!({
            "file": f.display().to_string(),
            "iteration": lib.iteration,
            "size": lib.len(),
            "levels": SkillLevel::ALL.iter().map(|l| (l.as_str().to_string(), json!(lib.count_at(*l)))).collect::<serde_json::Map<_, _>>(),
            "tools_covered": covered,
            "tool_coverage": fraction,
            "updates": updates,
        }));
    }
    Ok(Outcome { code: EXIT_OK, stdout: store::canonical_json(&json!({ "rows": rows, "universe": universe.len() })) })
}
