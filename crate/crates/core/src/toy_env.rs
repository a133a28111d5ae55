//! A small deterministic tool world: playlists, files, email and chat, with
//! a login gate on some tools and paginated listings. Seed tasks carry a
//! declarative success predicate and a script the bundled agent follows.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::env::{Decision, EnvError, Environment, Episode, Guidance, Observed, Policy, Session};
use crate::schema::{ToolSchema, ToolSchemaSet};
use crate::task::{Action, Task, ToolOutcome};

const BUNDLED: &str = include_str!("../fixtures/toy_world.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub id: i64,
    pub title: String,
    pub artist: String,
    pub genre: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Playlist {
    pub id: i64,
    pub name: String,
    pub songs: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct File {
    pub name: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: i64,
    pub from: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentMessage {
    pub to: String,
    pub text: String,
}

/// Mutable world state. One copy per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub songs: Vec<Song>,
    pub playlists: Vec<Playlist>,
    pub files: BTreeMap<String, Vec<File>>,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub messages_sent: Vec<SentMessage>,
    #[serde(default)]
    pub archived: Vec<String>,
    #[serde(default)]
    pub logged_in: bool,
    /// Tools that returned success, in call order.
    #[serde(default)]
    pub succeeded: Vec<String>,
}

/// Declarative success predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evaluator {
    PlaylistContains { playlist: String, song_title: String },
    MessageSent { to: String, text_contains: String },
    ToolsSucceeded { tools: Vec<String> },
}

impl Evaluator {
    pub fn holds(&self, s: &WorldState) -> bool {
        match self {
            Evaluator::PlaylistContains { playlist, song_title } => {
                let Some(song) = s.songs.iter().find(|x| &x.title == song_title) else { return false };
                s.playlists.iter().any(|p| &p.name == playlist && p.songs.contains(&song.id))
            }
            Evaluator::MessageSent { to, text_contains } => {
                s.messages_sent.iter().any(|m| &m.to == to && m.text.contains(text_contains.as_str()))
            }
            Evaluator::ToolsSucceeded { tools } => tools.iter().all(|t| s.succeeded.contains(t)),
        }
    }
}

/// One step of a task script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptOp {
    /// Call once; `bind` maps variables to dotted paths in the observation.
    Call {
        tool: String,
        #[serde(default)]
        args: Map<String, Value>,
        #[serde(default)]
        bind: BTreeMap<String, String>,
    },
    /// Page through `list` until an item matches every `match` field.
    Find {
        tool: String,
        #[serde(default)]
        args: Map<String, Value>,
        list: String,
        #[serde(rename = "match")]
        matches: Map<String, Value>,
        #[serde(default)]
        bind: BTreeMap<String, String>,
    },
    /// Page through `list` to the end and bind the item count.
    Collect {
        tool: String,
        #[serde(default)]
        args: Map<String, Value>,
        list: String,
        count: String,
    },
}

impl ScriptOp {
    pub fn tool(&self) -> &str {
        match self {
            ScriptOp::Call { tool, .. } | ScriptOp::Find { tool, .. } | ScriptOp::Collect { tool, .. } => tool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub text: String,
    pub evaluator: Evaluator,
    #[serde(default)]
    pub script: Vec<ScriptOp>,
}

/// Tool schema plus simulation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    #[serde(flatten)]
    pub schema: ToolSchema,
    #[serde(default)]
    pub requires_login: bool,
    #[serde(default)]
    pub page_size: Option<usize>,
    #[serde(default)]
    pub example_args: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub credentials: Credentials,
    pub state: WorldState,
    pub tools: Vec<ToolSpec>,
    pub tasks: Vec<TaskSpec>,
}

impl Fixture {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED).expect("bundled fixture parses")
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn tool(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.schema.name == name)
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn seed_tasks(&self) -> Vec<Task> {
        self.tasks.iter().map(|t| Task::train(t.id.clone(), t.text.clone())).collect()
    }

    /// Declared tool names that occur as whole words in `text`, in order of
    /// first occurrence.
    pub fn tools_mentioned(&self, text: &str) -> Vec<String> {
        let words: Vec<&str> = text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).filter(|w| !w.is_empty()).collect();
        let mut seen = BTreeSet::new();
        words.into_iter().filter(|w| self.tool(w).is_some() && seen.insert(*w)).map(str::to_string).collect()
    }
}

fn fail(error: &str, extra: Value) -> (String, ToolOutcome) {
    let mut v = json!({"ok": false, "error": error});
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    (v.to_string(), ToolOutcome::Failure)
}

fn ok(v: Value) -> (String, ToolOutcome) {
    let mut m = Map::new();
    m.insert("ok".into(), Value::Bool(true));
    if let Value::Object(o) = v {
        m.extend(o);
    }
    (Value::Object(m).to_string(), ToolOutcome::Success)
}

fn page_of<T: Clone>(items: &[T], page: i64, size: usize) -> Option<(Vec<T>, bool)> {
    if page < 1 {
        return None;
    }
    let start = (page as usize - 1).saturating_mul(size);
    if start >= items.len() && !(page == 1 && items.is_empty()) {
        return None;
    }
    let end = (start + size).min(items.len());
    Some((items[start.min(end)..end].to_vec(), end < items.len()))
}

impl WorldState {
    /// Execute one tool call against this state.
    pub fn call(&mut self, spec: &ToolSpec, creds: &Credentials, args: &Map<String, Value>) -> (String, ToolOutcome) {
        let schema = &spec.schema;
        for k in args.keys() {
            if schema.param(k).is_none() {
                return fail("unknown_param", json!({"param": k}));
            }
        }
        for p in &schema.parameters {
            match args.get(&p.name) {
                None if p.required => return fail("missing_param", json!({"param": p.name})),
                Some(v) if !p.ty.accepts(v) => return fail("bad_type", json!({"param": p.name, "expected": p.ty.as_str()})),
                _ => {}
            }
        }
        if spec.requires_login && !self.logged_in {
            return fail("auth_required", json!({"hint": "call login first"}));
        }
        let s = |k: &str| args.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        let i = |k: &str| args.get(k).and_then(Value::as_i64);
        let page = i("page").unwrap_or(1);
        let size = spec.page_size.unwrap_or(usize::MAX);
        let out = match schema.name.as_str() {
            "login" => {
                if s("username") == creds.username && s("password") == creds.password {
                    self.logged_in = true;
                    ok(json!({"session": "active"}))
                } else {
                    fail("invalid_credentials", json!({}))
                }
            }
            "list_playlists" => {
                let items: Vec<Value> = self.playlists.iter().map(|p| json!({"id": p.id, "name": p.name})).collect();
                match page_of(&items, page, size) {
                    Some((p, more)) => ok(json!({"page": page, "playlists": p, "has_more": more})),
                    None => fail("page_out_of_range", json!({"page": page})),
                }
            }
            "show_playlist" => {
                let id = i("playlist_id").unwrap_or_default();
                match self.playlists.iter().find(|p| p.id == id) {
                    Some(p) => {
                        let songs: Vec<Value> = p
                            .songs
                            .iter()
                            .filter_map(|sid| self.songs.iter().find(|x| x.id == *sid))
                            .map(|x| json!({"id": x.id, "title": x.title}))
                            .collect();
                        ok(json!({"playlist": {"id": p.id, "name": p.name, "songs": songs}}))
                    }
                    None => fail("not_found", json!({"playlist_id": id})),
                }
            }
            "create_playlist" => {
                let name = s("name");
                if self.playlists.iter().any(|p| p.name == name) {
                    fail("already_exists", json!({"name": name}))
                } else {
                    let id = self.playlists.iter().map(|p| p.id).max().unwrap_or(0) + 1;
                    self.playlists.push(Playlist { id, name, songs: Vec::new() });
                    ok(json!({"playlist_id": id}))
                }
            }
            "add_song_to_playlist" => {
                let (pid, sid) = (i("playlist_id").unwrap_or_default(), i("song_id").unwrap_or_default());
                if !self.songs.iter().any(|x| x.id == sid) {
                    fail("not_found", json!({"song_id": sid}))
                } else if let Some(p) = self.playlists.iter_mut().find(|p| p.id == pid) {
                    p.songs.push(sid);
                    ok(json!({"playlist_id": pid, "song_id": sid}))
                } else {
                    fail("not_found", json!({"playlist_id": pid}))
                }
            }
            "search_songs" => {
                let q = s("query").to_lowercase();
                let items: Vec<Value> = self
                    .songs
                    .iter()
                    .filter(|x| [&x.title, &x.artist, &x.genre].iter().any(|f| f.to_lowercase().contains(&q)))
                    .map(|x| json!({"id": x.id, "title": x.title, "artist": x.artist}))
                    .collect();
                match page_of(&items, page, size) {
                    Some((p, more)) => ok(json!({"page": page, "songs": p, "has_more": more})),
                    None => fail("page_out_of_range", json!({"page": page})),
                }
            }
            "list_files" => {
                let dir = s("directory");
                match self.files.get(&dir) {
                    None => fail("not_found", json!({"directory": dir})),
                    Some(files) => {
                        let names: Vec<String> = files.iter().map(|f| f.name.clone()).collect();
                        match page_of(&names, page, size) {
                            Some((p, more)) => ok(json!({"page": page, "files": p, "has_more": more})),
                            None => fail("page_out_of_range", json!({"page": page})),
                        }
                    }
                }
            }
            "read_file" | "archive_file" => {
                let path = s("path");
                let (dir, name) = path.split_once('/').unwrap_or(("", path.as_str()));
                let found = self.files.get(dir).and_then(|fs| fs.iter().position(|f| f.name == name));
                match found {
                    None => fail("not_found", json!({"path": path})),
                    Some(idx) if schema.name == "read_file" => ok(json!({"path": path, "content": self.files[dir][idx].content})),
                    Some(idx) => {
                        self.files.get_mut(dir).expect("present").remove(idx);
                        self.archived.push(path.clone());
                        ok(json!({"archived": path}))
                    }
                }
            }
            "list_messages" => ok(json!({"messages": self.messages})),
            "send_message" => {
                self.messages_sent.push(SentMessage { to: s("to"), text: s("text") });
                ok(json!({"sent": true}))
            }
            "delete_message" => {
                let id = i("message_id").unwrap_or_default();
                match self.messages.iter().position(|m| m.id == id) {
                    Some(idx) => {
                        self.messages.remove(idx);
                        ok(json!({"deleted": id}))
                    }
                    None => fail("not_found", json!({"message_id": id})),
                }
            }
            other => fail("not_implemented", json!({"tool": other})),
        };
        if out.1 == ToolOutcome::Success {
            self.succeeded.push(schema.name.clone());
        }
        out
    }
}

/// The environment: a fixture plus evaluators registered for synthesized
/// tasks.
pub struct ToyWorld {
    pub fixture: Arc<Fixture>,
    schemas: ToolSchemaSet,
    extra: RwLock<BTreeMap<String, Evaluator>>,
}

impl ToyWorld {
    pub fn new(fixture: Fixture) -> Result<Self, String> {
        let schemas = ToolSchemaSet::new(fixture.tools.iter().map(|t| t.schema.clone()).collect()).map_err(|e| e.to_string())?;
        Ok(Self { fixture: Arc::new(fixture), schemas, extra: RwLock::new(BTreeMap::new()) })
    }

    pub fn bundled() -> Self {
        Self::new(Fixture::bundled()).expect("bundled fixture is valid")
    }

    fn evaluator(&self, task: &Task) -> Option<Evaluator> {
        if let Some(e) = self.extra.read().expect("evaluators").get(&task.id) {
            return Some(e.clone());
        }
        self.fixture.task(&task.id).map(|t| t.evaluator.clone())
    }
}

impl Environment for ToyWorld {
    fn schemas(&self) -> &ToolSchemaSet {
        &self.schemas
    }

    /// Tasks unknown to the fixture succeed when every tool their text
    /// names has been called successfully.
    fn prepare_task(&self, task: &Task) -> Result<(), EnvError> {
        if self.fixture.task(&task.id).is_some() {
            return Ok(());
        }
        let tools = self.fixture.tools_mentioned(&task.text);
        if tools.is_empty() {
            return Err(EnvError::UnknownTask(task.id.clone()));
        }
        self.extra.write().expect("evaluators").insert(task.id.clone(), Evaluator::ToolsSucceeded { tools });
        Ok(())
    }

    fn start(&self, task: &Task) -> Result<Box<dyn Session>, EnvError> {
        let evaluator = self.evaluator(task).ok_or_else(|| EnvError::UnknownTask(task.id.clone()))?;
        Ok(Box::new(ToySession { fixture: Arc::clone(&self.fixture), state: self.fixture.state.clone(), evaluator }))
    }
}

pub struct ToySession {
    fixture: Arc<Fixture>,
    pub state: WorldState,
    evaluator: Evaluator,
}

impl Session for ToySession {
    fn step(&mut self, action: &Action) -> Result<(String, ToolOutcome), EnvError> {
        match action {
            Action::Code { .. } => Ok(fail("code_not_supported", json!({}))),
            Action::Tool { tool, args } => {
                let spec = self.fixture.tool(tool).ok_or_else(|| EnvError::UnknownTool(tool.clone()))?;
                Ok(self.state.call(spec, &self.fixture.credentials, args))
            }
        }
    }

    fn evaluate(&self) -> Result<bool, EnvError> {
        Ok(self.evaluator.holds(&self.state))
    }
}

/// Follow a dotted path; a `*` segment maps the rest of the path over an
/// array and joins the results with ", ".
pub fn lookup(v: &Value, path: &str) -> Option<Value> {
    let mut cur = v;
    let segs: Vec<&str> = path.split('.').collect();
    for (n, seg) in segs.iter().enumerate() {
        if *seg == "*" {
            let rest = segs[n + 1..].join(".");
            let parts: Vec<String> = cur
                .as_array()?
                .iter()
                .filter_map(|x| if rest.is_empty() { Some(x.clone()) } else { lookup(x, &rest) })
                .map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()))
                .collect();
            return Some(Value::String(parts.join(", ")));
        }
        cur = match seg.parse::<usize>() {
            Ok(i) => cur.get(i)?,
            Err(_) => cur.get(seg)?,
        };
    }
    Some(cur.clone())
}

fn substitute(args: &Map<String, Value>, vars: &BTreeMap<String, Value>) -> Map<String, Value> {
    let show = |v: &Value| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
    args.iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) if s.starts_with('$') => vars.get(&s[1..]).cloned().unwrap_or(Value::Null),
                Value::String(s) if s.contains('{') => {
                    let mut out = s.clone();
                    for (name, val) in vars {
                        out = out.replace(&format!("{{{name}}}"), &show(val));
                    }
                    Value::String(out)
                }
                other => other.clone(),
            };
            (k.clone(), v)
        })
        .collect()
}

/// Tools a skill prompt shows behind a login: tools called in a code block
/// that also calls `login(`, and tools listed after `login` on a plan
/// step's `apis:` line.
pub fn login_gated_tools(prompt: &str) -> BTreeSet<String> {
    let call = regex::Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\(").expect("static regex");
    let mut out = BTreeSet::new();
    for line in prompt.lines() {
        let Some((_, apis)) = line.split_once("apis:") else { continue };
        let tools: Vec<&str> = apis.split(',').map(str::trim).collect();
        if let Some(at) = tools.iter().position(|t| *t == "login") {
            out.extend(tools[at + 1..].iter().filter(|t| !t.is_empty()).map(|t| t.to_string()));
        }
    }
    for (n, block) in prompt.split("```").enumerate() {
        if n % 2 == 0 || !block.contains("login(") {
            continue;
        }
        for c in call.captures_iter(block) {
            if &c[1] != "login" {
                out.insert(c[1].to_string());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentMode {
    /// Ignores skill text; learns the login requirement from failures.
    Naive,
    /// Reads call patterns from the skill prompt and logs in up front for
    /// tools that skills show behind a login.
    SkillAware,
}

/// Deterministic fixture-driven policy. Temperature is ignored.
pub struct ScriptedAgent {
    pub fixture: Arc<Fixture>,
    pub mode: AgentMode,
}

impl ScriptedAgent {
    pub fn new(fixture: Arc<Fixture>, mode: AgentMode) -> Self {
        Self { fixture, mode }
    }

    fn script_for(&self, task: &Task, guidance: &Guidance) -> Vec<ScriptOp> {
        let call = |t: &str| ScriptOp::Call {
            tool: t.to_string(),
            args: self.fixture.tool(t).map(|s| s.example_args.clone()).unwrap_or_default(),
            bind: BTreeMap::new(),
        };
        if !guidance.exploration_targets.is_empty() {
            return guidance.exploration_targets.iter().map(|t| call(t)).collect();
        }
        if let Some(spec) = self.fixture.task(&task.id) {
            return spec.script.clone();
        }
        self.fixture.tools_mentioned(&task.text).iter().map(|t| call(t)).collect()
    }
}

impl Policy for ScriptedAgent {
    fn begin<'a>(&'a self, task: &Task, guidance: &Guidance, _temperature: f64, _rollout: u32) -> Box<dyn Episode + 'a> {
        let gated = match self.mode {
            AgentMode::SkillAware => login_gated_tools(&guidance.skill_prompt),
            AgentMode::Naive => BTreeSet::new(),
        };
        Box::new(ScriptEpisode {
            ops: self.script_for(task, guidance),
            creds: self.fixture.credentials.clone(),
            gated,
            exploring: !guidance.exploration_targets.is_empty(),
            pc: 0,
            page: 1,
            count: 0,
            vars: BTreeMap::new(),
            logged_in: false,
            inflight: None,
        })
    }
}

enum Inflight {
    Login { then: Option<Action> },
    Op(Action),
}

struct ScriptEpisode {
    ops: Vec<ScriptOp>,
    creds: Credentials,
    gated: BTreeSet<String>,
    exploring: bool,
    pc: usize,
    page: i64,
    count: usize,
    vars: BTreeMap<String, Value>,
    logged_in: bool,
    inflight: Option<Inflight>,
}

fn act(action: Action) -> Decision {
    let thought = match &action {
        Action::Tool { tool, .. } => format!("call {tool}"),
        Action::Code { .. } => "run code".into(),
    };
    Decision::Act { thought, action }
}

fn finish(why: &str) -> Decision {
    Decision::Finish { thought: why.into() }
}

impl ScriptEpisode {
    fn login(&self) -> Action {
        let mut args = Map::new();
        args.insert("username".into(), Value::String(self.creds.username.clone()));
        args.insert("password".into(), Value::String(self.creds.password.clone()));
        Action::tool("login", args)
    }

    fn current_action(&self) -> Action {
        let op = &self.ops[self.pc];
        let (tool, args) = match op {
            ScriptOp::Call { tool, args, .. } | ScriptOp::Find { tool, args, .. } | ScriptOp::Collect { tool, args, .. } => (tool, args),
        };
        let mut args = substitute(args, &self.vars);
        if matches!(op, ScriptOp::Find { .. } | ScriptOp::Collect { .. }) {
            args.insert("page".into(), Value::from(self.page));
        }
        Action::tool(tool.clone(), args)
    }

    fn send(&mut self, action: Action) -> Decision {
        let needs_login = action.tool_name().is_some_and(|t| self.gated.contains(t));
        if needs_login && !self.logged_in {
            let login = self.login();
            self.inflight = Some(Inflight::Login { then: Some(action) });
            return act(login);
        }
        self.inflight = Some(Inflight::Op(action.clone()));
        act(action)
    }

    fn advance(&mut self) {
        self.pc += 1;
        self.page = 1;
        self.count = 0;
    }

    /// Consume the observation of an op call. Returns false to give up.
    fn absorb(&mut self, obs: &Value) -> bool {
        if obs.get("ok") != Some(&Value::Bool(true)) {
            if self.exploring {
                self.advance();
                return true;
            }
            return false;
        }
        let bind = |vars: &mut BTreeMap<String, Value>, from: &Value, bind: &BTreeMap<String, String>| {
            for (var, path) in bind {
                if let Some(v) = lookup(from, path) {
                    vars.insert(var.clone(), v);
                }
            }
        };
        let more = obs.get("has_more").and_then(Value::as_bool).unwrap_or(false);
        match self.ops[self.pc].clone() {
            ScriptOp::Call { bind: b, .. } => {
                bind(&mut self.vars, obs, &b);
                self.advance();
            }
            ScriptOp::Find { list, matches, bind: b, .. } => {
                let items = obs.get(&list).and_then(Value::as_array).cloned().unwrap_or_default();
                match items.iter().find(|it| matches.iter().all(|(k, v)| it.get(k) == Some(v))) {
                    Some(it) => {
                        bind(&mut self.vars, it, &b);
                        self.advance();
                    }
                    None if more => self.page += 1,
                    None => return false,
                }
            }
            ScriptOp::Collect { list, count, .. } => {
                self.count += obs.get(&list).and_then(Value::as_array).map_or(0, Vec::len);
                if more {
                    self.page += 1;
                } else {
                    self.vars.insert(count, Value::from(self.count));
                    self.advance();
                }
            }
        }
        true
    }
}

impl Episode for ScriptEpisode {
    fn next(&mut self, last: Option<&Observed>) -> Decision {
        if let Some(inflight) = self.inflight.take() {
            let obs: Value = last.and_then(|o| serde_json::from_str(&o.observation).ok()).unwrap_or(Value::Null);
            let success = obs.get("ok") == Some(&Value::Bool(true));
            match inflight {
                Inflight::Login { then } => {
                    if !success {
                        return finish("login failed");
                    }
                    self.logged_in = true;
                    if let Some(a) = then {
                        self.inflight = Some(Inflight::Op(a.clone()));
                        return act(a);
                    }
                }
                Inflight::Op(action) => {
                    let auth = obs.get("error").and_then(Value::as_str) == Some("auth_required");
                    if auth && !self.logged_in {
                        let login = self.login();
                        self.inflight = Some(Inflight::Login { then: Some(action) });
                        return act(login);
                    }
                    if !self.absorb(&obs) {
                        return finish("giving up");
                    }
                }
            }
        }
        if self.pc >= self.ops.len() {
            return finish("done");
        }
        let a = self.current_action();
        self.send(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{rollout_one, RolloutSettings};

    fn settings() -> RolloutSettings {
        RolloutSettings { m: 1, temperature: 0.9, step_cap: 40 }
    }

    fn example_args_valid(spec: &ToolSpec) -> bool {
        spec.example_args.iter().all(|(k, v)| spec.schema.param(k).is_some_and(|p| p.ty.accepts(v)))
            && spec.schema.required().all(|p| spec.example_args.contains_key(&p.name))
    }

    fn args(v: Value) -> Map<String, Value> {
        v.as_object().cloned().unwrap()
    }

    #[test]
    fn fixture_shape() {
        let f = Fixture::bundled();
        assert!(f.tools.len() >= 12);
        assert!(f.tools.iter().filter(|t| t.page_size.is_some()).count() >= 2);
        assert!(f.tools.iter().filter(|t| t.requires_login).count() >= 2);
        assert!(f.tools.iter().all(example_args_valid));
        let used: BTreeSet<&str> = f.tasks.iter().flat_map(|t| t.script.iter().map(ScriptOp::tool)).collect();
        let unused: Vec<&str> = f.tools.iter().map(|t| t.schema.name.as_str()).filter(|n| !used.contains(n) && *n != "login").collect();
        assert_eq!(unused, ["archive_file", "delete_message"]);
    }

    #[test]
    fn step_contracts() {
        let w = ToyWorld::bundled();
        let mut s = w.start(&Task::train("T1", "x")).unwrap();
        let (obs, out) = s.step(&Action::tool("list_playlists", args(json!({"page": 1})))).unwrap();
        assert_eq!(out, ToolOutcome::Failure);
        assert!(obs.contains("auth_required"));
        s.step(&Action::tool("login", args(json!({"username": "sam", "password": "hunter2"})))).unwrap();
        let (obs, out) = s.step(&Action::tool("list_playlists", args(json!({"page": 1})))).unwrap();
        assert_eq!(out, ToolOutcome::Success);
        assert_eq!(obs, r#"{"has_more":true,"ok":true,"page":1,"playlists":[{"id":1,"name":"Morning"},{"id":2,"name":"Workout"}]}"#);
        let (obs, _) = s.step(&Action::tool("send_message", args(json!({"text": "b"})))).unwrap();
        assert!(obs.contains("missing_param") && obs.contains("\"to\""));
        assert_eq!(s.step(&Action::tool("frobnicate", Map::new())), Err(EnvError::UnknownTool("frobnicate".into())));
        assert!(!s.evaluate().unwrap());
        assert!(matches!(w.start(&Task::train("nope", "x")), Err(EnvError::UnknownTask(_))));
    }

    #[test]
    fn naive_agent_solves_every_seed_task() {
        let w = ToyWorld::bundled();
        let agent = ScriptedAgent::new(Arc::clone(&w.fixture), AgentMode::Naive);
        let expected_steps = [6, 4, 5, 5, 5, 5];
        for (task, n) in w.fixture.seed_tasks().iter().zip(expected_steps) {
            let t = rollout_one(task, &agent, &w, &Guidance::default(), settings(), 1).unwrap();
            assert!(t.success, "{} failed: {:?}", task.id, t.steps);
            assert_eq!(t.steps.len(), n, "{}", task.id);
        }
    }

    #[test]
    fn skill_hints_save_the_failed_call() {
        let w = ToyWorld::bundled();
        let agent = ScriptedAgent::new(Arc::clone(&w.fixture), AgentMode::SkillAware);
        let g = Guidance { skill_prompt: "### s\nd\n```\nlogin(username=username, password=password)\nlist_playlists(page=page)\n```\n".into(), ..Default::default() };
        let t = rollout_one(&w.fixture.seed_tasks()[0], &agent, &w, &g, settings(), 1).unwrap();
        assert!(t.success);
        assert_eq!(t.steps.len(), 5);
        assert!(t.steps.iter().all(|s| s.outcome == ToolOutcome::Success));
        let from_plan = login_gated_tools("### plan:T1\n# step 1: search songs; apis: search_songs\n# step 2: list playlists; apis: login, list_playlists\n");
        assert_eq!(from_plan.into_iter().collect::<Vec<_>>(), ["list_playlists"]);
    }

    #[test]
    fn replay_is_byte_identical() {
        let w = ToyWorld::bundled();
        let agent = ScriptedAgent::new(Arc::clone(&w.fixture), AgentMode::Naive);
        let task = &w.fixture.seed_tasks()[4];
        let t = rollout_one(task, &agent, &w, &Guidance::default(), settings(), 1).unwrap();
        let mut s = w.start(task).unwrap();
        for step in &t.steps {
            assert_eq!(s.step(&step.action).unwrap().0, step.observation);
        }
    }

    #[test]
    fn synthesized_tasks_register_and_exploration_hits_targets() {
        let w = ToyWorld::bundled();
        let agent = ScriptedAgent::new(Arc::clone(&w.fixture), AgentMode::Naive);
        let task = Task { split: crate::task::Split::Synthesized, ..Task::train("S1", "Use archive_file and then send_message with the usual arguments.") };
        w.prepare_task(&task).unwrap();
        let t = rollout_one(&task, &agent, &w, &Guidance::default(), settings(), 1).unwrap();
        assert!(t.success);
        assert!(w.prepare_task(&Task::train("S2", "nothing here")).is_err());
        let g = Guidance { exploration_targets: vec!["delete_message".into(), "list_files".into()], ..Default::default() };
        let t = rollout_one(&w.fixture.seed_tasks()[0], &agent, &w, &g, settings(), 1).unwrap();
        assert!(t.invokes("delete_message") && t.tools_succeeded().contains(&"list_files".to_string()));
    }

    #[test]
    fn lookup_paths() {
        let v = json!({"a": {"b": [{"t": "x"}, {"t": "y"}]}});
        assert_eq!(lookup(&v, "a.b.1.t"), Some(json!("y")));
        assert_eq!(lookup(&v, "a.b.*.t"), Some(json!("x, y")));
        assert_eq!(lookup(&v, "a.c"), None);
    }
}
