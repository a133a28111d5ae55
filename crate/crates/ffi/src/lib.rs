//! C ABI over the skill library store, validation, retrieval and the CLI.
//!
//! Every function returns an [`SkbStatus`]; on failure the message is kept
//! per thread and read with [`skb_last_error`]. Strings handed out by this
//! library are freed with [`skb_string_free`], handles with their own
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use skillkb::config::PipelineConfig;
use skillkb::gateway::{HashEmbedder, MockChat, MockTable};
use skillkb::refinement::filter::tool_schema_static_check;
use skillkb::retrieval::{assemble_prompt, LibraryIndex, RetrievalBundle};
use skillkb::skill::{validate_skill, SkillLevel, SkillLibrary};
use skillkb::store::{self, StoreError};
use skillkb::templates::TemplateSet;
use skillkb::vector::EmbeddingCache;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    NotFound = 3,
    Io = 4,
    Format = 5,
    Version = 6,
    Invalid = 7,
    Gateway = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: SkbStatus, msg: impl Into<String>) -> SkbStatus {
    set_error(msg);
    status
}

fn store_status(e: &StoreError) -> SkbStatus {
    match e {
        StoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => SkbStatus::NotFound,
        StoreError::Io { .. } => SkbStatus::Io,
        StoreError::Format { .. } => SkbStatus::Format,
        StoreError::Version { .. } => SkbStatus::Version,
        StoreError::Validation { .. } | StoreError::DuplicateTool { .. } => SkbStatus::Invalid,
    }
}

fn guard(f: impl FnOnce() -> SkbStatus) -> SkbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SkbStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(SkbStatus::Panic, "internal panic"),
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, SkbStatus> {
    if p.is_null() {
        return Err(fail(SkbStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(SkbStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn give_string(s: String, out: *mut *mut c_char) -> SkbStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for null before reaching here
            unsafe { *out = c.into_raw() };
            SkbStatus::Ok
        }
        Err(_) => fail(SkbStatus::Invalid, "string contains a NUL byte"),
    }
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library; valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn skb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Free a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn skb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque library handle.
pub struct SkbLibrary {
    library: SkillLibrary,
}

/// Load a library file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skb_library_load(path: *const c_char, out: *mut *mut SkbLibrary) -> SkbStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkbStatus::NullArgument, "out is null");
        }
        let path = match arg_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match store::load_library(&PathBuf::from(path)) {
            Ok(l) => {
                *out = Box::into_raw(Box::new(SkbLibrary { library: l.library }));
                SkbStatus::Ok
            }
            Err(e) => fail(store_status(&e), e.to_string()),
        }
    })
}

/// A new empty library.
#[no_mangle]
pub extern "C" fn skb_library_new() -> *mut SkbLibrary {
    Box::into_raw(Box::new(SkbLibrary { library: SkillLibrary::new() }))
}

/// # Safety
/// `lib` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn skb_library_free(lib: *mut SkbLibrary) {
    if !lib.is_null() {
        drop(Box::from_raw(lib));
    }
}

/// Number of skills, optionally at one level (0 planning, 1 functional,
/// 2 atomic, any other value for all levels). Returns -1 on a null handle.
///
/// # Safety
/// `lib` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn skb_library_len(lib: *const SkbLibrary, level: c_int) -> c_int {
    let Some(lib) = lib.as_ref() else { return -1 };
    let n = match usize::try_from(level).ok().and_then(|i| SkillLevel::ALL.get(i)) {
        Some(l) => lib.library.count_at(*l),
        None => lib.library.len(),
    };
    c_int::try_from(n).unwrap_or(c_int::MAX)
}

/// Save in canonical form; `digest_out`, when non-null, receives the
/// sha256 of the written bytes.
///
/// # Safety
/// `lib` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn skb_library_save(lib: *const SkbLibrary, path: *const c_char, digest_out: *mut *mut c_char) -> SkbStatus {
    guard(|| {
        let Some(lib) = lib.as_ref() else { return fail(SkbStatus::NullArgument, "library is null") };
        let path = match arg_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match store::save_library(&lib.library, &PathBuf::from(path), None) {
            Ok(d) if !digest_out.is_null() => give_string(d, digest_out),
            Ok(_) => SkbStatus::Ok,
            Err(e) => fail(store_status(&e), e.to_string()),
        }
    })
}

/// Canonical JSON text of the library.
///
/// # Safety
/// `lib` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn skb_library_to_json(lib: *const SkbLibrary, out: *mut *mut c_char) -> SkbStatus {
    guard(|| {
        let Some(lib) = lib.as_ref() else { return fail(SkbStatus::NullArgument, "library is null") };
        if out.is_null() {
            return fail(SkbStatus::NullArgument, "out is null");
        }
        match String::from_utf8(store::library_bytes(&lib.library, None)) {
            Ok(s) => give_string(s, out),
            Err(_) => fail(SkbStatus::Invalid, "library text is not UTF-8"),
        }
    })
}

/// Structural and static schema checks on every skill. `violations_out`
/// receives the count and `report_out`, when non-null, one line per
/// violation.
///
/// # Safety
/// `lib` must be a live handle; `schemas_path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn skb_library_validate(
    lib: *const SkbLibrary,
    schemas_path: *const c_char,
    violations_out: *mut usize,
    report_out: *mut *mut c_char,
) -> SkbStatus {
    guard(|| {
        let Some(lib) = lib.as_ref() else { return fail(SkbStatus::NullArgument, "library is null") };
        if violations_out.is_null() {
            return fail(SkbStatus::NullArgument, "violations_out is null");
        }
        let path = match arg_str(schemas_path, "schemas_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let schemas = match store::load_tool_schemas(&PathBuf::from(path)) {
            Ok(s) => s,
            Err(e) => return fail(store_status(&e), e.to_string()),
        };
        let mut lines = Vec::new();
        for s in lib.library.skills.values() {
            lines.extend(validate_skill(s).into_iter().map(|v| format!("{}: {v}", s.name)));
            if s.level != SkillLevel::Planning {
                lines.extend(tool_schema_static_check(s, &schemas).into_iter().map(|v| format!("{}: {v}", s.name)));
            }
        }
        *violations_out = lines.len();
        if report_out.is_null() {
            SkbStatus::Ok
        } else {
            give_string(lines.join("\n"), report_out)
        }
    })
}

/// Opaque retriever: an index over a library plus offline gateways.
pub struct SkbRetriever {
    chat: MockChat,
    embedder: HashEmbedder,
    cache: EmbeddingCache,
    templates: TemplateSet,
    config: PipelineConfig,
    index: Option<LibraryIndex>,
}

/// Build a retriever over a copy of `lib` using the offline mock chat
/// gateway (table at `mock_table_path`, or the scripted responder when
/// null) and the hash embedder.
///
/// # Safety
/// `lib` must be a live handle; `mock_table_path` null or a NUL-terminated
/// string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn skb_retriever_new(
    lib: *const SkbLibrary,
    mock_table_path: *const c_char,
    seed: u64,
    out: *mut *mut SkbRetriever,
) -> SkbStatus {
    guard(|| {
        let Some(lib) = lib.as_ref() else { return fail(SkbStatus::NullArgument, "library is null") };
        if out.is_null() {
            return fail(SkbStatus::NullArgument, "out is null");
        }
        let chat = if mock_table_path.is_null() {
            MockChat::scripted()
        } else {
            let path = match arg_str(mock_table_path, "mock_table_path") {
                Ok(p) => p,
                Err(s) => return s,
            };
            match MockTable::load(&PathBuf::from(path)) {
                Ok(t) => MockChat::new(t),
                Err(e) => return fail(SkbStatus::Format, e),
            }
        };
        let mut config = PipelineConfig { seed, ..PipelineConfig::default() };
        config.hnsw.seed = seed;
        let embedder = HashEmbedder::new(config.gateway.embed_dimension, seed);
        let cache = EmbeddingCache::new();
        let index = if lib.library.is_empty() {
            None
        } else {
            match LibraryIndex::build(&lib.library, &embedder, &cache, config.hnsw) {
                Ok(i) => Some(i),
                Err(e) => return fail(SkbStatus::Gateway, e.to_string()),
            }
        };
        *out = Box::into_raw(Box::new(SkbRetriever { chat, embedder, cache, templates: TemplateSet::builtin(), config, index }));
        SkbStatus::Ok
    })
}

/// # Safety
/// `r` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn skb_retriever_free(r: *mut SkbRetriever) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Retrieve for `query`. `bundle_out` receives the bundle JSON
/// `{plan_steps, selected, trace}`; `prompt_out`, when non-null, the
/// assembled skill prompt.
///
/// # Safety
/// `r` must be a live handle; `query` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn skb_retriever_retrieve(
    r: *const SkbRetriever,
    query: *const c_char,
    bundle_out: *mut *mut c_char,
    prompt_out: *mut *mut c_char,
) -> SkbStatus {
    guard(|| {
        let Some(r) = r.as_ref() else { return fail(SkbStatus::NullArgument, "retriever is null") };
        if bundle_out.is_null() {
            return fail(SkbStatus::NullArgument, "bundle_out is null");
        }
        let query = match arg_str(query, "query") {
            Ok(q) => q,
            Err(s) => return s,
        };
        let bundle = match &r.index {
            Some(index) => {
                let retriever = skillkb::retrieval::Retriever {
                    chat: &r.chat,
                    embedder: &r.embedder,
                    cache: &r.cache,
                    templates: &r.templates,
                    index,
                    config: r.config.retrieval,
                };
                match retriever.retrieve(query) {
                    Ok(b) => b,
                    Err(e) => return fail(SkbStatus::Gateway, e.to_string()),
                }
            }
            None => RetrievalBundle::default(),
        };
        let status = give_string(store::canonical_json(&bundle.to_json()), bundle_out);
        if status != SkbStatus::Ok || prompt_out.is_null() {
            return status;
        }
        let (prompt, _) = assemble_prompt(&bundle, r.config.retrieval.include_plans_in_prompt);
        give_string(prompt, prompt_out)
    })
}

/// Run the command line with `argv` (program name first). The exit code
/// is returned through `exit_out` and the printed text through
/// `stdout_out`.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn skb_cli_run(argc: c_int, argv: *const *const c_char, exit_out: *mut c_int, stdout_out: *mut *mut c_char) -> SkbStatus {
    guard(|| {
        if argv.is_null() || exit_out.is_null() || stdout_out.is_null() {
            return fail(SkbStatus::NullArgument, "argv and outputs must be non-null");
        }
        let mut args = Vec::new();
        for i in 0..usize::try_from(argc).unwrap_or(0) {
            match arg_str(*argv.add(i), "argv entry") {
                Ok(a) => args.push(a.to_string()),
                Err(s) => return s,
            }
        }
        let outcome = skillkb::cli::run_args(args);
        *exit_out = outcome.code;
        give_string(outcome.stdout, stdout_out)
    })
}
