//! C ABI over the sorex library.
//!
//! Every fallible function returns a [`SorexStatus`]; on failure the
//! message is available from [`sorex_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use sorex::config::RunConfig;
use sorex::evaluation::{hit_at, ndcg_at, score_task, EvalKey, UserTask};
use sorex::graph::{read_cache, PreparedData};
use sorex::model::Model;
use sorex::training::checkpoint::Checkpoint;
use sorex::SorexError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SorexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Format = 5,
    Config = 6,
    DigestMismatch = 7,
    OutOfRange = 8,
    NonFinite = 9,
    Internal = 10,
}

/// Prepared graph and split, read from a graph cache file.
pub struct SorexGraph {
    data: PreparedData,
}

/// Trained model bound to its training graph.
pub struct SorexModel {
    model: Model,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &SorexError) -> SorexStatus {
    match err {
        SorexError::Io { .. } => SorexStatus::Io,
        SorexError::Parse { .. } => SorexStatus::Parse,
        SorexError::Format(_) => SorexStatus::Format,
        SorexError::DigestMismatch { .. } => SorexStatus::DigestMismatch,
        SorexError::NonFinite(_) => SorexStatus::NonFinite,
        SorexError::Config(_) | SorexError::InvalidRatios(_) | SorexError::EmptyGraph { .. } => SorexStatus::Config,
        _ => SorexStatus::Internal,
    }
}

struct Failure(SorexStatus, String);

impl From<SorexError> for Failure {
    fn from(e: SorexError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SorexStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SorexStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SorexStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(SorexStatus::NullPointer, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure(SorexStatus::InvalidUtf8, format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(SorexStatus::NullPointer, format!("{name} is null")))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(SorexStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sorex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn sorex_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Reads a graph cache written by `sorex prepare`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sorex_graph_load(path: *const c_char, out: *mut *mut SorexGraph) -> SorexStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let data = read_cache(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SorexGraph { data }));
        Ok(())
    })
}

/// Writes the user and item counts.
///
/// # Safety
/// `graph` must come from [`sorex_graph_load`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sorex_graph_counts(graph: *const SorexGraph, users: *mut usize, items: *mut usize) -> SorexStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        out_ptr(users, "users")?;
        out_ptr(items, "items")?;
        *users = g.data.graph.num_users();
        *items = g.data.graph.num_items();
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`sorex_graph_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn sorex_graph_free(graph: *mut SorexGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Loads a checkpoint against the run configuration that produced it.
/// `config_path` may be NULL for defaults. The checkpoint digest must
/// match the configuration.
///
/// # Safety
/// Paths must be NUL-terminated strings; `graph` a live handle; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sorex_model_load(
    config_path: *const c_char,
    graph: *const SorexGraph,
    checkpoint_path: *const c_char,
    out: *mut *mut SorexModel,
) -> SorexStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let g = handle(graph, "graph")?;
        let config = if config_path.is_null() { None } else { Some(path_arg(config_path, "config_path")?) };
        let cfg = RunConfig::load(config.as_deref(), &[])?;
        let ckpt = Checkpoint::load(&path_arg(checkpoint_path, "checkpoint_path")?, &cfg.model_digest())?;
        if ckpt.m != g.data.graph.num_users() || ckpt.n != g.data.graph.num_items() {
            return Err(Failure(SorexStatus::Format, "checkpoint shape does not match the graph".into()));
        }
        let model = Model::new(cfg.model_config(), Arc::new(g.data.train_graph()), ckpt.emb);
        *out = Box::into_raw(Box::new(SorexModel { model, seed: cfg.seed }));
        Ok(())
    })
}

/// Scores `count` items for `user` as the evaluator does: one walk pool
/// for the user and one explanation draw per item, from streams keyed by
/// the run seed.
///
/// # Safety
/// `model` must be live; `items` and `scores` must hold `count` elements.
#[no_mangle]
pub unsafe extern "C" fn sorex_model_score(
    model: *const SorexModel,
    user: u32,
    items: *const u32,
    count: usize,
    scores: *mut f64,
) -> SorexStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if count > 0 && (items.is_null() || scores.is_null()) {
            return Err(Failure(SorexStatus::NullPointer, "items or scores is null".into()));
        }
        let g = &m.model.graph;
        if user as usize >= g.num_users() {
            return Err(Failure(SorexStatus::OutOfRange, format!("user {user} >= {}", g.num_users())));
        }
        let items = if count == 0 { &[][..] } else { std::slice::from_raw_parts(items, count) };
        if let Some(bad) = items.iter().find(|&&j| j as usize >= g.num_items()) {
            return Err(Failure(SorexStatus::OutOfRange, format!("item {bad} >= {}", g.num_items())));
        }
        let task = UserTask { user, truths: Vec::new(), candidates: items.to_vec() };
        let scored = score_task(&m.model.scorer(), &task, EvalKey { seed: m.seed, salt: 0 }, 0);
        for (i, (_, s)) in scored.into_iter().enumerate() {
            *scores.add(i) = s;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`sorex_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn sorex_model_free(model: *mut SorexModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// NDCG@k of a single relevant item at 1-based `rank`.
#[no_mangle]
pub extern "C" fn sorex_ndcg_at(rank: usize, k: usize) -> f64 {
    ndcg_at(rank, k)
}

/// 1 if 1-based `rank` is within `k`, else 0.
#[no_mangle]
pub extern "C" fn sorex_hit_at(rank: usize, k: usize) -> f64 {
    hit_at(rank, k)
}
