//! C interface to `ade-core`.
//!
//! Every fallible function returns an [`AdeStatus`]. On failure the message
//! is available from [`ade_last_error`] on the same thread until the next
//! failing call. Objects cross the boundary as opaque handles that the
//! caller releases with the matching `_free` function; passing NULL to a
//! `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ade_core::cli::{self, Checkpoint, ExperimentConfig, SurgeryArgs};
use ade_core::data::Corpus;
use ade_core::model::Model;
use ade_core::surgery::{self, AdjustMode, ImportanceReport, InitStrategy, Ranking};
use ade_core::AdeError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Usage = 5,
    Shape = 6,
    NonFinite = 7,
    Degenerate = 8,
    Integrity = 9,
    Format = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdeAdjustMode {
    FreezeOnly = 0,
    ExpandOnly = 1,
    FreezeAndExpand = 2,
}

/// Initialization of blocks added by expansion. The random variants use a
/// gain of 1.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdeInit {
    RandomScaled = 0,
    CopyPrevious = 1,
    IdentityZeroOut = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdeModelInfo {
    pub n_blocks: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_params: usize,
    pub n_trainable: usize,
    pub has_lora: bool,
}

/// One row of an importance report. `block_index` is 1-based and compares
/// the inputs of blocks `block_index` and `block_index + 1`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdeImportanceEntry {
    pub block_index: usize,
    pub mean_cos: f64,
    pub var_cos: f64,
    pub metric: f64,
    pub n_samples: usize,
}

/// Experiment configuration.
pub struct AdeConfig(ExperimentConfig);

/// A model, possibly carrying a freeze mask or LoRA adapters.
pub struct AdeModel(Model);

/// Block importance report.
pub struct AdeImportance(ImportanceReport);

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Buffer { needed: usize, given: usize },
    Core(AdeError),
}

impl From<AdeError> for Failure {
    fn from(e: AdeError) -> Self {
        Failure::Core(e)
    }
}

fn core_status(e: &AdeError) -> AdeStatus {
    match e {
        AdeError::Shape { .. } => AdeStatus::Shape,
        AdeError::Config { .. } => AdeStatus::Config,
        AdeError::Data { .. } => AdeStatus::Data,
        AdeError::Usage(_) => AdeStatus::Usage,
        AdeError::Degenerate(_) => AdeStatus::Degenerate,
        AdeError::NonFinite { .. } => AdeStatus::NonFinite,
        AdeError::Integrity { .. } => AdeStatus::Integrity,
        AdeError::Format(_) => AdeStatus::Format,
        AdeError::Stage { source, .. } => core_status(source),
        AdeError::Io { .. } => AdeStatus::Io,
    }
}

impl Failure {
    fn status(&self) -> AdeStatus {
        match self {
            Failure::Null(_) => AdeStatus::NullPointer,
            Failure::Utf8(_) => AdeStatus::InvalidUtf8,
            Failure::Buffer { .. } => AdeStatus::BufferTooSmall,
            Failure::Core(e) => core_status(e),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Null(arg) => format!("`{arg}` is NULL"),
            Failure::Utf8(arg) => format!("`{arg}` is not valid UTF-8"),
            Failure::Buffer { needed, given } => format!("buffer holds {given} elements, {needed} needed"),
            Failure::Core(e) => e.to_string(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdeStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(fail.message());
            fail.status()
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            AdeStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, arg: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(arg))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, arg: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(arg))
}

unsafe fn text<'a>(p: *const c_char, arg: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(arg));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(arg))
}

unsafe fn path(p: *const c_char, arg: &'static str) -> Result<PathBuf, Failure> {
    text(p, arg).map(PathBuf::from)
}

unsafe fn optional_path(p: *const c_char, arg: &'static str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        path(p, arg).map(Some)
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, arg: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(arg));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ade_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn ade_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn ade_status_name(status: AdeStatus) -> *const c_char {
    let name: &'static str = match status {
        AdeStatus::Ok => "ok\0",
        AdeStatus::NullPointer => "null pointer\0",
        AdeStatus::InvalidUtf8 => "invalid utf-8\0",
        AdeStatus::Config => "config\0",
        AdeStatus::Data => "data\0",
        AdeStatus::Usage => "usage\0",
        AdeStatus::Shape => "shape\0",
        AdeStatus::NonFinite => "non-finite\0",
        AdeStatus::Degenerate => "degenerate\0",
        AdeStatus::Integrity => "integrity\0",
        AdeStatus::Format => "format\0",
        AdeStatus::Io => "io\0",
        AdeStatus::BufferTooSmall => "buffer too small\0",
        AdeStatus::Panic => "panic\0",
    };
    name.as_ptr().cast()
}

/// Minutes-scale built-in config.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn ade_config_tiny(out: *mut *mut AdeConfig) -> AdeStatus {
    guard(|| put(out, AdeConfig(ExperimentConfig::tiny())))
}

/// Desk-scale built-in config.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn ade_config_desk(out: *mut *mut AdeConfig) -> AdeStatus {
    guard(|| put(out, AdeConfig(ExperimentConfig::desk())))
}

/// Reads and validates a TOML config file.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ade_config_load(file: *const c_char, out: *mut *mut AdeConfig) -> AdeStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&path(file, "file")?)?;
        put(out, AdeConfig(cfg))
    })
}

/// Writes the config as TOML.
///
/// # Safety
/// `config` must come from this library and `file` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ade_config_save(config: *const AdeConfig, file: *const c_char) -> AdeStatus {
    guard(|| {
        let cfg = borrow(config, "config")?;
        let p = path(file, "file")?;
        std::fs::write(&p, cfg.0.to_toml()).map_err(|e| AdeError::io(p, e))?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ade_config_set_seed(config: *mut AdeConfig, seed: u64) -> AdeStatus {
    guard(|| {
        borrow_mut(config, "config")?.0.seed = seed;
        Ok(())
    })
}

/// Writes the 64-character hex config hash and a terminating NUL, so `buf`
/// needs room for 65 bytes.
///
/// # Safety
/// `config` must come from this library and `buf` be writable for `cap`
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn ade_config_hash(config: *const AdeConfig, buf: *mut c_char, cap: usize) -> AdeStatus {
    guard(|| {
        let hash = borrow(config, "config")?.0.hash();
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        let needed = hash.len() + 1;
        if cap < needed {
            return Err(Failure::Buffer { needed, given: cap });
        }
        std::ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ade_config_free(config: *mut AdeConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// A freshly initialized model with the config's architecture.
///
/// # Safety
/// `config` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ade_model_init(config: *const AdeConfig, seed: u64, out: *mut *mut AdeModel) -> AdeStatus {
    guard(|| {
        let cfg = borrow(config, "config")?;
        put(out, AdeModel(Model::init(cfg.0.model.clone(), seed)?))
    })
}

/// Loads the model from a checkpoint, verifying its content hash.
///
/// # Safety
/// `file` must be NUL-terminated and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ade_model_load(file: *const c_char, out: *mut *mut AdeModel) -> AdeStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&path(file, "file")?)?;
        put(out, AdeModel(ckpt.model))
    })
}

/// Saves the model as a checkpoint stamped with `config`, which may be
/// NULL.
///
/// # Safety
/// `model` must come from this library, `config` be NULL or come from this
/// library, and `file` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ade_model_save(
    model: *const AdeModel,
    config: *const AdeConfig,
    file: *const c_char,
) -> AdeStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let cfg = config.as_ref().map(|c| &c.0);
        Checkpoint::new(m.0.clone(), cfg).save(&path(file, "file")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `out` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ade_model_info(model: *const AdeModel, out: *mut AdeModelInfo) -> AdeStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let out = borrow_mut(out, "out")?;
        *out = AdeModelInfo {
            n_blocks: m.n_blocks(),
            d_model: m.config.d_model,
            vocab_size: m.config.vocab_size,
            max_seq_len: m.config.max_seq_len,
            n_params: m.param_count(),
            n_trainable: m.trainable_param_count(),
            has_lora: m.lora.is_some(),
        };
        Ok(())
    })
}

/// Next-token logits for one sequence, row-major `[n_tokens, vocab_size]`.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids and `logits` be writable for `cap`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn ade_model_logits(
    model: *const AdeModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f32,
    cap: usize,
) -> AdeStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let toks = slice(tokens, n_tokens, "tokens")?;
        let needed = n_tokens * m.config.vocab_size;
        if logits.is_null() {
            return Err(Failure::Null("logits"));
        }
        if cap < needed {
            return Err(Failure::Buffer { needed, given: cap });
        }
        let out = m.forward(toks, false)?.logits;
        std::ptr::copy_nonoverlapping(out.data().as_ptr(), logits, needed);
        Ok(())
    })
}

/// Splits a flat token buffer into sequences of the given lengths.
unsafe fn sequences(tokens: *const u32, lengths: *const usize, n_seqs: usize) -> Result<Vec<Vec<u32>>, Failure> {
    let lens = slice(lengths, n_seqs, "lengths")?;
    let total = lens.iter().sum();
    let flat = slice(tokens, total, "tokens")?;
    let mut out = Vec::with_capacity(n_seqs);
    let mut at = 0;
    for &l in lens {
        out.push(flat[at..at + l].to_vec());
        at += l;
    }
    Ok(out)
}

/// Token-level perplexity over sequences packed back to back in `tokens`,
/// sequence `i` having `lengths[i]` tokens.
///
/// # Safety
/// `lengths` must hold `n_seqs` values, `tokens` their sum, and `out` be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ade_model_perplexity(
    model: *const AdeModel,
    tokens: *const u32,
    lengths: *const usize,
    n_seqs: usize,
    out: *mut f64,
) -> AdeStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let corpus = Corpus::new("ffi", sequences(tokens, lengths, n_seqs)?, "caller");
        *borrow_mut(out, "out")? = ade_core::eval::perplexity(m, &corpus)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ade_model_free(model: *mut AdeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Angular-distance importance of every consecutive block pair over a
/// `fraction` subsample (chosen with `seed`) of the given sequences.
///
/// # Safety
/// As for [`ade_model_perplexity`]; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ade_importance_compute(
    model: *const AdeModel,
    tokens: *const u32,
    lengths: *const usize,
    n_seqs: usize,
    fraction: f64,
    seed: u64,
    out: *mut *mut AdeImportance,
) -> AdeStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let seqs = sequences(tokens, lengths, n_seqs)?;
        put(out, AdeImportance(surgery::block_importance(m, &seqs, fraction, seed)?))
    })
}

/// Reads an importance CSV as written by the `importance` command.
///
/// # Safety
/// `file` must be NUL-terminated and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ade_importance_load(file: *const c_char, out: *mut *mut AdeImportance) -> AdeStatus {
    guard(|| {
        let p = path(file, "file")?;
        let text = std::fs::read_to_string(&p).map_err(|e| AdeError::io(p, e))?;
        put(out, AdeImportance(ImportanceReport::from_csv(&text)?))
    })
}

/// Number of rows, one per consecutive block pair.
///
/// # Safety
/// `report` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ade_importance_len(report: *const AdeImportance, out: *mut usize) -> AdeStatus {
    guard(|| {
        *borrow_mut(out, "out")? = borrow(report, "report")?.0.entries.len();
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ade_importance_entry(
    report: *const AdeImportance,
    index: usize,
    out: *mut AdeImportanceEntry,
) -> AdeStatus {
    guard(|| {
        let r = &borrow(report, "report")?.0;
        let e = r
            .entries
            .get(index)
            .ok_or_else(|| AdeError::usage(format!("row {index} of {}", r.entries.len())))?;
        *borrow_mut(out, "out")? = AdeImportanceEntry {
            block_index: e.block_index,
            mean_cos: e.mean_cos,
            var_cos: e.var_cos,
            metric: e.metric,
            n_samples: e.n_samples,
        };
        Ok(())
    })
}

/// The `k` blocks with the highest metric, 1-based and ascending.
///
/// # Safety
/// `report` must come from this library and `blocks` be writable for `cap`
/// values.
#[no_mangle]
pub unsafe extern "C" fn ade_importance_top_k(
    report: *const AdeImportance,
    k: usize,
    blocks: *mut usize,
    cap: usize,
) -> AdeStatus {
    guard(|| {
        let r = &borrow(report, "report")?.0;
        let top = surgery::select_top_k(r, k, Ranking::HighestMetric)?;
        if blocks.is_null() {
            return Err(Failure::Null("blocks"));
        }
        if cap < top.len() {
            return Err(Failure::Buffer {
                needed: top.len(),
                given: cap,
            });
        }
        std::ptr::copy_nonoverlapping(top.as_ptr(), blocks, top.len());
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ade_importance_free(report: *mut AdeImportance) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Selects the top `k` blocks of `report` and returns a new model with the
/// blocks expanded and/or the rest frozen. The input model is unchanged.
///
/// # Safety
/// `model` and `report` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ade_surgery_apply(
    model: *const AdeModel,
    report: *const AdeImportance,
    k: usize,
    mode: AdeAdjustMode,
    init: AdeInit,
    seed: u64,
    out: *mut *mut AdeModel,
) -> AdeStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let r = &borrow(report, "report")?.0;
        let (adjusted, _, _) =
            surgery::prepare_ade_model(m, r, k, Ranking::HighestMetric, mode.into(), init.into(), seed)?;
        put(out, AdeModel(adjusted))
    })
}

impl From<AdeAdjustMode> for AdjustMode {
    fn from(m: AdeAdjustMode) -> Self {
        match m {
            AdeAdjustMode::FreezeOnly => AdjustMode::FreezeOnly,
            AdeAdjustMode::ExpandOnly => AdjustMode::ExpandOnly,
            AdeAdjustMode::FreezeAndExpand => AdjustMode::FreezeAndExpand,
        }
    }
}

impl From<AdeInit> for InitStrategy {
    fn from(i: AdeInit) -> Self {
        match i {
            AdeInit::RandomScaled => InitStrategy::RandomScaled { gain: 1.0 },
            AdeInit::CopyPrevious => InitStrategy::CopyPrevious,
            AdeInit::IdentityZeroOut => InitStrategy::IdentityZeroOut { gain: 1.0 },
        }
    }
}

/// Runs the `importance` command into `out_dir`.
///
/// # Safety
/// `config` must come from this library; the paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ade_cmd_importance(
    config: *const AdeConfig,
    checkpoint: *const c_char,
    out_dir: *const c_char,
) -> AdeStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.0;
        cli::cmd_importance(cfg, &path(checkpoint, "checkpoint")?, None, &path(out_dir, "out_dir")?)?;
        Ok(())
    })
}

/// Runs the `surgery` command with the config's ADE settings.
///
/// # Safety
/// `config` must come from this library; the paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ade_cmd_surgery(
    config: *const AdeConfig,
    checkpoint: *const c_char,
    out_dir: *const c_char,
) -> AdeStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.0;
        cli::cmd_surgery(
            cfg,
            &path(checkpoint, "checkpoint")?,
            SurgeryArgs::default(),
            &path(out_dir, "out_dir")?,
        )?;
        Ok(())
    })
}

/// Runs the `train` command for the config's arm. `checkpoint` and
/// `resume` may be NULL.
///
/// # Safety
/// `config` must come from this library; non-NULL paths must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ade_cmd_train(
    config: *const AdeConfig,
    checkpoint: *const c_char,
    resume: *const c_char,
    out_dir: *const c_char,
) -> AdeStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.0;
        let ckpt = optional_path(checkpoint, "checkpoint")?;
        let resume = optional_path(resume, "resume")?;
        cli::cmd_train(cfg, ckpt.as_deref(), resume.as_deref(), &path(out_dir, "out_dir")?)?;
        Ok(())
    })
}

/// Runs the `eval` command. `reference` may be NULL.
///
/// # Safety
/// `config` must come from this library; non-NULL paths must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ade_cmd_eval(
    config: *const AdeConfig,
    checkpoint: *const c_char,
    reference: *const c_char,
    out_dir: *const c_char,
) -> AdeStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.0;
        let reference = optional_path(reference, "reference")?;
        cli::cmd_eval(
            cfg,
            &path(checkpoint, "checkpoint")?,
            reference.as_deref(),
            &path(out_dir, "out_dir")?,
        )?;
        Ok(())
    })
}

/// Runs the full reproduce grid. `passed` receives whether every check in
/// `acceptance.txt` passed.
///
/// # Safety
/// `config` must come from this library, `out_dir` be NUL-terminated and
/// `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn ade_cmd_reproduce(
    config: *const AdeConfig,
    out_dir: *const c_char,
    passed: *mut bool,
) -> AdeStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.0;
        let flag = borrow_mut(passed, "passed")?;
        *flag = cli::cmd_reproduce(cfg, &path(out_dir, "out_dir")?)?.passed();
        Ok(())
    })
}
