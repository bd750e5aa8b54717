//! C ABI over the scoring engine.
//!
//! Every call returns an [`R2aStatus`]. On failure the message is kept per
//! thread and read back with [`r2a_last_error`]. Handles are opaque and must
//! be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use r2a_core::cli::{build_scorer, load_anchors};
use r2a_core::featureio::{DatasetManifest, FeatureArchive};
use r2a_core::metrics;
use r2a_core::residuals::MemoryBank;
use r2a_core::scoring::{Mode, Scorer};
use r2a_core::trainer::{self, TrainConfig};
use r2a_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum R2aStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Metric = 7,
    Panic = 8,
}

pub struct R2aArchive(FeatureArchive);

pub struct R2aScorer(Scorer);

pub struct R2aBank(MemoryBank);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct R2aArchiveInfo {
    pub dim: usize,
    pub num_layers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
}

/// Image-level branch scores and the fused score.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct R2aScores {
    pub s_text: f64,
    pub s_vis: f64,
    pub s_res: f64,
    pub s: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> R2aStatus {
    match err.root() {
        Error::Io(_) => R2aStatus::Io,
        Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::TruncatedFile { .. }
        | Error::TrailingData(_)
        | Error::BadFormat(_)
        | Error::UnknownEntry(_)
        | Error::Json(_) => R2aStatus::Format,
        Error::ShapeMismatch(_) | Error::ZeroNorm => R2aStatus::Shape,
        Error::ManifestInvalid(_) | Error::ConfigInvalid(_) => R2aStatus::Config,
        Error::SingleClass | Error::NoPositives | Error::NoRegions => R2aStatus::Metric,
        Error::GradMismatch { .. } | Error::Path { .. } => R2aStatus::InvalidArgument,
    }
}

struct Fail(R2aStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(R2aStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> R2aStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            R2aStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            R2aStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(R2aStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn r2a_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn r2a_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn r2a_archive_read(path: *const c_char, out: *mut *mut R2aArchive) -> R2aStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let a = FeatureArchive::read(&path)?;
        *out = Box::into_raw(Box::new(R2aArchive(a)));
        Ok(())
    })
}

/// Parses an archive from `len` bytes at `data`.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_archive_from_bytes(data: *const u8, len: usize, out: *mut *mut R2aArchive) -> R2aStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let bytes = slice_arg(data, len, "data")?;
        let a = FeatureArchive::from_bytes(bytes)?;
        *out = Box::into_raw(Box::new(R2aArchive(a)));
        Ok(())
    })
}

/// # Safety
/// `archive` must come from this library and `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn r2a_archive_write(archive: *const R2aArchive, path: *const c_char) -> R2aStatus {
    guard(|| {
        let a = ref_arg(archive, "archive")?;
        let path = path_arg(path, "path")?;
        a.0.write(&path)?;
        Ok(())
    })
}

/// # Safety
/// `archive` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_archive_info(archive: *const R2aArchive, out: *mut R2aArchiveInfo) -> R2aStatus {
    guard(|| {
        let a = &ref_arg(archive, "archive")?.0;
        *out_arg(out, "out")? = R2aArchiveInfo {
            dim: a.dim,
            num_layers: a.layer_ids.len(),
            grid_h: a.grid_h,
            grid_w: a.grid_w,
            image_h: a.image_h,
            image_w: a.image_w,
        };
        Ok(())
    })
}

/// # Safety
/// `archive` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn r2a_archive_free(archive: *mut R2aArchive) {
    if !archive.is_null() {
        drop(Box::from_raw(archive));
    }
}

/// Builds a scorer from a text-anchor file. A NULL `checkpoint` selects
/// identity mode; otherwise the checkpoint's adapters are loaded. `layer_ids`
/// lists the tapped layers of the archives that will be scored.
///
/// # Safety
/// Strings must be NUL-terminated, `layer_ids` must hold `num_layers` values
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_scorer_new(
    anchors_path: *const c_char,
    checkpoint_path: *const c_char,
    layer_ids: *const u32,
    num_layers: usize,
    out: *mut *mut R2aScorer,
) -> R2aStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let anchors_path = path_arg(anchors_path, "anchors_path")?;
        let checkpoint = if checkpoint_path.is_null() {
            None
        } else {
            Some(path_arg(checkpoint_path, "checkpoint_path")?)
        };
        let layers = slice_arg(layer_ids, num_layers, "layer_ids")?;
        let anchors = r2a_core::featureio::TextAnchorSet::read(&anchors_path)?;
        let mode = if checkpoint.is_some() { Mode::Learned } else { Mode::Identity };
        let scorer = build_scorer(&anchors, layers, mode, checkpoint.as_deref(), None, None)?;
        *out = Box::into_raw(Box::new(R2aScorer(scorer)));
        Ok(())
    })
}

/// # Safety
/// `scorer` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn r2a_scorer_free(scorer: *mut R2aScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Memory bank over `count` normal reference archives.
///
/// # Safety
/// `references` must hold `count` valid archive handles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_bank_new(
    scorer: *const R2aScorer,
    references: *const *const R2aArchive,
    count: usize,
    out: *mut *mut R2aBank,
) -> R2aStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let scorer = &ref_arg(scorer, "scorer")?.0;
        let handles = slice_arg(references, count, "references")?;
        let refs = handles
            .iter()
            .map(|&h| ref_arg(h, "reference").map(|a| &a.0))
            .collect::<Result<Vec<_>, _>>()?;
        let bank = scorer.build_bank(&refs)?;
        *out = Box::into_raw(Box::new(R2aBank(bank)));
        Ok(())
    })
}

/// # Safety
/// `bank` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn r2a_bank_free(bank: *mut R2aBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Scores `query` against `bank`. When `map` is not NULL it receives the
/// fused `image_h × image_w` anomaly map, row-major; `map_len` must match.
///
/// # Safety
/// Handles must come from this library, `scores` must be writable and `map`
/// must be NULL or hold `map_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn r2a_score(
    scorer: *const R2aScorer,
    bank: *const R2aBank,
    query: *const R2aArchive,
    scores: *mut R2aScores,
    map: *mut f32,
    map_len: usize,
) -> R2aStatus {
    guard(|| {
        let scorer = &ref_arg(scorer, "scorer")?.0;
        let bank = &ref_arg(bank, "bank")?.0;
        let query = &ref_arg(query, "query")?.0;
        let scores = out_arg(scores, "scores")?;
        let out = scorer.score(query, bank)?;
        if !map.is_null() {
            let data = out.m.data();
            if map_len != data.len() {
                return Err(Fail(
                    R2aStatus::InvalidArgument,
                    format!("map buffer holds {map_len} values, map has {}", data.len()),
                ));
            }
            std::slice::from_raw_parts_mut(map, map_len).copy_from_slice(data);
        }
        *scores = R2aScores {
            s_text: out.s_text,
            s_vis: out.s_vis,
            s_res: out.s_res,
            s: out.s,
        };
        Ok(())
    })
}

/// Trains adapters on the manifest's training split and writes the
/// checkpoint. `anchors_path` may be NULL to use the manifest's anchors;
/// `epochs` of 0 keeps the default.
///
/// # Safety
/// Strings must be NUL-terminated (or NULL where allowed).
#[no_mangle]
pub unsafe extern "C" fn r2a_train(
    manifest_path: *const c_char,
    anchors_path: *const c_char,
    checkpoint_path: *const c_char,
    seed: u64,
    epochs: usize,
) -> R2aStatus {
    guard(|| {
        let manifest = DatasetManifest::read(&path_arg(manifest_path, "manifest_path")?)?;
        let anchors_path = if anchors_path.is_null() {
            None
        } else {
            Some(path_arg(anchors_path, "anchors_path")?)
        };
        let out = path_arg(checkpoint_path, "checkpoint_path")?;
        let anchors = load_anchors(&manifest, anchors_path.as_deref())?;
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if epochs > 0 {
            cfg.epochs = epochs;
        }
        let trained = trainer::train(&manifest, &anchors, cfg)?;
        trained.checkpoint.write(&out)?;
        Ok(())
    })
}

type Metric = fn(&[f64], &[u8]) -> r2a_core::Result<f64>;

unsafe fn metric(f: Metric, scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> R2aStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        *out = f(s, l)?;
        Ok(())
    })
}

/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> R2aStatus {
    metric(metrics::auroc, scores, labels, n, out)
}

/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> R2aStatus {
    metric(metrics::average_precision, scores, labels, n, out)
}

/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_f1_max(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> R2aStatus {
    metric(metrics::f1_max, scores, labels, n, out)
}

/// Runs the built-in identity and oracle checks; `passed` receives 1 when
/// all of them pass.
///
/// # Safety
/// `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn r2a_verify(seed: u64, passed: *mut i32) -> R2aStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        *passed = i32::from(r2a_core::verify::run_all(seed).passed);
        Ok(())
    })
}
