//! C ABI over `attrib-core`.
//!
//! Every function returns an [`AttribStatus`]; on failure a message is kept
//! per thread and read back with [`attrib_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function. Strings returned through `char **` are owned by the
//! caller and released with [`attrib_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use attrib_core::classifiers::{self, checkpoint, ModelCheckpoint};
use attrib_core::config::ExperimentConfigFile;
use attrib_core::dataset::ManifestRow;
use attrib_core::experiments::{self, ConfusionMatrix};
use attrib_core::transforms::TransformSpec;
use attrib_core::{mllmattr, report, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttribStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Decode = 5,
    Checkpoint = 6,
    InsufficientData = 7,
    BufferTooSmall = 8,
    Training = 9,
    Internal = 10,
}

/// A loaded classifier checkpoint.
pub struct AttribCheckpoint {
    inner: ModelCheckpoint,
    labels: Vec<CString>,
}

/// A confusion matrix with its row and column normalizations.
pub struct AttribConfusion {
    inner: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> AttribStatus {
    match e {
        Error::Io { .. } => AttribStatus::Io,
        Error::Decode { .. } | Error::Channel(_) => AttribStatus::Decode,
        Error::Checkpoint(_) | Error::Json(_) => AttribStatus::Checkpoint,
        Error::InsufficientRows { .. } | Error::SingleClass(_) | Error::EmptyAxis { .. } => AttribStatus::InsufficientData,
        Error::NonFiniteLoss { .. } => AttribStatus::Training,
        Error::Shape { .. } | Error::SelfTest(_) => AttribStatus::Internal,
        _ => AttribStatus::InvalidArgument,
    }
}

struct Fail(AttribStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AttribStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AttribStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AttribStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AttribStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AttribStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(AttribStatus::Internal, "string contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_matrix(values: &[Vec<f64>], out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let n = values.len() * values.first().map_or(0, Vec::len);
    if len < n {
        return Err(Fail(AttribStatus::BufferTooSmall, format!("buffer holds {len} values, need {n}")));
    }
    for (i, v) in values.iter().flatten().enumerate() {
        *out.add(i) = *v;
    }
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn attrib_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attrib_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned through a `char **` out-parameter. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn attrib_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrib_checkpoint_load(path: *const c_char, out: *mut *mut AttribCheckpoint) -> AttribStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = checkpoint::load(Path::new(path))?;
        let labels = inner
            .labels
            .iter()
            .map(|l| CString::new(l.as_str()).map_err(|_| Fail(AttribStatus::Checkpoint, "label contains a nul byte".into())))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(AttribCheckpoint { inner, labels }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`attrib_checkpoint_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn attrib_checkpoint_free(h: *mut AttribCheckpoint) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live checkpoint handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrib_checkpoint_n_classes(h: *const AttribCheckpoint, out: *mut usize) -> AttribStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("checkpoint"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = h.inner.n_classes;
        Ok(())
    })
}

/// Borrowed label of class `index`, valid while the handle lives; null if
/// out of range.
///
/// # Safety
/// `h` must be a live checkpoint handle.
#[no_mangle]
pub unsafe extern "C" fn attrib_checkpoint_label(h: *const AttribCheckpoint, index: usize) -> *const c_char {
    match h.as_ref().and_then(|h| h.labels.get(index)) {
        Some(l) => l.as_ptr(),
        None => ptr::null(),
    }
}

/// Classifies one PNG or PPM image. Writes the predicted class to
/// `out_class` and, if `posteriors` is non-null, `n_classes` probabilities.
///
/// # Safety
/// `h` must be a live handle, `image_path` NUL-terminated, `out_class`
/// writable and `posteriors` either null or valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn attrib_checkpoint_predict_file(
    h: *const AttribCheckpoint,
    image_path: *const c_char,
    out_class: *mut usize,
    posteriors: *mut f64,
    len: usize,
) -> AttribStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("checkpoint"))?;
        let path = str_arg(image_path, "image_path")?;
        let out_class = out_class.as_mut().ok_or_else(|| null("out_class"))?;
        let row = ManifestRow::new(path, path, "", None, None, 0);
        let preds = classifiers::predict(&h.inner, Path::new(""), &[row], &TransformSpec::none().with_seed(h.inner.meta.seed))?;
        if !posteriors.is_null() {
            write_matrix(std::slice::from_ref(&preds.posteriors[0]), posteriors, len)?;
        }
        *out_class = preds.predicted[0];
        Ok(())
    })
}

/// Builds a matrix from `n * n` row-major counts (rows are true classes).
///
/// # Safety
/// `counts` must be valid for `n * n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrib_confusion_from_counts(counts: *const u64, n: usize, out: *mut *mut AttribConfusion) -> AttribStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err(Fail(AttribStatus::InvalidArgument, "matrix must have at least one class".into()));
        }
        let flat = std::slice::from_raw_parts(counts, n * n);
        let rows = flat.chunks(n).map(<[u64]>::to_vec).collect();
        let labels = (0..n).map(|i| i.to_string()).collect();
        *out = Box::into_raw(Box::new(AttribConfusion {
            inner: ConfusionMatrix::from_counts(labels, rows)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`attrib_confusion_from_counts`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn attrib_confusion_free(h: *mut AttribConfusion) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrib_confusion_accuracy(h: *const AttribConfusion, out: *mut f64) -> AttribStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("confusion"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = h.inner.accuracy();
        Ok(())
    })
}

/// Row-normalized percentages, row-major into `out[0..n*n]`.
///
/// # Safety
/// `h` must be a live handle; `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn attrib_confusion_recall(h: *const AttribConfusion, out: *mut f64, len: usize) -> AttribStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("confusion"))?;
        write_matrix(&experiments::recall_matrix(&h.inner)?, out, len)
    })
}

/// Column-normalized percentages, row-major into `out[0..n*n]`.
///
/// # Safety
/// `h` must be a live handle; `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn attrib_confusion_precision(h: *const AttribConfusion, out: *mut f64, len: usize) -> AttribStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("confusion"))?;
        write_matrix(&experiments::precision_matrix(&h.inner)?, out, len)
    })
}

/// The zero-shot attribution prompt for `n` candidate names.
///
/// # Safety
/// `candidates` must hold `n` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrib_zero_shot_prompt(candidates: *const *const c_char, n: usize, out: *mut *mut c_char) -> AttribStatus {
    guard(|| {
        if candidates.is_null() && n > 0 {
            return Err(null("candidates"));
        }
        let names = (0..n)
            .map(|i| str_arg(*candidates.add(i), "candidates[i]").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        out_string(out, mllmattr::build_zero_shot_prompt(&names)?)
    })
}

/// The yes/no domain question for `domain`.
///
/// # Safety
/// `domain` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrib_domain_question(domain: *const c_char, out: *mut *mut c_char) -> AttribStatus {
    guard(|| {
        let domain = str_arg(domain, "domain")?;
        out_string(out, mllmattr::build_domain_question(domain)?)
    })
}

/// Runs the experiment described by a TOML config file and writes its
/// report. `out_dir` may be null to use the config's own output directory.
/// The run directory is returned through `out_run_dir` when non-null.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn attrib_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    out_run_dir: *mut *mut c_char,
) -> AttribStatus {
    guard(|| {
        let config_path = PathBuf::from(str_arg(config_path, "config_path")?);
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = ExperimentConfigFile::load(&config_path)?;
        cfg.out = if out_dir.is_null() {
            base.join(&cfg.out)
        } else {
            PathBuf::from(str_arg(out_dir, "out_dir")?)
        };
        let result = cfg.run(&base)?;
        let dir = cfg.run_dir();
        report::write_report(&result, &dir)?;
        if !out_run_dir.is_null() {
            out_string(out_run_dir, dir.to_string_lossy().into_owned())?;
        }
        Ok(())
    })
}
