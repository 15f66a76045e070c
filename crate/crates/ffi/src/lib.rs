//! C ABI over `hcr-core`: metrics, note cleaning, and inference with trained
//! checkpoints.
//!
//! Every function returns an [`HcrStatus`]. On failure a message is kept per
//! thread and can be read with [`hcr_last_error_message`]. Objects are opaque
//! handles released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hcr_core::cohort::{impute_timeseries, RawSeries, TsObservation, N_VARIABLES};
use hcr_core::embed::EmbeddingMatrix;
use hcr_core::models::{predict, ModelKind, ModelParams, StayInput};
use hcr_core::notesproc::{clean_text, truncate_pad, CleanNote, PatientFile};
use hcr_core::traineval::{auprc, auroc, paired_ttest_onetailed};
use hcr_core::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HcrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingArtifact = 4,
    Shape = 5,
    UndefinedMetric = 6,
    Io = 7,
    CorruptData = 8,
    Panic = 9,
    Other = 10,
}

/// Trained model parameters.
pub struct HcrModel {
    params: ModelParams,
}

/// Pretrained word embeddings.
pub struct HcrEmbeddings {
    matrix: EmbeddingMatrix,
}

/// Owned NUL-terminated string.
pub struct HcrString {
    text: CString,
}

/// Model kinds as exposed to C.
pub const HCR_MODEL_CTS_RNN: i32 = 0;
pub const HCR_MODEL_NOTES_HCR: i32 = 1;
pub const HCR_MODEL_MM_HCR: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(HcrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => HcrStatus::Config,
            Error::MissingArtifact { .. } => HcrStatus::MissingArtifact,
            Error::Shape(_) | Error::MissingModality(_) => HcrStatus::Shape,
            Error::UndefinedMetric(_) => HcrStatus::UndefinedMetric,
            Error::Io(_) => HcrStatus::Io,
            Error::CorruptData(_) | Error::Checkpoint(_) | Error::Json(_) | Error::Csv(_) => HcrStatus::CorruptData,
            Error::EmptyNote | Error::EmptySequence(_) => HcrStatus::InvalidArgument,
            _ => HcrStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HcrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HcrStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HcrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HcrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HcrStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn label_slice(p: *const u8, n: usize) -> Result<Vec<bool>, Failure> {
    Ok(slice(p, n, "labels")?.iter().map(|l| *l != 0).collect())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hcr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Area under the ROC curve. `labels[i]` is nonzero for a positive.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_auroc(scores: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> HcrStatus {
    guard(|| {
        let v = auroc(slice(scores, n, "scores")?, &label_slice(labels, n)?)?;
        *out(out_value, "out")? = v;
        Ok(())
    })
}

/// Step-wise average precision.
///
/// # Safety
/// As for [`hcr_auroc`].
#[no_mangle]
pub unsafe extern "C" fn hcr_auprc(scores: *const f64, labels: *const u8, n: usize, out_value: *mut f64) -> HcrStatus {
    guard(|| {
        let v = auprc(slice(scores, n, "scores")?, &label_slice(labels, n)?)?;
        *out(out_value, "out")? = v;
        Ok(())
    })
}

/// One-tailed paired t-test of `b > a`. `t_out` receives NaN when the
/// differences have zero variance.
///
/// # Safety
/// `a` and `b` must point to `n` readable values; `t_out` and `p_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_paired_ttest(
    a: *const f64,
    b: *const f64,
    n: usize,
    t_out: *mut f64,
    p_out: *mut f64,
) -> HcrStatus {
    guard(|| {
        let r = paired_ttest_onetailed(slice(a, n, "a")?, slice(b, n, "b")?)?;
        *out(t_out, "t_out")? = r.t.unwrap_or(f64::NAN);
        *out(p_out, "p_out")? = r.p;
        Ok(())
    })
}

/// Normalises a note: lowercase, de-identification spans replaced, whitespace collapsed.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_string` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_clean_text(text: *const c_char, out_string: *mut *mut HcrString) -> HcrStatus {
    guard(|| {
        let slot = out(out_string, "out")?;
        let cleaned = clean_text(&string(text, "text")?);
        let text = CString::new(cleaned).map_err(|_| invalid("text contains NUL"))?;
        *slot = Box::into_raw(Box::new(HcrString { text }));
        Ok(())
    })
}

/// Borrowed pointer to the contents of `s`, valid until `s` is freed.
///
/// # Safety
/// `s` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hcr_string_ptr(s: *const HcrString) -> *const c_char {
    s.as_ref().map_or(ptr::null(), |s| s.text.as_ptr())
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hcr_string_free(s: *mut HcrString) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Loads word embeddings written by `hcr embed`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_embeddings_load(path: *const c_char, out_handle: *mut *mut HcrEmbeddings) -> HcrStatus {
    guard(|| {
        let slot = out(out_handle, "out")?;
        let file = std::fs::File::open(string(path, "path")?).map_err(Error::from)?;
        let matrix = EmbeddingMatrix::read_text(std::io::BufReader::new(file))?;
        *slot = Box::into_raw(Box::new(HcrEmbeddings { matrix }));
        Ok(())
    })
}

/// Number of rows (vocabulary entries including padding) and the vector dimension.
///
/// # Safety
/// `e` must be a live handle; `rows` and `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_embeddings_shape(e: *const HcrEmbeddings, rows: *mut usize, dim: *mut usize) -> HcrStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("embeddings"))?;
        *out(rows, "rows")? = e.matrix.rows();
        *out(dim, "dim")? = e.matrix.dim;
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hcr_embeddings_free(e: *mut HcrEmbeddings) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Loads a checkpoint written by `hcr train` (the `.ckpt` path; its `.json`
/// sidecar must sit next to it).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_model_load(path: *const c_char, out_handle: *mut *mut HcrModel) -> HcrStatus {
    guard(|| {
        let slot = out(out_handle, "out")?;
        let params = ModelParams::load(&PathBuf::from(string(path, "path")?))?;
        *slot = Box::into_raw(Box::new(HcrModel { params }));
        Ok(())
    })
}

/// Model kind (one of the `HCR_MODEL_*` constants), trainable parameter count
/// and note length expected by the model.
///
/// # Safety
/// `m` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hcr_model_info(
    m: *const HcrModel,
    kind: *mut i32,
    param_count: *mut usize,
    note_length: *mut usize,
) -> HcrStatus {
    guard(|| {
        let p = &m.as_ref().ok_or_else(|| null("model"))?.params;
        *out(kind, "kind")? = match p.kind {
            ModelKind::CtsRnn => HCR_MODEL_CTS_RNN,
            ModelKind::NotesHcr => HCR_MODEL_NOTES_HCR,
            ModelKind::MmHcr => HCR_MODEL_MM_HCR,
        };
        *out(param_count, "param_count")? = p.param_count();
        *out(note_length, "note_length")? = p.config.note_length;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hcr_model_free(m: *mut HcrModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Mortality probability for one stay.
///
/// Notes are given as `n_notes` token-id runs concatenated in `tokens`, with
/// `note_lengths[i]` ids in note `i`, oldest first. Runs longer than the
/// model's note length are head-truncated. The series is `hours` rows of
/// `variables` raw values (hour `i` is row `i`), NaN where unobserved; it is
/// imputed as in training. Pass null/zero for a modality the model does not use.
///
/// # Safety
/// Every non-null pointer must reference the stated number of readable values.
#[no_mangle]
pub unsafe extern "C" fn hcr_model_predict(
    m: *const HcrModel,
    emb: *const HcrEmbeddings,
    tokens: *const u32,
    note_lengths: *const usize,
    n_notes: usize,
    series: *const f64,
    hours: usize,
    variables: usize,
    probability: *mut f64,
) -> HcrStatus {
    guard(|| {
        let params = &m.as_ref().ok_or_else(|| null("model"))?.params;
        let slot = out(probability, "probability")?;
        let file = if params.kind.uses_notes() {
            let lengths = slice(note_lengths, n_notes, "note_lengths")?;
            if lengths.is_empty() {
                return Err(invalid("model needs at least one note"));
            }
            let ids = slice(tokens, lengths.iter().sum(), "tokens")?;
            Some(patient_file(ids, lengths, params.config.note_length)?)
        } else {
            None
        };
        let ts = if params.kind.uses_series() {
            if variables != N_VARIABLES {
                return Err(invalid(format!("series must have {N_VARIABLES} variables, got {variables}")));
            }
            if hours == 0 {
                return Err(invalid("model needs a nonempty time series"));
            }
            let values = slice(series, hours * variables, "series")?;
            let rows = values
                .chunks(variables)
                .enumerate()
                .map(|(h, row)| TsObservation {
                    hours: h as f64,
                    values: row.iter().map(|v| if v.is_nan() { None } else { Some(*v) }).collect(),
                })
                .collect();
            Some(impute_timeseries(&RawSeries { hadm_id: 0, rows }, hours)?)
        } else {
            None
        };
        let emb =
            if params.kind.uses_notes() { Some(&emb.as_ref().ok_or_else(|| null("embeddings"))?.matrix) } else { None };
        let stay = StayInput::new(0, false, file.as_ref(), ts.as_ref())?;
        *slot = predict(params, &[&stay], emb, 1)?[0];
        Ok(())
    })
}

fn patient_file(ids: &[u32], lengths: &[usize], note_length: usize) -> Result<PatientFile, Failure> {
    let base = chrono::NaiveDate::from_ymd_opt(2000, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .ok_or_else(|| invalid("bad base time"))?;
    let mut notes = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for (i, len) in lengths.iter().enumerate() {
        let (tokens, mask) = truncate_pad(&ids[start..start + len], note_length)?;
        start += len;
        notes.push(CleanNote {
            row_id: i as u64,
            subject_id: 0,
            hadm_id: 0,
            category: String::new(),
            charted_at: base + chrono::TimeDelta::minutes(i as i64),
            tokens,
            mask,
        });
    }
    Ok(PatientFile { hadm_id: 0, subject_id: 0, notes, label: false, window_hours: 0 })
}
