//! C ABI over the `haed` crate.
//!
//! Every function returns a [`HaedStatus`]; on failure the message is kept in
//! a thread-local slot readable with [`haed_last_error`]. Models and n-gram
//! LMs are opaque handles released with their `_free` functions. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use haed::checkpoint::Checkpoint;
use haed::corpus::{FeatureSequence, Tokenizer};
use haed::ctc::{ctc_loss, CtcPosteriors};
use haed::decoding::{DecodeConfig, Decoder, FusionConfig, FusionLms};
use haed::lm_decoder::LanguageModel;
use haed::ngram::NGramLm;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded checkpoint.
pub struct HaedModel {
    ck: Checkpoint,
    tokenizer: Option<Tokenizer>,
}

pub struct HaedNgram {
    lm: NGramLm,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(HaedStatus, String);

impl From<haed::Error> for Failure {
    fn from(e: haed::Error) -> Self {
        let status = match &e {
            haed::Error::Io { .. } => HaedStatus::Io,
            haed::Error::Format { .. } | haed::Error::Json(_) => HaedStatus::Format,
            haed::Error::InvalidInput(_) | haed::Error::Config(_) | haed::Error::SequenceTooLong { .. } => {
                HaedStatus::InvalidArgument
            }
            _ => HaedStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(HaedStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HaedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HaedStatus::Ok
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            HaedStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(HaedStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(HaedStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(HaedStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, writable pointer
    unsafe { p.as_mut() }.ok_or_else(|| Failure(HaedStatus::NullPointer, format!("{what} is null")))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn haed_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// NUL-terminated crate version; static storage.
#[no_mangle]
pub extern "C" fn haed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn haed_model_load(dir: *const c_char, out: *mut *mut HaedModel) -> HaedStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        *slot = ptr::null_mut();
        let dir = path_arg(dir)?;
        let ck = Checkpoint::load(&dir)?;
        let tokenizer = ck.tokenizer.clone();
        *slot = Box::into_raw(Box::new(HaedModel { ck, tokenizer }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`haed_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn haed_model_free(model: *mut HaedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(m: *const HaedModel) -> Result<&'a HaedModel, Failure> {
    m.as_ref()
        .ok_or_else(|| Failure(HaedStatus::NullPointer, "model is null".into()))
}

/// Input feature dimension and number of output classes (text plus eos).
///
/// # Safety
/// `model` must be a live handle; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn haed_model_dims(
    model: *const HaedModel,
    feature_dim: *mut usize,
    output_classes: *mut usize,
) -> HaedStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_arg(feature_dim, "feature_dim")? = m.ck.model.config().encoder.feature_dim;
        *out_arg(output_classes, "output_classes")? = m.ck.model.vocab().output_classes;
        Ok(())
    })
}

/// Beam-search one utterance of `frames × dim` row-major features. With a
/// non-null `target_lm`, shallow fusion with `lm_weight` is applied. Writes at
/// most `capacity` token ids; `out_len` always receives the full length, and
/// `BufferTooSmall` is returned when it exceeds `capacity`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `target_lm` may be null.
#[no_mangle]
pub unsafe extern "C" fn haed_model_decode(
    model: *const HaedModel,
    features: *const f32,
    frames: usize,
    dim: usize,
    beam: usize,
    target_lm: *const HaedNgram,
    lm_weight: f64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
) -> HaedStatus {
    guard(|| {
        let m = model_ref(model)?;
        let data = slice_arg(features, frames * dim, "features")?.to_vec();
        let feats = FeatureSequence::new("ffi", "ffi", dim, data)?;
        let lm = target_lm.as_ref();
        let cfg = DecodeConfig {
            beam,
            fusion: if lm.is_some() {
                FusionConfig::shallow(lm_weight)
            } else {
                FusionConfig::default()
            },
            ..DecodeConfig::default()
        };
        let lms = FusionLms {
            target: lm.map(|l| &l.lm as &dyn LanguageModel),
            source: None,
        };
        let decoder = Decoder::new(&m.ck.model, cfg)?.with_lms(lms)?;
        let res = decoder.beam_search(&feats)?;
        let tokens = res.tokens();
        *out_arg(out_len, "out_len")? = tokens.len();
        if let Some(s) = out_score.as_mut() {
            *s = res.best().map_or(f64::NEG_INFINITY, |h| h.score);
        }
        if tokens.len() > capacity {
            return Err(Failure(
                HaedStatus::BufferTooSmall,
                format!("hypothesis has {} tokens, buffer holds {capacity}", tokens.len()),
            ));
        }
        if !tokens.is_empty() {
            if out_tokens.is_null() {
                return Err(Failure(HaedStatus::NullPointer, "out_tokens is null".into()));
            }
            ptr::copy_nonoverlapping(tokens.as_ptr(), out_tokens, tokens.len());
        }
        Ok(())
    })
}

/// Decode token ids to text through the checkpoint's tokenizer. Same buffer
/// contract as [`haed_last_error`]: returns the byte length needed.
///
/// # Safety
/// `tokens` must hold `n` ids; `buf` null or `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn haed_model_detokenize(
    model: *const HaedModel,
    tokens: *const u32,
    n: usize,
    buf: *mut c_char,
    len: usize,
    out_needed: *mut usize,
) -> HaedStatus {
    guard(|| {
        let m = model_ref(model)?;
        let tok = m
            .tokenizer
            .as_ref()
            .ok_or_else(|| Failure(HaedStatus::Runtime, "checkpoint has no tokenizer".into()))?;
        let text = tok.decode(slice_arg(tokens, n, "tokens")?);
        *out_arg(out_needed, "out_needed")? = text.len();
        if !buf.is_null() && len > 0 {
            let k = text.len().min(len - 1);
            ptr::copy_nonoverlapping(text.as_ptr() as *const c_char, buf, k);
            *buf.add(k) = 0;
        }
        Ok(())
    })
}

/// Decoder-LM log probability of a transcript, eos included.
///
/// # Safety
/// `tokens` must hold `n` ids; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn haed_model_ilm_log_prob(
    model: *const HaedModel,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
) -> HaedStatus {
    guard(|| {
        let m = model_ref(model)?;
        let t = slice_arg(tokens, n, "tokens")?;
        *out_arg(out, "out")? = haed::model::ilm_log_prob(&m.ck.model, t)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn haed_ngram_load(path: *const c_char, out: *mut *mut HaedNgram) -> HaedStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        *slot = ptr::null_mut();
        let lm = NGramLm::load(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(HaedNgram { lm }));
        Ok(())
    })
}

/// # Safety
/// `lm` must be null or a handle from [`haed_ngram_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn haed_ngram_free(lm: *mut HaedNgram) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// `log p(token | prefix)`.
///
/// # Safety
/// `prefix` must hold `n` ids; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn haed_ngram_log_prob(
    lm: *const HaedNgram,
    prefix: *const u32,
    n: usize,
    token: u32,
    out: *mut f64,
) -> HaedStatus {
    guard(|| {
        let lm = lm
            .as_ref()
            .ok_or_else(|| Failure(HaedStatus::NullPointer, "lm is null".into()))?;
        if token as usize >= lm.lm.classes() {
            return Err(invalid("token is outside the LM vocabulary"));
        }
        *out_arg(out, "out")? = lm.lm.log_prob(slice_arg(prefix, n, "prefix")?, token);
        Ok(())
    })
}

/// Word error rate of whitespace-separated strings with its edit counts.
///
/// # Safety
/// `reference` and `hypothesis` must be NUL-terminated; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn haed_wer(
    reference: *const c_char,
    hypothesis: *const c_char,
    out_wer: *mut f64,
    out_sub: *mut usize,
    out_ins: *mut usize,
    out_del: *mut usize,
) -> HaedStatus {
    guard(|| {
        let r = str_arg(reference, "reference")?;
        let h = str_arg(hypothesis, "hypothesis")?;
        let (w, s, i, d) = haed::metrics::wer(r, h)?;
        *out_arg(out_wer, "out_wer")? = w;
        *out_arg(out_sub, "out_sub")? = s;
        *out_arg(out_ins, "out_ins")? = i;
        *out_arg(out_del, "out_del")? = d;
        Ok(())
    })
}

/// CTC negative log-likelihood of `labels` under `frames × classes`
/// row-major log posteriors.
///
/// # Safety
/// `log_probs` must hold `frames * classes` values and `labels` `n` ids.
#[no_mangle]
pub unsafe extern "C" fn haed_ctc_loss(
    log_probs: *const f64,
    frames: usize,
    classes: usize,
    blank: u32,
    labels: *const u32,
    n: usize,
    out: *mut f64,
) -> HaedStatus {
    guard(|| {
        let lp = slice_arg(log_probs, frames * classes, "log_probs")?.to_vec();
        let post = CtcPosteriors::new(lp, frames, classes, blank as usize)?;
        *out_arg(out, "out")? = ctc_loss(&post, slice_arg(labels, n, "labels")?)?;
        Ok(())
    })
}
