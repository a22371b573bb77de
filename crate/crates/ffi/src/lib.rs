//! C ABI over `xft-core`: load, save, evaluate, upcycle and merge models.
//!
//! Models are opaque `XftModel` handles owned by the caller and released
//! with `xft_model_free`. Every fallible call returns an `XftStatus`; on
//! failure `xft_last_error` describes the most recent error on the calling
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xft_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use xft_core::data::{ByteTokenizer, EOS};
use xft_core::merge::{ewa_finalize, extract_shared, init_mixing_coefficients, merge_xft};
use xft_core::moe::{upcycle, MoeConfig};
use xft_core::transformer::{DenseModel, ModelConfig};
use xft_core::XftError;

/// Opaque model handle.
pub struct XftModel {
    inner: DenseModel<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Contract = 6,
    Numeric = 7,
    Config = 8,
    Dataset = 9,
    Verification = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XftMergeMethod {
    /// Shared expert at rate `lambda`, normal experts uniform.
    Xft = 0,
    Uniform = 1,
    ExtractShared = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &XftError) -> XftStatus {
    match e {
        XftError::Shape(_) | XftError::Length { .. } => XftStatus::Shape,
        XftError::Contract(_) => XftStatus::Contract,
        XftError::Numeric(_) => XftStatus::Numeric,
        XftError::Io { .. } => XftStatus::Io,
        XftError::Checkpoint(_) => XftStatus::Checkpoint,
        XftError::Dataset { .. } => XftStatus::Dataset,
        XftError::Config(_) => XftStatus::Config,
        XftError::Verification(_) => XftStatus::Verification,
    }
}

enum Failure {
    Status(XftStatus, String),
    Core(XftError),
}

impl From<XftError> for Failure {
    fn from(e: XftError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> XftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XftStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            XftStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(XftStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const XftModel) -> Result<&'a DenseModel<f32>, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(XftStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put_model(out: *mut *mut XftModel, model: DenseModel<f32>) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(XftModel { inner: model }));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn xft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Randomly initialized dense model with the byte-level vocabulary.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn xft_model_init_dense(
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_ff: usize,
    max_seq_len: usize,
    seed: u64,
    out: *mut *mut XftModel,
) -> XftStatus {
    guard(|| {
        let config = ModelConfig { d_model, n_layers, n_heads, d_ff, max_seq_len, ..ModelConfig::desk() };
        put_model(out, DenseModel::<f32>::init_dense(config, seed)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_load(path: *const c_char, out: *mut *mut XftModel) -> XftStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let (m, _) = load_checkpoint(Path::new(path))?;
        put_model(out, m)
    })
}

/// # Safety
/// `model` must come from this library; `path` and `phase` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xft_model_save(model: *const XftModel, path: *const c_char, phase: *const c_char, seed: u64) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = str_arg(path, "path")?;
        let phase = str_arg(phase, "phase")?;
        save_checkpoint(m, &CheckpointMeta::new(phase, seed), Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xft_model_free(model: *mut XftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// 1 for a mixture-of-experts model, 0 for dense, -1 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn xft_model_is_moe(model: *const XftModel) -> i32 {
    model.as_ref().map_or(-1, |m| i32::from(m.inner.is_moe()))
}

/// # Safety
/// `model` must come from this library; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_param_count(model: *const XftModel, out: *mut u64) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.param_count() as u64;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_vocab_size(model: *const XftModel, out: *mut usize) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.config.vocab_size;
        Ok(())
    })
}

unsafe fn tokens_arg(tokens: *const u32, len: usize) -> Result<Vec<usize>, Failure> {
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    Ok(std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect())
}

/// Writes row-major logits `[len × vocab]` into `out`, which must hold at
/// least `out_len` floats.
///
/// # Safety
/// `tokens` must point to `len` ids and `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn xft_model_logits(
    model: *const XftModel,
    tokens: *const u32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = tokens_arg(tokens, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = len * m.config.vocab_size;
        if out_len < need {
            return Err(Failure::Status(XftStatus::BufferTooSmall, format!("logits need {need} floats, buffer holds {out_len}")));
        }
        let logits = m.forward_logits(&ids)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Masked next-token cross-entropy of one sequence.
///
/// # Safety
/// `tokens` and `mask` must each point to `len` elements; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_loss(
    model: *const XftModel,
    tokens: *const u32,
    mask: *const u8,
    len: usize,
    out: *mut f64,
) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = tokens_arg(tokens, len)?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let mask = std::slice::from_raw_parts(mask, len);
        let (_, loss) = m.forward_loss(&ids, mask)?;
        *out = loss;
        Ok(())
    })
}

/// New MoE model with every FFN copied into `experts` experts.
///
/// # Safety
/// `model` must come from this library; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_upcycle(
    model: *const XftModel,
    experts: usize,
    top_k: usize,
    normalization: bool,
    seed: u64,
    out: *mut *mut XftModel,
) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cfg = MoeConfig { normalization, ..MoeConfig::new(experts, top_k) };
        put_model(out, upcycle(m, &cfg, seed)?)
    })
}

/// New dense model merged from an MoE model. `lambda` is used by
/// `XFT_MERGE_METHOD_XFT` only.
///
/// # Safety
/// `model` must come from this library; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_merge(
    model: *const XftModel,
    method: XftMergeMethod,
    lambda: f64,
    out: *mut *mut XftModel,
) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let merged = match method {
            XftMergeMethod::Xft => {
                let cfg = m.moe.as_ref().ok_or_else(|| XftError::Config("model is dense".into()))?;
                merge_xft(m, &init_mixing_coefficients(cfg, m.blocks.len(), lambda)?)?
            }
            XftMergeMethod::Uniform => ewa_finalize(m)?,
            XftMergeMethod::ExtractShared => extract_shared(m)?,
        };
        put_model(out, merged)
    })
}

/// Greedy continuation of an instruction, written NUL-terminated into
/// `buf`. `written` receives the text length without the terminator.
///
/// # Safety
/// `prompt` must be NUL-terminated, `buf` hold `buf_len` bytes, and
/// `written` be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn xft_model_generate(
    model: *const XftModel,
    prompt: *const c_char,
    max_new: usize,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> XftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let prompt = str_arg(prompt, "prompt")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if written.is_null() {
            return Err(null("written"));
        }
        let tok = ByteTokenizer;
        let p = tok.prompt(prompt);
        let ids = m.generate_greedy(&p, max_new, Some(EOS))?;
        let text = tok.decode(&ids[p.len()..]).replace('\0', " ");
        if text.len() + 1 > buf_len {
            return Err(Failure::Status(
                XftStatus::BufferTooSmall,
                format!("output needs {} bytes, buffer holds {buf_len}", text.len() + 1),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf as *mut u8, text.len() + 1);
        dst[..text.len()].copy_from_slice(text.as_bytes());
        dst[text.len()] = 0;
        *written = text.len();
        Ok(())
    })
}
