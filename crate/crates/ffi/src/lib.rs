//! C interface over the upit core: checkpoint loading, forward passes,
//! perplexity, DARE, bucket assignment and the load-balancing loss.
//!
//! Every function returns a [`UpitStatus`]. On failure a message is kept per
//! thread and can be read with [`upit_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use upit::model::{perplexity, DenseModel, LanguageModel, MoeModel};
use upit::numerics::{RngState, Tensor};
use upit::pipeline::checkpoint::{load_tensors, ModelKind};
use upit::selection::{assign_buckets, PerplexityTable};
use upit::training::load_balance_loss;
use upit::{CheckpointError, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Config = 6,
    BufferTooSmall = 7,
    BadMagic = 10,
    VersionMismatch = 11,
    Truncated = 12,
    ShapeOffset = 13,
    Header = 14,
    Panic = 99,
}

/// A loaded dense or mixture model. Opaque to C.
pub struct UpitModel {
    inner: Inner,
}

enum Inner {
    Dense(DenseModel),
    Moe(MoeModel),
}

impl UpitModel {
    fn lm(&self) -> &dyn LanguageModel {
        match &self.inner {
            Inner::Dense(m) => m,
            Inner::Moe(m) => m,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UpitStatus {
    match e {
        Error::Checkpoint(c) => match c {
            CheckpointError::BadMagic => UpitStatus::BadMagic,
            CheckpointError::VersionMismatch { .. } => UpitStatus::VersionMismatch,
            CheckpointError::Truncated(_) => UpitStatus::Truncated,
            CheckpointError::ShapeOffset(_) => UpitStatus::ShapeOffset,
            CheckpointError::Header(_) => UpitStatus::Header,
        },
        Error::Shape(_) => UpitStatus::Shape,
        Error::NonFinite(_) => UpitStatus::NonFinite,
        Error::Io { .. } | Error::MissingArtifact(_) | Error::Locked(_) => UpitStatus::Io,
        Error::Config(_) | Error::Json(_) => UpitStatus::Config,
        _ => UpitStatus::InvalidArgument,
    }
}

struct Fail(UpitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UpitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UpitStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside upit".into());
            UpitStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(UpitStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn model<'a>(m: *const UpitModel) -> Result<&'a UpitModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn tokens_of(raw: &[u32]) -> Vec<usize> {
    raw.iter().map(|&t| t as usize).collect()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn upit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a dense or mixture checkpoint. On success `*out` owns a model that
/// must be released with `upit_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upit_model_load(path: *const c_char, out: *mut *mut UpitModel) -> UpitStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(UpitStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (info, tensors) = load_tensors(Path::new(path))?;
        let inner = match info.kind {
            ModelKind::Dense => Inner::Dense(DenseModel::from_tensors(info.model, tensors)?),
            ModelKind::Moe => {
                let layout = info
                    .moe
                    .ok_or_else(|| Fail(UpitStatus::Header, "mixture checkpoint without layout".into()))?;
                Inner::Moe(MoeModel::from_tensors(info.model, layout, tensors)?)
            }
            ModelKind::RoutingVectors => {
                return Err(Fail(UpitStatus::InvalidArgument, "routing vectors are not a model".into()))
            }
        };
        *out = Box::into_raw(Box::new(UpitModel { inner }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from `upit_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn upit_model_free(model: *mut UpitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size and expert count (0 for dense models).
///
/// # Safety
/// `model` must be live; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn upit_model_info(
    model: *const UpitModel,
    vocab_size: *mut usize,
    n_experts: *mut usize,
) -> UpitStatus {
    guard(|| {
        let m = self::model(model)?;
        if vocab_size.is_null() || n_experts.is_null() {
            return Err(null("out"));
        }
        *vocab_size = m.lm().vocab_size();
        *n_experts = match &m.inner {
            Inner::Dense(_) => 0,
            Inner::Moe(moe) => moe.n_experts(),
        };
        Ok(())
    })
}

/// Writes `len × vocab_size` row-major logits for one sequence.
///
/// # Safety
/// `tokens` must hold `len` values and `logits` `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn upit_model_forward(
    model: *const UpitModel,
    tokens: *const u32,
    len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> UpitStatus {
    guard(|| {
        let m = self::model(model)?;
        let toks = tokens_of(input(tokens, len, "tokens")?);
        let need = len * m.lm().vocab_size();
        if logits_len < need {
            return Err(Fail(
                UpitStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len}, need {need}"),
            ));
        }
        let t: Tensor = m.lm().logits(&toks)?;
        output(logits, need, "logits")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Perplexity of one sequence (at least two tokens).
///
/// # Safety
/// `tokens` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn upit_model_perplexity(
    model: *const UpitModel,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
) -> UpitStatus {
    guard(|| {
        let m = self::model(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let toks = tokens_of(input(tokens, len, "tokens")?);
        *out = perplexity(m.lm(), &toks)?;
        Ok(())
    })
}

/// Drop-and-rescale: each coordinate is zeroed with probability `p`, the
/// survivors are scaled by `1 / (1 − p)`. Deterministic in `seed`.
///
/// # Safety
/// `delta` and `out` must each hold `len` values. They may alias.
#[no_mangle]
pub unsafe extern "C" fn upit_dare(delta: *const f64, len: usize, p: f64, seed: u64, out: *mut f64) -> UpitStatus {
    guard(|| {
        let d = input(delta, len, "delta")?.to_vec();
        let r = upit::expansion::dare(&d, p, &RngState::new(seed))?;
        output(out, len, "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// `n · Σ f_i · P_i`.
///
/// # Safety
/// `fractions` and `probs` must each hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn upit_load_balance_loss(
    fractions: *const f64,
    probs: *const f64,
    n: usize,
    out: *mut f64,
) -> UpitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = input(fractions, n, "fractions")?;
        let p = input(probs, n, "probs")?;
        *out = load_balance_loss(f, p, n)?;
        Ok(())
    })
}

/// Greedy capacity-bounded assignment of `rows` samples to `n` experts from
/// a row-major perplexity table. `assignment[i]` receives the expert of
/// sample `i`, or -1 when it was dropped.
///
/// # Safety
/// `ppl` must hold `rows × n` values, `assignment` `rows` values, and
/// `dropped` must be valid.
#[no_mangle]
pub unsafe extern "C" fn upit_assign_buckets(
    ppl: *const f64,
    rows: usize,
    n: usize,
    capacity: usize,
    assignment: *mut i64,
    dropped: *mut usize,
) -> UpitStatus {
    guard(|| {
        if dropped.is_null() {
            return Err(null("dropped"));
        }
        if n == 0 {
            return Err(Fail(UpitStatus::InvalidArgument, "need at least one expert".into()));
        }
        let flat = input(ppl, rows * n, "ppl")?;
        let values = flat.chunks_exact(n).map(<[f64]>::to_vec).collect();
        let table = PerplexityTable::new((0..rows as u64).collect(), values)?;
        let b = assign_buckets(&table, capacity)?;
        let out = output(assignment, rows, "assignment")?;
        out.fill(-1);
        for bucket in &b.buckets {
            for &id in &bucket.sample_ids {
                out[id as usize] = bucket.expert_index as i64;
            }
        }
        *dropped = b.dropped_count;
        Ok(())
    })
}
