//! C ABI over the acseg library.
//!
//! Every function returns an [`AcsegStatus`]. On failure the message is
//! kept per thread and can be read with [`acseg_last_error`]. Buffers are
//! owned by the caller; handles are created and freed here.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::ptr;
use std::slice;

use acseg::checkpoint::read_checkpoint;
use acseg::error::Error;
use acseg::eval::hungarian_match;
use acseg::io::FeatureMap;
use acseg::modularity::{build_affinity, modularity_loss, BatchReduction, LossOptions};
use acseg::trainer::Segmenter;
use acseg::Tensor;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// File could not be read or was malformed.
    Format = 3,
    Dimension = 4,
    Numeric = 5,
    Panic = 6,
}

/// A trained concept generator.
pub struct AcsegModel {
    segmenter: Segmenter<f32>,
    num_prototypes: usize,
    embed_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: AcsegStatus, msg: impl Into<String>) -> AcsegStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> AcsegStatus {
    match err {
        Error::Format(_) => AcsegStatus::Format,
        Error::Dimension(_) => AcsegStatus::Dimension,
        Error::Tensor(_) | Error::NonFiniteLoss { .. } => AcsegStatus::Numeric,
        Error::Config(_) | Error::Empty(_) => AcsegStatus::InvalidArgument,
    }
}

fn guarded(f: impl FnOnce() -> Result<(), AcsegStatus> + UnwindSafe) -> AcsegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(f) {
        Ok(Ok(())) => AcsegStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(AcsegStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, AcsegStatus>;
}

impl<T> OrStatus<T> for acseg::Result<T> {
    fn or_status(self) -> Result<T, AcsegStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), AcsegStatus> {
    if p.is_null() {
        Err(fail(AcsegStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn checked_len(a: usize, b: usize) -> Result<usize, AcsegStatus> {
    a.checked_mul(b)
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(AcsegStatus::InvalidArgument, format!("bad extent {a}x{b}")))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn acseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a model that must be
/// released with [`acseg_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acseg_model_load(path: *const c_char, out: *mut *mut AcsegModel) -> AcsegStatus {
    guarded(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(AcsegStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = read_checkpoint(path).or_status()?;
        let model = AcsegModel {
            segmenter: Segmenter::new(&ckpt.params),
            num_prototypes: ckpt.params.config.num_prototypes,
            embed_dim: ckpt.params.config.embed_dim,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`acseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acseg_model_free(model: *mut AcsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the prototype count and feature width.
///
/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn acseg_model_shape(
    model: *const AcsegModel,
    num_prototypes: *mut usize,
    embed_dim: *mut usize,
) -> AcsegStatus {
    guarded(|| {
        non_null(model, "model")?;
        let m = &*model;
        if !num_prototypes.is_null() {
            *num_prototypes = m.num_prototypes;
        }
        if !embed_dim.is_null() {
            *embed_dim = m.embed_dim;
        }
        Ok(())
    })
}

/// Segments one `grid_h × grid_w` feature map given row-major as
/// `grid_h·grid_w × dim` floats. Writes one concept index per patch into
/// `labels` and, when `active_count` is not null, the number of concepts
/// that own at least one patch.
///
/// # Safety
/// `features` must hold `grid_h·grid_w·dim` values and `labels`
/// `grid_h·grid_w` slots.
#[no_mangle]
pub unsafe extern "C" fn acseg_model_segment(
    model: *const AcsegModel,
    features: *const f32,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    labels: *mut u32,
    active_count: *mut usize,
) -> AcsegStatus {
    guarded(|| {
        non_null(model, "model")?;
        non_null(features, "features")?;
        non_null(labels, "labels")?;
        let n = checked_len(grid_h, grid_w)?;
        let len = checked_len(n, dim)?;
        let m = &*model;
        if dim != m.embed_dim {
            return Err(fail(
                AcsegStatus::Dimension,
                format!("feature width {dim}, model expects {}", m.embed_dim),
            ));
        }
        let values: Vec<f64> = slice::from_raw_parts(features, len).iter().map(|&v| v as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fail(AcsegStatus::Numeric, "features contain non-finite values"));
        }
        let x = Tensor::new(vec![n, dim], values).map_err(|e| fail(AcsegStatus::Dimension, e.to_string()))?;
        let seg = m.segmenter.segment(&FeatureMap::new("ffi", (grid_h, grid_w), x)).or_status()?;
        let out = slice::from_raw_parts_mut(labels, n);
        for (o, &l) in out.iter_mut().zip(seg.labels()) {
            *o = l as u32;
        }
        if !active_count.is_null() {
            *active_count = seg.active_count();
        }
        Ok(())
    })
}

/// Maximum-overlap one-to-one matching on a row-major `rows × cols`
/// matrix. `matches[r]` receives the column matched to row `r`, or −1.
///
/// # Safety
/// `overlap` must hold `rows·cols` values and `matches` `rows` slots.
#[no_mangle]
pub unsafe extern "C" fn acseg_hungarian(overlap: *const f64, rows: usize, cols: usize, matches: *mut i64) -> AcsegStatus {
    guarded(|| {
        non_null(overlap, "overlap")?;
        non_null(matches, "matches")?;
        let len = checked_len(rows, cols)?;
        let m = Tensor::new(vec![rows, cols], slice::from_raw_parts(overlap, len).to_vec())
            .map_err(|e| fail(AcsegStatus::Dimension, e.to_string()))?;
        let pairs = hungarian_match(&m).or_status()?;
        let out = slice::from_raw_parts_mut(matches, rows);
        out.fill(-1);
        for (r, c) in pairs {
            out[r] = c as i64;
        }
        Ok(())
    })
}

/// Modularity training loss of soft assignments `soft` (`n × k`) on the
/// affinity graph of `features` (`n × d`), both row-major.
///
/// # Safety
/// Buffers must hold the stated number of values; `loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acseg_modularity_loss(
    features: *const f64,
    n: usize,
    d: usize,
    soft: *const f64,
    k: usize,
    include_diagonal: bool,
    loss: *mut f64,
) -> AcsegStatus {
    guarded(|| {
        non_null(features, "features")?;
        non_null(soft, "soft")?;
        non_null(loss, "loss")?;
        let x = Tensor::new(vec![n, d], slice::from_raw_parts(features, checked_len(n, d)?).to_vec())
            .map_err(|e| fail(AcsegStatus::Dimension, e.to_string()))?;
        let s = Tensor::new(vec![n, k], slice::from_raw_parts(soft, checked_len(n, k)?).to_vec())
            .map_err(|e| fail(AcsegStatus::Dimension, e.to_string()))?;
        let graph = build_affinity(&x).or_status()?;
        let opts = LossOptions {
            include_diagonal,
            batch_reduction: BatchReduction::Mean,
        };
        *loss = modularity_loss(&graph, &s, &opts).or_status()?;
        Ok(())
    })
}
