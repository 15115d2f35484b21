//! C ABI over the glioma pipeline.
//!
//! Every function returns a [`GliomaStatus`]; on failure the message is
//! available from [`glioma_last_error`] on the same thread. Models are
//! opaque handles released with [`glioma_model_free`]. Panics never cross
//! the boundary; they surface as `GLIOMA_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use glioma_core::dcn::{load_checkpoint, DcnModel};
use glioma_core::ensemble::{aggregate_slices, aggregate_tiles, fuse_modalities, FusionWeights, Prediction};
use glioma_core::histo::{qc_tile, Verdict};
use glioma_core::imaging::Image;
use glioma_core::metrics::evaluate;
use glioma_core::trainer::predict_batch;
use glioma_core::{Class, Error, Modality};
use image::RgbImage;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GliomaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    MissingPath = 5,
    BadMagic = 6,
    UnsupportedVersion = 7,
    Truncated = 8,
    ChecksumMismatch = 9,
    Format = 10,
    UnknownLabel = 11,
    EmptyInput = 12,
    InvalidConfig = 13,
    NonFinite = 14,
    Other = 15,
    Panic = 16,
}

impl GliomaStatus {
    fn from_error(e: &Error) -> GliomaStatus {
        match e {
            Error::InvalidArgument(_) | Error::LengthMismatch(..) | Error::LabelOutOfRange { .. } => {
                GliomaStatus::InvalidArgument
            }
            Error::ShapeMismatch { .. } => GliomaStatus::ShapeMismatch,
            Error::Io { .. } => GliomaStatus::Io,
            Error::MissingPath(_) => GliomaStatus::MissingPath,
            Error::BadMagic { .. } => GliomaStatus::BadMagic,
            Error::UnsupportedVersion { .. } => GliomaStatus::UnsupportedVersion,
            Error::Truncated(_) => GliomaStatus::Truncated,
            Error::ChecksumMismatch { .. } => GliomaStatus::ChecksumMismatch,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) => GliomaStatus::Format,
            Error::UnknownLabel(_) => GliomaStatus::UnknownLabel,
            Error::EmptyInput(_) => GliomaStatus::EmptyInput,
            Error::InvalidConfig(_) | Error::Config(_) => GliomaStatus::InvalidConfig,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => GliomaStatus::NonFinite,
            _ => GliomaStatus::Other,
        }
    }
}

/// Class probabilities in (A, O, G, N) order. `label` is 0..=3.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GliomaPrediction {
    pub probs: [f64; 4],
    pub label: i32,
    pub confidence: f64,
}

impl From<Prediction> for GliomaPrediction {
    fn from(p: Prediction) -> Self {
        GliomaPrediction {
            probs: p.probs,
            label: p.label.index() as i32,
            confidence: p.confidence,
        }
    }
}

/// Patient-level metrics; `confusion` is row-major, rows truth.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GliomaEvalReport {
    pub confusion: [u64; 9],
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub kappa: f64,
    pub balanced_accuracy: f64,
    pub n_cases: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GliomaQcVerdict {
    pub bright_pixel_fraction: f64,
    /// 1 when the tile is background (class N).
    pub negative: i32,
}

/// Loaded network; opaque to C.
pub struct GliomaModel {
    model: DcnModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> GliomaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GliomaStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GliomaStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(format!("{}: {e}", e.class()));
            GliomaStatus::from_error(&e)
        }
        Err(_) => {
            set_error("panic inside glioma".into());
            GliomaStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a, T>(p: *mut T, n: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn class_of(code: i32) -> FfiResult<Class> {
    usize::try_from(code)
        .map_err(|_| Error::InvalidArgument(format!("class code {code}")))
        .and_then(Class::from_index)
        .map_err(Failure::from)
}

fn modality_of(code: i32) -> FfiResult<Modality> {
    usize::try_from(code)
        .ok()
        .and_then(|i| Modality::ALL.get(i).copied())
        .ok_or_else(|| Error::InvalidArgument(format!("modality code {code}")).into())
}

fn predictions(probs: &[f64]) -> FfiResult<Vec<Prediction>> {
    probs
        .chunks(4)
        .map(|p| Prediction::from_probs([p[0], p[1], p[2], p[3]]).map_err(Failure::from))
        .collect()
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn glioma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn glioma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint into a new handle stored in `*out`.
#[no_mangle]
pub unsafe extern "C" fn glioma_model_load(path: *const c_char, out: *mut *mut GliomaModel) -> GliomaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let path = PathBuf::from(path);
        if !path.exists() {
            return Err(Error::MissingPath(path).into());
        }
        let (model, _) = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(GliomaModel { model }));
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn glioma_model_free(model: *mut GliomaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side length and channel count the model expects.
#[no_mangle]
pub unsafe extern "C" fn glioma_model_input_shape(
    model: *const GliomaModel,
    size: *mut usize,
    channels: *mut usize,
) -> GliomaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Failure::Null("model"))?.model;
        *out_ref(size, "size")? = m.config().input_size;
        *out_ref(channels, "channels")? = m.config().in_channels;
        Ok(())
    })
}

/// Predicts `n` images laid out N×C×S×S (row-major, values in [0, 1]) into
/// `out[0..n]`.
#[no_mangle]
pub unsafe extern "C" fn glioma_model_predict(
    model: *const GliomaModel,
    pixels: *const f32,
    n: usize,
    out: *mut GliomaPrediction,
) -> GliomaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Failure::Null("model"))?.model;
        let (s, c) = (m.config().input_size, m.config().in_channels);
        let per = c * s * s;
        let total = n
            .checked_mul(per)
            .ok_or_else(|| Error::InvalidArgument("image count overflows".into()))?;
        let pixels = slice_in(pixels, total, "pixels")?;
        let out = slice_out(out, n, "out")?;
        if n == 0 {
            return Err(Error::EmptyInput("images").into());
        }
        let images = pixels
            .chunks(per)
            .map(|d| Image::new(c, s, s, d.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        for (slot, p) in out.iter_mut().zip(predict_batch(m, &refs)?) {
            *slot = p.into();
        }
        Ok(())
    })
}

fn aggregate(
    probs: *const f64,
    n: usize,
    out: *mut GliomaPrediction,
    f: fn(&[Prediction]) -> glioma_core::Result<Prediction>,
) -> GliomaStatus {
    guard(|| {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidArgument("count overflows".into()))?;
        let probs = unsafe { slice_in(probs, len, "probs")? };
        let out = unsafe { out_ref(out, "out")? };
        *out = f(&predictions(probs)?)?.into();
        Ok(())
    })
}

/// Slide-level vote over `n` tile probability rows (n×4).
#[no_mangle]
pub unsafe extern "C" fn glioma_aggregate_tiles(
    probs: *const f64,
    n: usize,
    out: *mut GliomaPrediction,
) -> GliomaStatus {
    aggregate(probs, n, out, aggregate_tiles)
}

/// Volume-level weighted mean over `n` slice probability rows (n×4).
#[no_mangle]
pub unsafe extern "C" fn glioma_aggregate_slices(
    probs: *const f64,
    n: usize,
    out: *mut GliomaPrediction,
) -> GliomaStatus {
    aggregate(probs, n, out, aggregate_slices)
}

/// Weighted vote across `n` distinct modalities. Modality codes: 0 hist,
/// 1 T1w, 2 T2w, 3 GdT1w, 4 FLAIR. `weights` may be NULL for equal weights.
#[no_mangle]
pub unsafe extern "C" fn glioma_fuse(
    modalities: *const i32,
    probs: *const f64,
    weights: *const f64,
    n: usize,
    out: *mut GliomaPrediction,
) -> GliomaStatus {
    guard(|| {
        let mods = slice_in(modalities, n, "modalities")?;
        let probs = slice_in(probs, n.saturating_mul(4), "probs")?;
        let weights = if weights.is_null() {
            None
        } else {
            Some(slice_in(weights, n, "weights")?)
        };
        let out = out_ref(out, "out")?;
        let mut per = BTreeMap::new();
        let mut w = BTreeMap::new();
        for (i, (&code, p)) in mods.iter().zip(predictions(probs)?).enumerate() {
            let m = modality_of(code)?;
            if per.insert(m, p).is_some() {
                return Err(Error::InvalidArgument(format!("modality {m} given twice")).into());
            }
            w.insert(m, weights.map_or(1.0, |ws| ws[i]));
        }
        *out = fuse_modalities("", &per, &FusionWeights(w))?.fused.into();
        Ok(())
    })
}

/// Metrics over `n` cases; labels are class codes 0 (A), 1 (O), 2 (G).
#[no_mangle]
pub unsafe extern "C" fn glioma_evaluate(
    truth: *const i32,
    pred: *const i32,
    n: usize,
    out: *mut GliomaEvalReport,
) -> GliomaStatus {
    guard(|| {
        let t = slice_in(truth, n, "truth")?
            .iter()
            .map(|&c| class_of(c))
            .collect::<FfiResult<Vec<_>>>()?;
        let p = slice_in(pred, n, "pred")?
            .iter()
            .map(|&c| class_of(c))
            .collect::<FfiResult<Vec<_>>>()?;
        let out = out_ref(out, "out")?;
        let r = evaluate(&t, &p)?;
        let mut confusion = [0u64; 9];
        for (i, row) in r.confusion.0.iter().enumerate() {
            confusion[i * 3..i * 3 + 3].copy_from_slice(row);
        }
        *out = GliomaEvalReport {
            confusion,
            f1_micro: r.f1_micro,
            f1_macro: r.f1_macro,
            kappa: r.kappa,
            balanced_accuracy: r.balanced_accuracy,
            n_cases: r.n_cases,
        };
        Ok(())
    })
}

/// Background check of a `width`×`height` interleaved RGB8 tile.
#[no_mangle]
pub unsafe extern "C" fn glioma_qc_tile(
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut GliomaQcVerdict,
) -> GliomaStatus {
    guard(|| {
        let len = (width as usize)
            .checked_mul(height as usize)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Error::InvalidArgument("tile size overflows".into()))?;
        let data = slice_in(rgb, len, "rgb")?;
        let out = out_ref(out, "out")?;
        let tile = RgbImage::from_raw(width, height, data.to_vec())
            .ok_or_else(|| Error::InvalidArgument("pixel buffer size".into()))?;
        let v = qc_tile(&tile);
        *out = GliomaQcVerdict {
            bright_pixel_fraction: v.bright_pixel_fraction,
            negative: i32::from(v.verdict == Verdict::NegativeN),
        };
        Ok(())
    })
}
