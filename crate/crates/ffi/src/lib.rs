//! C ABI over `mal-core`.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`MalStatus`]; on failure the
//! message is kept per thread and read with [`mal_last_error`]. Panics are
//! caught at the boundary and reported as `MAL_STATUS_PANIC`.
//! Configuration is passed as TOML text; a null or empty string means defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mal_core::cli::parse_toml;
use mal_core::eval::{detect, evaluate, InferenceConfig};
use mal_core::geometry::{generate_anchors, BBox};
use mal_core::mal::{Method, TrainConfig, Trainer};
use mal_core::model::{render_features, Checkpoint};
use mal_core::scenes::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split};
use mal_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidBox = 3,
    Config = 4,
    Io = 5,
    Parse = 6,
    ShapeMismatch = 7,
    NonFinite = 8,
    Infeasible = 9,
    Checkpoint = 10,
    Diverged = 11,
    MissingCache = 12,
    Panic = 13,
}

impl From<&Error> for MalStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidBox { .. } => MalStatus::InvalidBox,
            Error::InvalidArgument(_) => MalStatus::InvalidArgument,
            Error::Config(_) => MalStatus::Config,
            Error::Io { .. } => MalStatus::Io,
            Error::Parse { .. } => MalStatus::Parse,
            Error::ShapeMismatch(_) => MalStatus::ShapeMismatch,
            Error::NonFinite(_) => MalStatus::NonFinite,
            Error::Infeasible(_) => MalStatus::Infeasible,
            Error::Checkpoint(_) => MalStatus::Checkpoint,
            Error::Diverged { .. } => MalStatus::Diverged,
            Error::MissingCache => MalStatus::MissingCache,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalSplit {
    Train = 0,
    Val = 1,
    All = 2,
}

impl From<MalSplit> for Split {
    fn from(s: MalSplit) -> Self {
        match s {
            MalSplit::Train => Split::Train,
            MalSplit::Val => Split::Val,
            MalSplit::All => Split::All,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MalBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MalDetection {
    pub bbox: MalBox,
    pub class_id: u32,
    pub score: f64,
}

/// Headline metrics; absent values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MalEvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub score_iou_correlation: f64,
    pub scenes: usize,
    pub detections: usize,
}

/// Opaque scene collection.
pub struct MalDataset {
    inner: Dataset,
}

/// Opaque trained scorer with its anchor/render spec.
pub struct MalModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MalStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MalStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MalStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("panic: {msg}"));
            MalStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(MalStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(if s.is_empty() { None } else { Some(s) })
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    unsafe { opt_str(p, what) }?.ok_or_else(|| null(what))
}

fn to_bbox(b: &MalBox) -> Result<BBox, Failure> {
    Ok(BBox::new(b.x1, b.y1, b.x2, b.y2)?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn mal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `a`, `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mal_iou(a: *const MalBox, b: *const MalBox, out: *mut f64) -> MalStatus {
    guard(|| {
        let (a, b) = unsafe { (a.as_ref(), b.as_ref()) };
        let (a, b) = (a.ok_or_else(|| null("a"))?, b.ok_or_else(|| null("b"))?);
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = mal_core::geometry::iou(&to_bbox(a)?, &to_bbox(b)?)?;
        Ok(())
    })
}

/// Generates a dataset from TOML generator settings.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mal_dataset_generate(config_toml: *const c_char, out: *mut *mut MalDataset) -> MalStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let cfg: DatasetConfig = match unsafe { opt_str(config_toml, "config") }? {
            Some(t) => parse_toml(t, "dataset config")?,
            None => DatasetConfig::default(),
        };
        let inner = generate_dataset(&cfg)?;
        *out = Box::into_raw(Box::new(MalDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mal_dataset_load(path: *const c_char, out: *mut *mut MalDataset) -> MalStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let path = PathBuf::from(unsafe { req_str(path, "path") }?);
        let inner = load_dataset(&mal_core::cli::dataset_file(&path))?;
        *out = Box::into_raw(Box::new(MalDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mal_dataset_save(dataset: *const MalDataset, path: *const c_char) -> MalStatus {
    guard(|| {
        let d = unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?;
        let path = PathBuf::from(unsafe { req_str(path, "path") }?);
        save_dataset(&d.inner, &path)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library; `train` and `val` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mal_dataset_counts(dataset: *const MalDataset, train: *mut usize, val: *mut usize) -> MalStatus {
    guard(|| {
        let d = unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?;
        let train = unsafe { train.as_mut() }.ok_or_else(|| null("train"))?;
        let val = unsafe { val.as_mut() }.ok_or_else(|| null("val"))?;
        *train = d.inner.split(Split::Train).len();
        *val = d.inner.split(Split::Val).len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mal_dataset_free(dataset: *mut MalDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Trains on the train split. `method` is "mal" or "baseline".
///
/// # Safety
/// `dataset` must come from this library; strings must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mal_train(
    dataset: *const MalDataset,
    method: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut MalModel,
) -> MalStatus {
    guard(|| {
        let d = unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let method: Method = unsafe { req_str(method, "method") }?.parse()?;
        let cfg: TrainConfig = match unsafe { opt_str(config_toml, "config") }? {
            Some(t) => parse_toml(t, "train config")?,
            None => TrainConfig::default(),
        };
        let mut trainer = Trainer::new(&d.inner, d.inner.split(Split::Train), method, cfg)?;
        trainer.run(&mut std::io::sink())?;
        *out = Box::into_raw(Box::new(MalModel {
            inner: trainer.checkpoint(),
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mal_model_load(path: *const c_char, out: *mut *mut MalModel) -> MalStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let path = PathBuf::from(unsafe { req_str(path, "path") }?);
        let inner = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(MalModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mal_model_save(model: *const MalModel, path: *const c_char) -> MalStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let path = PathBuf::from(unsafe { req_str(path, "path") }?);
        m.inner.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mal_model_free(model: *mut MalModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Evaluates with default inference settings.
///
/// # Safety
/// Handles must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mal_evaluate(
    model: *const MalModel,
    dataset: *const MalDataset,
    split: MalSplit,
    out: *mut MalEvalSummary,
) -> MalStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let d = unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let r = evaluate(&m.inner, &d.inner, split.into(), &InferenceConfig::default())?;
        *out = MalEvalSummary {
            ap: r.sweep.ap.unwrap_or(f64::NAN),
            ap50: r.sweep.ap50.unwrap_or(f64::NAN),
            ap75: r.sweep.ap75.unwrap_or(f64::NAN),
            score_iou_correlation: r.correlation.unwrap_or(f64::NAN),
            scenes: r.scenes,
            detections: r.detections,
        };
        Ok(())
    })
}

/// Post-NMS detections for scene `scene_index` of the whole dataset.
/// Writes at most `capacity` entries; `total` receives the full count.
///
/// # Safety
/// Handles must come from this library; `out` must hold `capacity` entries (may be null when 0).
#[no_mangle]
pub unsafe extern "C" fn mal_detect(
    model: *const MalModel,
    dataset: *const MalDataset,
    scene_index: usize,
    out: *mut MalDetection,
    capacity: usize,
    total: *mut usize,
) -> MalStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let d = unsafe { dataset.as_ref() }.ok_or_else(|| null("dataset"))?;
        let total = unsafe { total.as_mut() }.ok_or_else(|| null("total"))?;
        if out.is_null() && capacity > 0 {
            return Err(null("out"));
        }
        let scene = d.inner.scenes.get(scene_index).ok_or_else(|| {
            Failure(
                MalStatus::InvalidArgument,
                format!("scene {scene_index} of {}", d.inner.scenes.len()),
            )
        })?;
        let spec = &m.inner.spec;
        if d.inner.class_count != spec.shape.num_classes
            || d.inner.image_width != spec.grid.image_width
            || d.inner.image_height != spec.grid.image_height
        {
            return Err(Error::ShapeMismatch("dataset does not match model".into()).into());
        }
        let anchors = generate_anchors(&spec.grid)?;
        let features = render_features(scene, &spec.feature_config(d.inner.noise_level))?;
        let dets = detect(
            &features,
            &m.inner.params,
            &anchors,
            scene.image_width,
            scene.image_height,
            &InferenceConfig::default(),
        )?
        .detections;
        *total = dets.len();
        for (i, det) in dets.iter().take(capacity).enumerate() {
            let b = det.bbox;
            let entry = MalDetection {
                bbox: MalBox {
                    x1: b.x1,
                    y1: b.y1,
                    x2: b.x2,
                    y2: b.y2,
                },
                class_id: det.class_id as u32,
                score: det.score,
            };
            unsafe { out.add(i).write(entry) };
        }
        Ok(())
    })
}
