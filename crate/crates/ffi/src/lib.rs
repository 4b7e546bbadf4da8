//! C ABI over the voxmt pipeline. Handles are opaque; every call returns a
//! [`VoxmtStatus`] and leaves a message for [`voxmt_last_error`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use voxmt::config::RunConfig;
use voxmt::io::{decode_checkpoint, read_file};
use voxmt::model::{Model, Prediction};
use voxmt::voxel::PointCloud;
use voxmt::{Error, Mat};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoxmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    ConfigMismatch = 6,
    Shape = 7,
    Label = 8,
    Numeric = 9,
    Internal = 10,
    Panic = 11,
}

pub struct VoxmtModel {
    model: Model<f32>,
}

pub struct VoxmtPrediction {
    prediction: Prediction,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VoxmtBox {
    pub center: [f32; 3],
    pub size: [f32; 3],
    pub yaw: f32,
    pub velocity: [f32; 2],
    pub score: f32,
    pub class_id: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VoxmtStatus {
    match e {
        Error::File { source, .. } => status_of(source),
        Error::Io(_) => VoxmtStatus::Io,
        Error::Format { .. } => VoxmtStatus::Format,
        Error::Config(_) | Error::Grid(_) | Error::InvalidKernel(_) | Error::Augment(_) => {
            VoxmtStatus::Config
        }
        Error::ConfigMismatch => VoxmtStatus::ConfigMismatch,
        Error::Shape(_) => VoxmtStatus::Shape,
        Error::Label { .. } => VoxmtStatus::Label,
        Error::NonFiniteLoss { .. } => VoxmtStatus::Numeric,
        _ => VoxmtStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (VoxmtStatus, String)>) -> VoxmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VoxmtStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            VoxmtStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (VoxmtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VoxmtStatus, String) {
    (VoxmtStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (VoxmtStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (VoxmtStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message describing the most recent failure on this thread, or null.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn voxmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by `voxmt train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn voxmt_model_load(
    path: *const c_char,
    out: *mut *mut VoxmtModel,
) -> VoxmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let model = read_file(Path::new(path), decode_checkpoint).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VoxmtModel { model }));
        Ok(())
    })
}

/// Builds a freshly initialized model from TOML config text.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn voxmt_model_from_config(
    config_toml: *const c_char,
    out: *mut *mut VoxmtModel,
) -> VoxmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_toml(str_arg(config_toml, "config_toml")?).map_err(lib_err)?;
        let model = Model::new(cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VoxmtModel { model }));
        Ok(())
    })
}

/// Point channels the model expects (xyz plus extras).
///
/// # Safety
/// `model` must come from a `voxmt_model_*` constructor; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn voxmt_model_channels(
    model: *const VoxmtModel,
    out: *mut usize,
) -> VoxmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.config.backbone.in_channels;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from a `voxmt_model_*` constructor, and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn voxmt_model_free(model: *mut VoxmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs segmentation and detection on `num_points` row-major points of
/// `channels` floats each.
///
/// # Safety
/// `points` must hold `num_points * channels` floats (it may be null when
/// `num_points` is 0); `model` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn voxmt_predict(
    model: *const VoxmtModel,
    points: *const f32,
    num_points: usize,
    channels: usize,
    out: *mut *mut VoxmtPrediction,
) -> VoxmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let len = num_points.checked_mul(channels).ok_or_else(|| {
            (
                VoxmtStatus::InvalidArgument,
                "point buffer size overflows".into(),
            )
        })?;
        let data = if len == 0 {
            Vec::new()
        } else if points.is_null() {
            return Err(null("points"));
        } else {
            std::slice::from_raw_parts(points, len).to_vec()
        };
        let pc = PointCloud::new(Mat::from_vec(num_points, channels, data).map_err(lib_err)?)
            .map_err(lib_err)?;
        let scene = m.model.prepare(pc).map_err(lib_err)?;
        let prediction = m.model.predict(&scene).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VoxmtPrediction { prediction }));
        Ok(())
    })
}

/// Number of per-point labels (equal to the input point count).
///
/// # Safety
/// `pred` must be null or a live prediction handle.
#[no_mangle]
pub unsafe extern "C" fn voxmt_prediction_num_points(pred: *const VoxmtPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.prediction.labels.len())
}

/// Labels in `1..=K`, owned by the prediction handle.
///
/// # Safety
/// `pred` must be null or a live prediction handle.
#[no_mangle]
pub unsafe extern "C" fn voxmt_prediction_labels(pred: *const VoxmtPrediction) -> *const u8 {
    pred.as_ref()
        .map_or(ptr::null(), |p| p.prediction.labels.as_ptr())
}

/// # Safety
/// `pred` must be null or a live prediction handle.
#[no_mangle]
pub unsafe extern "C" fn voxmt_prediction_num_boxes(pred: *const VoxmtPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.prediction.boxes.len())
}

/// # Safety
/// `pred` must be a live prediction handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn voxmt_prediction_box(
    pred: *const VoxmtPrediction,
    index: usize,
    out: *mut VoxmtBox,
) -> VoxmtStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("pred"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let b = p.prediction.boxes.get(index).ok_or_else(|| {
            (
                VoxmtStatus::InvalidArgument,
                format!(
                    "box {index} out of range ({} boxes)",
                    p.prediction.boxes.len()
                ),
            )
        })?;
        *out = VoxmtBox {
            center: b.center.map(|v| v as f32),
            size: b.size.map(|v| v as f32),
            yaw: b.yaw as f32,
            velocity: b.velocity.map(|v| v as f32),
            score: b.score as f32,
            class_id: b.class,
        };
        Ok(())
    })
}

/// # Safety
/// `pred` must be null or a live prediction handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn voxmt_prediction_free(pred: *mut VoxmtPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}
