//! C ABI over the `protodetect` engine.
//!
//! Handles are opaque pointers created by `pd_*_load`/`pd_*_new` and
//! released with the matching `pd_*_free`. Every fallible call returns a
//! [`PdStatus`]; on failure, [`pd_last_error_message`] describes the error
//! for the calling thread. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use protodetect::classifier::{detect_image, score_box, similarity_map, DetectOptions, ScoreMode};
use protodetect::geometry::iou;
use protodetect::io::{fmap, protofile};
use protodetect::{Detection, Error, FeatureMap, PixelBox, PrototypeSet};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    DegenerateBox = 6,
    OutOfRange = 7,
    Panic = 8,
    Other = 9,
}

/// Axis-aligned box in continuous pixel coordinates, half-open.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdDetection {
    pub bbox: PdBox,
    pub class_id: u32,
    pub score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PdFeatureMapInfo {
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    pub patch_size: u32,
    pub image_h: u32,
    pub image_w: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PdPrototypeInfo {
    pub num_rows: u32,
    pub num_objects: u32,
    pub num_background: u32,
    pub dim: u32,
    pub temperature: f64,
}

/// Feature grid of one image.
pub struct PdFeatureMap {
    inner: FeatureMap,
}

/// Object and background prototypes with their class names.
pub struct PdPrototypeSet {
    inner: PrototypeSet,
    labels: Vec<CString>,
}

/// Detections of one `pd_detect` call, in NMS kept order.
pub struct PdDetections {
    items: Vec<Detection>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(err: &Error) -> PdStatus {
    match err {
        Error::Io { .. } => PdStatus::Io,
        Error::Format { .. } | Error::Json(_) => PdStatus::Format,
        Error::DimensionMismatch { .. } => PdStatus::DimensionMismatch,
        Error::DegenerateBox(..) => PdStatus::DegenerateBox,
        Error::Config(_) | Error::UnknownClass(_) | Error::NonFinite(_) => PdStatus::InvalidArgument,
        _ => PdStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PdStatus, String)>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PdStatus::Panic
        }
    }
}

fn lift(err: Error) -> (PdStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (PdStatus, String) {
    (PdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (PdStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PdStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (PdStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

impl From<PdBox> for PixelBox {
    fn from(b: PdBox) -> Self {
        PixelBox::new(b.x_min, b.y_min, b.x_max, b.y_max)
    }
}

impl From<PixelBox> for PdBox {
    fn from(b: PixelBox) -> Self {
        PdBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next `pd_*` call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn pd_feature_map_load(path: *const c_char, out: *mut *mut PdFeatureMap) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let fm = fmap::read(&path_arg(path)?).map_err(lift)?;
        *out = Box::into_raw(Box::new(PdFeatureMap { inner: fm }));
        Ok(())
    })
}

/// Builds a feature map from `grid_h * grid_w * dim` row-major floats.
#[no_mangle]
pub unsafe extern "C" fn pd_feature_map_new(
    info: *const PdFeatureMapInfo,
    data: *const f32,
    len: usize,
    out: *mut *mut PdFeatureMap,
) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let info = info.as_ref().ok_or_else(|| null("info"))?;
        let data = slice_arg(data, len, "data")?;
        let fm = FeatureMap::new(
            info.grid_h as usize,
            info.grid_w as usize,
            info.dim as usize,
            info.patch_size as usize,
            info.image_h as usize,
            info.image_w as usize,
            data.to_vec(),
        )
        .map_err(lift)?;
        *out = Box::into_raw(Box::new(PdFeatureMap { inner: fm }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pd_feature_map_info(fm: *const PdFeatureMap, out: *mut PdFeatureMapInfo) -> PdStatus {
    guard(|| {
        let fm = &fm.as_ref().ok_or_else(|| null("feature map"))?.inner;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = PdFeatureMapInfo {
            grid_h: fm.grid_h() as u32,
            grid_w: fm.grid_w() as u32,
            dim: fm.dim() as u32,
            patch_size: fm.patch_size() as u32,
            image_h: fm.image_h() as u32,
            image_w: fm.image_w() as u32,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pd_feature_map_free(fm: *mut PdFeatureMap) {
    if !fm.is_null() {
        drop(Box::from_raw(fm));
    }
}

#[no_mangle]
pub unsafe extern "C" fn pd_prototypes_load(path: *const c_char, out: *mut *mut PdPrototypeSet) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let set = protofile::read(&path_arg(path)?).map_err(lift)?;
        let table = set.class_table();
        let labels = (0..set.num_rows())
            .map(|r| CString::new(table.row_label(r).replace('\0', " ")).expect("no interior NUL"))
            .collect();
        *out = Box::into_raw(Box::new(PdPrototypeSet { inner: set, labels }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pd_prototypes_info(p: *const PdPrototypeSet, out: *mut PdPrototypeInfo) -> PdStatus {
    guard(|| {
        let p = &p.as_ref().ok_or_else(|| null("prototype set"))?.inner;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let t = p.class_table();
        *out = PdPrototypeInfo {
            num_rows: p.num_rows() as u32,
            num_objects: t.num_objects() as u32,
            num_background: t.num_background() as u32,
            dim: p.dim() as u32,
            temperature: p.temperature(),
        };
        Ok(())
    })
}

/// Label of prototype row `row` (class name or `bg_<k>`), or null when out
/// of range. Owned by the prototype set.
#[no_mangle]
pub unsafe extern "C" fn pd_prototypes_row_label(p: *const PdPrototypeSet, row: u32) -> *const c_char {
    match p.as_ref().and_then(|p| p.labels.get(row as usize)) {
        Some(s) => s.as_ptr(),
        None => ptr::null(),
    }
}

#[no_mangle]
pub unsafe extern "C" fn pd_prototypes_free(p: *mut PdPrototypeSet) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Box-averaged cosine similarity against every prototype row; writes
/// `num_rows` values into `scores`.
#[no_mangle]
pub unsafe extern "C" fn pd_score_box(
    fm: *const PdFeatureMap,
    p: *const PdPrototypeSet,
    bbox: *const PdBox,
    scores: *mut f64,
    scores_len: usize,
) -> PdStatus {
    guard(|| {
        let fm = &fm.as_ref().ok_or_else(|| null("feature map"))?.inner;
        let p = &p.as_ref().ok_or_else(|| null("prototype set"))?.inner;
        let b = *bbox.as_ref().ok_or_else(|| null("box"))?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        if scores_len < p.num_rows() {
            return Err((
                PdStatus::OutOfRange,
                format!("scores buffer holds {scores_len} values, need {}", p.num_rows()),
            ));
        }
        let sim = similarity_map(fm, p).map_err(lift)?;
        let s = score_box(&sim, &b.into()).map_err(lift)?;
        std::slice::from_raw_parts_mut(scores, s.len()).copy_from_slice(&s);
        Ok(())
    })
}

/// Classifies `num_proposals` boxes, drops background verdicts and applies
/// per-class NMS (class-agnostic when `class_agnostic_nms` is non-zero).
/// `margin_score` non-zero subtracts the best background score.
#[no_mangle]
pub unsafe extern "C" fn pd_detect(
    fm: *const PdFeatureMap,
    p: *const PdPrototypeSet,
    proposals: *const PdBox,
    num_proposals: usize,
    nms_iou: f64,
    margin_score: i32,
    class_agnostic_nms: i32,
    out: *mut *mut PdDetections,
) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let fm = &fm.as_ref().ok_or_else(|| null("feature map"))?.inner;
        let p = &p.as_ref().ok_or_else(|| null("prototype set"))?.inner;
        if !(0.0..=1.0).contains(&nms_iou) {
            return Err((
                PdStatus::InvalidArgument,
                format!("nms_iou must lie in [0, 1], got {nms_iou}"),
            ));
        }
        let boxes: Vec<PixelBox> = slice_arg(proposals, num_proposals, "proposals")?
            .iter()
            .map(|b| (*b).into())
            .collect();
        let opts = DetectOptions {
            nms_iou,
            score_mode: if margin_score != 0 {
                ScoreMode::Margin
            } else {
                ScoreMode::Raw
            },
            class_agnostic_nms: class_agnostic_nms != 0,
        };
        let items = detect_image(fm, &boxes, p, &opts).map_err(lift)?;
        *out = Box::into_raw(Box::new(PdDetections { items }));
        Ok(())
    })
}

/// Number of detections; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pd_detections_len(d: *const PdDetections) -> usize {
    d.as_ref().map_or(0, |d| d.items.len())
}

#[no_mangle]
pub unsafe extern "C" fn pd_detections_get(d: *const PdDetections, index: usize, out: *mut PdDetection) -> PdStatus {
    guard(|| {
        let d = d.as_ref().ok_or_else(|| null("detections"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let item = d.items.get(index).ok_or_else(|| {
            (
                PdStatus::OutOfRange,
                format!("index {index} out of range for {} detections", d.items.len()),
            )
        })?;
        *out = PdDetection {
            bbox: item.bbox.into(),
            class_id: item.class_id as u32,
            score: item.score,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pd_detections_free(d: *mut PdDetections) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Intersection over union; 0 when either pointer is null.
#[no_mangle]
pub unsafe extern "C" fn pd_iou(a: *const PdBox, b: *const PdBox) -> f64 {
    match (a.as_ref(), b.as_ref()) {
        (Some(a), Some(b)) => iou(&(*a).into(), &(*b).into()),
        _ => 0.0,
    }
}
