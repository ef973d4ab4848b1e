//! C ABI for comptraj.
//!
//! Every entry point returns a [`CtStatus`]; on failure the message is kept
//! per thread and read with [`ct_last_error`]. Loaded artifacts are opaque
//! handles released with their `_free` function. Panics never cross the
//! boundary; they surface as `CT_STATUS_PANIC`.
//!
//! Grids are dense with x varying fastest: index `(t * H + y) * W + x`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use comptraj::dt::{gdt2, gdt3, DeformWeights2, DeformWeights3, ScoreVolume};
use comptraj::evalkit::{volume_iou, Volume};
use comptraj::featmap::build_pyramid;
use comptraj::hierarchy::Hierarchy;
use comptraj::lastdpm::{infer, InferOptions, LastdpmModel};
use comptraj::pipeline::read_elements;
use comptraj::trajkit::{read_codebook, read_trajectories, Codebook};
use comptraj::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ConfigMismatch = 5,
    Failed = 6,
    Panic = 7,
}

/// Loaded descriptor codebook.
pub struct CtCodebook(Codebook);

/// Loaded trajectory hierarchy.
pub struct CtHierarchy(Hierarchy);

/// Loaded LASTDPM detector.
pub struct CtModel(LastdpmModel);

/// One detection: score and volume `x1, y1, t1, x2, y2, t2` (pixels, frames).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtDetection {
    pub score: f64,
    pub volume: [f64; 6],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CtStatus {
    match e {
        Error::Io(_) => CtStatus::Io,
        Error::Format(_) => CtStatus::Format,
        Error::ConfigMismatch(_) | Error::HashMismatch { .. } => CtStatus::ConfigMismatch,
        Error::ShapeMismatch(_)
        | Error::DimensionMismatch { .. }
        | Error::NonConvexWeights(_)
        | Error::OutOfBounds(_)
        | Error::EmptyInput(_)
        | Error::ConfigInvalid(_) => CtStatus::InvalidArgument,
        _ => CtStatus::Failed,
    }
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Lib(Error::Io(e))
    }
}

/// Run `f`, record any failure and translate it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CtStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            CtStatus::NullPointer
        }
        Ok(Err(Fail::Invalid(msg))) => {
            set_error(&msg);
            CtStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            CtStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn reference<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(value);
    Ok(())
}

fn open(path: &PathBuf) -> Result<BufReader<File>, Fail> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Fail::Lib(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

/// Message of the last failed call on this thread, or "" after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a binary codebook file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_codebook_load(path: *const c_char, out: *mut *mut CtCodebook) -> CtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = path_arg(path, "path")?;
        let (cb, _) = read_codebook(open(&path)?)?;
        *out = Box::into_raw(Box::new(CtCodebook(cb)));
        Ok(())
    })
}

/// # Safety
/// `cb` must come from [`ct_codebook_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ct_codebook_free(cb: *mut CtCodebook) {
    if !cb.is_null() {
        drop(Box::from_raw(cb));
    }
}

/// Number of codewords and descriptor dimension.
///
/// # Safety
/// `cb` must be a live handle; `k` and `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_codebook_shape(cb: *const CtCodebook, k: *mut usize, dim: *mut usize) -> CtStatus {
    guard(|| {
        let cb = reference(cb, "codebook")?;
        write_out(k, cb.0.k(), "k")?;
        write_out(dim, cb.0.dim(), "dim")
    })
}

/// Nearest codeword of one descriptor (lowest index on ties).
///
/// # Safety
/// `descriptor` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_codebook_nearest(
    cb: *const CtCodebook,
    descriptor: *const f32,
    len: usize,
    out: *mut usize,
) -> CtStatus {
    guard(|| {
        let cb = reference(cb, "codebook")?;
        let d = slice(descriptor, len, "descriptor")?;
        write_out(out, cb.0.nearest(d)?, "out")
    })
}

unsafe fn write_gdt(
    out: &comptraj::dt::GdtOutput,
    axes: usize,
    values: *mut f64,
    argmax: *mut usize,
) -> Result<(), Fail> {
    let n = out.values.len();
    if values.is_null() {
        return Err(Fail::Null("out_values"));
    }
    std::slice::from_raw_parts_mut(values, n).copy_from_slice(out.values.values());
    if !argmax.is_null() {
        let dst = std::slice::from_raw_parts_mut(argmax, n * axes);
        for (i, a) in out.argmax.iter().enumerate() {
            dst[i * axes..(i + 1) * axes].copy_from_slice(&a[..axes]);
        }
    }
    Ok(())
}

/// 3D generalized distance transform of a `dims[0] x dims[1] x dims[2]`
/// grid: `out[p] = max_q scores[q] - d . (dx, dy, dt, dx^2, dy^2, dt^2)` with
/// `(dx, dy, dt) = q - p`. `weights` is `(lx, ly, lt, qx, qy, qt)`; every
/// quadratic weight must be at least 0.01. `out_argmax` (optional, may be
/// null) receives `(x, y, t)` of the maximizer for every cell.
///
/// # Safety
/// `scores` and `out_values` must hold `W*H*T` doubles, `out_argmax` (if not
/// null) `3*W*H*T` sizes; `dims` 3 sizes, `weights` 6 doubles.
#[no_mangle]
pub unsafe extern "C" fn ct_gdt3(
    scores: *const f64,
    dims: *const usize,
    weights: *const f64,
    out_values: *mut f64,
    out_argmax: *mut usize,
) -> CtStatus {
    guard(|| {
        let dims: [usize; 3] = slice(dims, 3, "dims")?.try_into().expect("three");
        let w: [f64; 6] = slice(weights, 6, "weights")?.try_into().expect("six");
        let n = dims.iter().product();
        let vol = ScoreVolume::new(dims, slice(scores, n, "scores")?.to_vec())?;
        let out = gdt3(&vol, &DeformWeights3::from_slice(&w))?;
        write_gdt(&out, 3, out_values, out_argmax)
    })
}

/// 2D transform of every time slice of a `dims[0] x dims[1] x dims[2]` grid.
/// `weights` is `(lx, ly, qx, qy)`; `out_argmax` receives `(x, y)` per cell.
///
/// # Safety
/// As [`ct_gdt3`], with `2*W*H*T` sizes for `out_argmax` and 4 weights.
#[no_mangle]
pub unsafe extern "C" fn ct_gdt2(
    scores: *const f64,
    dims: *const usize,
    weights: *const f64,
    out_values: *mut f64,
    out_argmax: *mut usize,
) -> CtStatus {
    guard(|| {
        let dims: [usize; 3] = slice(dims, 3, "dims")?.try_into().expect("three");
        let w: [f64; 4] = slice(weights, 4, "weights")?.try_into().expect("four");
        let n = dims.iter().product();
        let vol = ScoreVolume::new(dims, slice(scores, n, "scores")?.to_vec())?;
        let out = gdt2(&vol, &DeformWeights2::from_slice(&w))?;
        write_gdt(&out, 2, out_values, out_argmax)
    })
}

/// Intersection over union of two volumes `x1, y1, t1, x2, y2, t2`.
///
/// # Safety
/// `a` and `b` must hold 6 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_volume_iou(a: *const f64, b: *const f64, out: *mut f64) -> CtStatus {
    guard(|| {
        let v = |p: *const f64, what| -> Result<Volume, Fail> {
            let s = slice(p, 6, what)?;
            Ok(Volume::new(s[0], s[1], s[2], s[3], s[4], s[5]))
        };
        write_out(out, volume_iou(&v(a, "a")?, &v(b, "b")?), "out")
    })
}

/// Load a hierarchy JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_hierarchy_load(path: *const c_char, out: *mut *mut CtHierarchy) -> CtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = path_arg(path, "path")?;
        let (h, _) = Hierarchy::read_json(open(&path)?)?;
        *out = Box::into_raw(Box::new(CtHierarchy(h)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`ct_hierarchy_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ct_hierarchy_free(h: *mut CtHierarchy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of layers, layer 0 included.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_hierarchy_depth(h: *const CtHierarchy, out: *mut usize) -> CtStatus {
    guard(|| write_out(out, reference(h, "hierarchy")?.0.depth(), "out"))
}

/// Number of element types of `layer`.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_hierarchy_inventory_size(h: *const CtHierarchy, layer: usize, out: *mut usize) -> CtStatus {
    guard(|| {
        let h = &reference(h, "hierarchy")?.0;
        if layer >= h.depth() {
            return Err(Fail::Invalid(format!("layer {layer} beyond depth {}", h.depth())));
        }
        write_out(out, h.inventory_size(layer), "out")
    })
}

/// Load a LASTDPM model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_load(path: *const c_char, out: *mut *mut CtModel) -> CtStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = path_arg(path, "path")?;
        let (m, _) = LastdpmModel::read_json(open(&path)?)?;
        *out = Box::into_raw(Box::new(CtModel(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`ct_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ct_model_free(m: *mut CtModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Calibrated detection threshold of the model.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_threshold(m: *const CtModel, out: *mut f64) -> CtStatus {
    guard(|| write_out(out, reference(m, "model")?.0.threshold, "out"))
}

/// Detect with `model` on one video given its element file (as written by
/// `comptraj detect-elements`) and its trajectory file (for the video size).
/// `threshold` overrides the model threshold unless it is NaN. On success
/// `*out` owns `*count` detections, sorted by descending score; release them
/// with [`ct_detections_free`].
///
/// # Safety
/// Handles must be live, paths NUL-terminated, `out` and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_detect(
    model: *const CtModel,
    hierarchy: *const CtHierarchy,
    elements_path: *const c_char,
    trajectories_path: *const c_char,
    threshold: f64,
    out: *mut *mut CtDetection,
    count: *mut usize,
) -> CtStatus {
    guard(|| {
        let model = &reference(model, "model")?.0;
        let h = &reference(hierarchy, "hierarchy")?.0;
        if out.is_null() || count.is_null() {
            return Err(Fail::Null("out"));
        }
        let (detections, _) = read_elements(&path_arg(elements_path, "elements_path")?)?;
        let video = read_trajectories(open(&path_arg(trajectories_path, "trajectories_path")?)?)?.video;
        let inventories: Vec<usize> = (0..h.depth()).map(|l| h.inventory_size(l)).collect();
        let pyramid = build_pyramid(&detections.layers, &inventories, &model.features, video)?;
        let options = InferOptions {
            threshold: (!threshold.is_nan()).then_some(threshold),
            ..Default::default()
        };
        let dets: Box<[CtDetection]> = infer(model, &pyramid, &options)?
            .into_iter()
            .map(|d| CtDetection {
                score: d.score,
                volume: d.volume.as_array(),
            })
            .collect();
        *count = dets.len();
        *out = if dets.is_empty() {
            ptr::null_mut()
        } else {
            Box::into_raw(dets) as *mut CtDetection
        };
        Ok(())
    })
}

/// # Safety
/// `dets` and `count` must come from one [`ct_model_detect`] call. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ct_detections_free(dets: *mut CtDetection, count: usize) {
    if !dets.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(dets, count)));
    }
}
