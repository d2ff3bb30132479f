//! C interface to the defect-synth library.
//!
//! Every function returns a [`DsStatus`]. On failure the message is kept in a
//! thread-local slot readable with [`ds_last_error_message`]. Objects are
//! opaque handles created by `*_new` / `*_load` functions and released with
//! the matching `*_free`. Panics never cross the boundary; they are reported
//! as [`DsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use defect_synth::bench::{synth_background, Domain, TextureSpec};
use defect_synth::diffusion::{Checkpoint, NoiseSchedule};
use defect_synth::eval::{average_precision, iou, match_detections, BBox, Detection, GroundTruthBox};
use defect_synth::generation::{generate_defect, GenerationOptions, GenerationRequest};
use defect_synth::imageio::{load_mask_png, load_png, save_png};
use defect_synth::integration::{integrate_images, poisson_blend, IntegrationConfig, Solver};
use defect_synth::inversion::{load_embedding, ConceptEmbedding};
use defect_synth::{BinaryMask, Error, Grid};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Data = 6,
    NonFinite = 7,
    NoConvergence = 8,
    Uncalibrated = 9,
    Panic = 10,
}

impl From<&Error> for DsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parameter(_) | Error::Config(_) => DsStatus::InvalidArgument,
            Error::Shape(_) => DsStatus::ShapeMismatch,
            Error::Format { .. } | Error::Json(_) | Error::Image { .. } => DsStatus::Format,
            Error::Io { .. } => DsStatus::Io,
            Error::Data(_) => DsStatus::Data,
            Error::NonFinite { .. } => DsStatus::NonFinite,
            Error::NoConvergence { .. } => DsStatus::NoConvergence,
            Error::Uncalibrated(_) => DsStatus::Uncalibrated,
            Error::Stage { source, .. } => DsStatus::from(source.as_ref()),
        }
    }
}

/// Surface family for [`ds_texture_synthesize`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsDomain {
    SurfaceA = 0,
    SurfaceB = 1,
}

/// Half-open box `[x_min, x_max) × [y_min, y_max)` on image `image`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsBox {
    pub image: u32,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsDetection {
    pub bbox: DsBox,
    pub confidence: f64,
}

/// Channel-major `f32` image with values in `[0, 1]`.
pub struct DsImage(Grid);

/// Binary mask; nonzero bytes are inside.
pub struct DsMask(BinaryMask);

/// Trained denoiser, schedule and autoencoder.
pub struct DsCheckpoint(Checkpoint);

/// Learned concept vector.
pub struct DsEmbedding(ConceptEmbedding);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(DsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(DsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DsStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DsStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. The pointer stays valid until the next call on the same
/// thread.
#[no_mangle]
pub extern "C" fn ds_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Copy `channels * height * width` floats from `data` into a new image.
///
/// # Safety
/// `data` must point to that many readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_image_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out: *mut *mut DsImage,
) -> DsStatus {
    guard(|| {
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| invalid("image size overflows"))?;
        let values = slice(data, n, "data")?.to_vec();
        put(out, DsImage(Grid::from_vec(channels, height, width, values)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_image_load_png(path: *const c_char, out: *mut *mut DsImage) -> DsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, DsImage(load_png(&p)?))
    })
}

/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_image_save_png(image: *const DsImage, path: *const c_char) -> DsStatus {
    guard(|| {
        let img = as_ref(image, "image")?;
        let p = path_arg(path, "path")?;
        Ok(save_png(&img.0, &p)?)
    })
}

/// # Safety
/// `image` must be a live handle; the out pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ds_image_shape(
    image: *const DsImage,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> DsStatus {
    guard(|| {
        let (c, h, w) = as_ref(image, "image")?.0.shape();
        for (p, v) in [(channels, c), (height, h), (width, w)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the image's channel-major floats, valid while the
/// handle lives. NULL for a NULL handle.
///
/// # Safety
/// `image` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_image_data(image: *const DsImage) -> *const f32 {
    image.as_ref().map_or(std::ptr::null(), |i| i.0.data().as_ptr())
}

/// # Safety
/// `image` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_image_free(image: *mut DsImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Copy `height * width` bytes (nonzero = inside) into a new mask.
///
/// # Safety
/// `data` must point to that many readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_mask_new(height: usize, width: usize, data: *const u8, out: *mut *mut DsMask) -> DsStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("mask size overflows"))?;
        let values = slice(data, n, "data")?.iter().map(|&v| u8::from(v != 0)).collect();
        put(out, DsMask(BinaryMask::from_vec(height, width, values)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_mask_load_png(path: *const c_char, out: *mut *mut DsMask) -> DsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, DsMask(load_mask_png(&p)?))
    })
}

/// # Safety
/// `mask` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_mask_free(mask: *mut DsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Deterministic procedural background.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_texture_synthesize(
    domain: DsDomain,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut DsImage,
) -> DsStatus {
    guard(|| {
        let d = match domain {
            DsDomain::SurfaceA => Domain::A,
            DsDomain::SurfaceB => Domain::B,
        };
        put(out, DsImage(synth_background(&TextureSpec::new(d, height, width, seed))?))
    })
}

/// Gradient-domain blend of `source` into `target` over `mask`, without
/// colour matching.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_poisson_blend(
    source: *const DsImage,
    target: *const DsImage,
    mask: *const DsMask,
    out: *mut *mut DsImage,
) -> DsStatus {
    guard(|| {
        let (s, t, m) = (as_ref(source, "source")?, as_ref(target, "target")?, as_ref(mask, "mask")?);
        let r = poisson_blend(&s.0, &t.0, &m.0, Solver::Auto, IntegrationConfig::default().tol)?;
        put(out, DsImage(r.image))
    })
}

/// Colour and lighting matching followed by the gradient-domain blend, with
/// default settings.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_integrate(
    source: *const DsImage,
    background: *const DsImage,
    mask: *const DsMask,
    out: *mut *mut DsImage,
) -> DsStatus {
    guard(|| {
        let (s, b, m) = (as_ref(source, "source")?, as_ref(background, "background")?, as_ref(mask, "mask")?);
        let r = integrate_images(&s.0, &b.0, &m.0, &IntegrationConfig::default())?;
        put(out, DsImage(r.image))
    })
}

fn to_bbox(b: &DsBox) -> Result<BBox, Fail> {
    Ok(BBox::new(b.x_min, b.y_min, b.x_max, b.y_max)?)
}

/// Intersection over union of two boxes; 0 when either is invalid or empty.
/// The image indices are ignored.
///
/// # Safety
/// Both pointers must be NULL or readable.
#[no_mangle]
pub unsafe extern "C" fn ds_iou(a: *const DsBox, b: *const DsBox) -> f64 {
    match (a.as_ref(), b.as_ref()) {
        (Some(a), Some(b)) => match (to_bbox(a), to_bbox(b)) {
            (Ok(a), Ok(b)) => iou(&a, &b),
            _ => 0.0,
        },
        _ => 0.0,
    }
}

/// Average precision of `detections` against `ground_truth` at the given IoU
/// threshold (all-point interpolation).
///
/// # Safety
/// The arrays must hold the stated number of elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ds_average_precision(
    detections: *const DsDetection,
    n_detections: usize,
    ground_truth: *const DsBox,
    n_ground_truth: usize,
    iou_threshold: f64,
    out: *mut f64,
) -> DsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err(invalid(format!("IoU threshold {iou_threshold} outside [0, 1]")));
        }
        let dets = slice(detections, n_detections, "detections")?
            .iter()
            .map(|d| {
                if !(0.0..=1.0).contains(&d.confidence) {
                    return Err(invalid(format!("confidence {} outside [0, 1]", d.confidence)));
                }
                Ok(Detection {
                    image_id: d.bbox.image.to_string(),
                    bbox: to_bbox(&d.bbox)?,
                    confidence: d.confidence,
                })
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let gts = slice(ground_truth, n_ground_truth, "ground truth")?
            .iter()
            .map(|g| {
                Ok(GroundTruthBox {
                    image_id: g.image.to_string(),
                    bbox: to_bbox(g)?,
                })
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let m = match_detections(&dets, &gts, iou_threshold);
        *out = average_precision(&m.labeled, m.total_gt)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_checkpoint_load(path: *const c_char, out: *mut *mut DsCheckpoint) -> DsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, DsCheckpoint(Checkpoint::load(&p)?))
    })
}

/// # Safety
/// `checkpoint` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_checkpoint_free(checkpoint: *mut DsCheckpoint) {
    if !checkpoint.is_null() {
        drop(Box::from_raw(checkpoint));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_embedding_load(path: *const c_char, out: *mut *mut DsEmbedding) -> DsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, DsEmbedding(load_embedding(&p)?))
    })
}

/// # Safety
/// `embedding` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_embedding_free(embedding: *mut DsEmbedding) {
    if !embedding.is_null() {
        drop(Box::from_raw(embedding));
    }
}

/// Inpaint the concept into `background` under `mask`. `prompt` must contain
/// the placeholder `S*`; NULL uses "a photo of S*". The result is the hard
/// composite, before integration.
///
/// # Safety
/// Handles must be live; `prompt` NULL or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_generate(
    checkpoint: *const DsCheckpoint,
    embedding: *const DsEmbedding,
    background: *const DsImage,
    mask: *const DsMask,
    prompt: *const c_char,
    seed: u64,
    out: *mut *mut DsImage,
) -> DsStatus {
    guard(|| {
        let ck = &as_ref(checkpoint, "checkpoint")?.0;
        let emb = &as_ref(embedding, "embedding")?.0;
        let bg = &as_ref(background, "background")?.0;
        let m = &as_ref(mask, "mask")?.0;
        let mut options = GenerationOptions::default();
        if !prompt.is_null() {
            options.prompt = CStr::from_ptr(prompt)
                .to_str()
                .map_err(|_| invalid("prompt is not UTF-8"))?
                .to_string();
        }
        let req = GenerationRequest {
            background: bg.clone(),
            defect_mask: m.clone(),
            embedding: emb.clone(),
            seed,
            options,
        };
        let sched = NoiseSchedule::from_config(&ck.schedule)?;
        let r = generate_defect(&req, &ck.model, &ck.autoencoder, &sched)?;
        put(out, DsImage(r.image))
    })
}
