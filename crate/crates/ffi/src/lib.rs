//! C ABI over `sane-core`.
//!
//! Every fallible function returns a [`SaneStatus`]; on failure the message
//! is available from [`sane_last_error`] on the same thread. Objects are
//! opaque handles released with their matching `*_free` function. Tensors
//! are contiguous `f32` buffers in channel-major `(C, H, W)` order.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, size_t};
use sane_core::denoiser::{load_backend, BackendError, BackendSpec, EditingBackend, MockBackend};
use sane_core::guidance::{self, GuidanceError, GuidanceWeights};
use sane_core::latent::Latent;
use sane_core::pipeline::{run_edit, EditConfig, EditStrategy, PipelineError};
use sane_core::specifier::{AmbiguousInstruction, SpecificInstructionSet, SpecifierError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaneStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    BackendUnavailable = 5,
    Backend = 6,
    Pipeline = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaneWeights {
    pub w_image: f32,
    pub w_text: f32,
    pub w_specific: f32,
}

impl From<SaneWeights> for GuidanceWeights {
    fn from(w: SaneWeights) -> Self {
        GuidanceWeights {
            w_image: w.w_image,
            w_text: w.w_text,
            w_specific: w.w_specific,
        }
    }
}

/// Opaque editing backend.
pub struct SaneBackend {
    inner: Box<dyn EditingBackend>,
}

/// Opaque result of [`sane_edit`]: RGB8 pixels plus the manifest JSON.
pub struct SaneEdit {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    manifest: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SaneStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(SaneStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(SaneStatus::InvalidArgument, msg.into())
    }
}

impl From<GuidanceError> for Failure {
    fn from(e: GuidanceError) -> Self {
        let status = match e {
            GuidanceError::ShapeMismatch { .. } => SaneStatus::ShapeMismatch,
            GuidanceError::NonFinite { .. } => SaneStatus::NonFinite,
            GuidanceError::Invalid(_) => SaneStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        let status = match e {
            BackendError::Unavailable(_) => SaneStatus::BackendUnavailable,
            _ => SaneStatus::Backend,
        };
        Failure(status, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Config(_) => SaneStatus::InvalidArgument,
            PipelineError::Backend(_) => SaneStatus::Backend,
            _ => SaneStatus::Pipeline,
        };
        Failure(status, e.to_string())
    }
}

impl From<SpecifierError> for Failure {
    fn from(e: SpecifierError) -> Self {
        Failure::invalid(e.to_string())
    }
}

fn set_last_error(msg: Option<String>) {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = msg.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    });
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SaneStatus {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(SaneStatus::Panic, msg))
    });
    match result {
        Ok(()) => {
            set_last_error(None);
            SaneStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_last_error(Some(msg));
            status
        }
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string valid for the call.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `p` must be null or point to `len` readable floats.
unsafe fn latent_arg(p: *const f32, shape: (usize, usize, usize), what: &str) -> Result<Latent, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    let (c, h, w) = shape;
    let data = std::slice::from_raw_parts(p, c * h * w).to_vec();
    Ok(Latent::from_shape_vec(c, h, w, data)?)
}

fn checked_shape(c: size_t, h: size_t, w: size_t) -> Result<(usize, usize, usize), Failure> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Failure::invalid("tensor dimensions must be non-zero"));
    }
    c.checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Failure::invalid("tensor size overflows"))?;
    Ok((c, h, w))
}

/// # Safety
/// `out` must be null or point to `latent.len()` writable floats.
unsafe fn write_latent(latent: &Latent, out: *mut f32) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("out"));
    }
    let v = latent.to_vec();
    ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sane_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sane_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

#[no_mangle]
pub extern "C" fn sane_default_weights() -> SaneWeights {
    let w = GuidanceWeights::default();
    SaneWeights {
        w_image: w.w_image,
        w_text: w.w_text,
        w_specific: w.w_specific,
    }
}

/// Creates the deterministic mock backend with the given downscale factor.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sane_backend_new_mock(downscale: u32, out: *mut *mut SaneBackend) -> SaneStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let backend = MockBackend::new(downscale)?;
        *out = Box::into_raw(Box::new(SaneBackend {
            inner: Box::new(backend),
        }));
        Ok(())
    })
}

/// Creates a backend from a JSON spec such as `{"id": "mock", "downscale": 8}`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sane_backend_open(spec_json: *const c_char, out: *mut *mut SaneBackend) -> SaneStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let spec: BackendSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)
            .map_err(|e| Failure::invalid(format!("backend spec: {e}")))?;
        *out = Box::into_raw(Box::new(SaneBackend {
            inner: load_backend(&spec)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `backend` must be null or a handle from a `sane_backend_*` constructor
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sane_backend_free(backend: *mut SaneBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

/// Guided estimate `u + w_image (i - u) + w_text (f - i)`.
///
/// # Safety
/// `uncond`, `image`, `full` and `out` must each point to `c * h * w` floats.
#[no_mangle]
pub unsafe extern "C" fn sane_cfg_combine(
    c: size_t,
    h: size_t,
    w: size_t,
    uncond: *const f32,
    image: *const f32,
    full: *const f32,
    weights: SaneWeights,
    out: *mut f32,
) -> SaneStatus {
    guard(|| {
        let shape = checked_shape(c, h, w)?;
        let u = latent_arg(uncond, shape, "uncond")?;
        let i = latent_arg(image, shape, "image")?;
        let f = latent_arg(full, shape, "full")?;
        let result = guidance::cfg_combine(&u, &i, &f, &weights.into())?;
        write_latent(&result, out)
    })
}

/// Guided estimate with the masked specific-instruction term.
///
/// `specifics` holds `n` tensors back to back. `mask_out`, when not null,
/// receives the `h * w` selected instruction indices.
///
/// # Safety
/// Tensor pointers must cover `c * h * w` floats (`n * c * h * w` for
/// `specifics`); `mask_out` must be null or cover `h * w` values.
#[no_mangle]
pub unsafe extern "C" fn sane_sane_combine(
    c: size_t,
    h: size_t,
    w: size_t,
    uncond: *const f32,
    image: *const f32,
    full: *const f32,
    specifics: *const f32,
    n: size_t,
    weights: SaneWeights,
    out: *mut f32,
    mask_out: *mut u32,
) -> SaneStatus {
    guard(|| {
        let shape = checked_shape(c, h, w)?;
        if n == 0 {
            return Err(Failure::invalid("at least one specific estimate is required"));
        }
        if specifics.is_null() {
            return Err(Failure::null("specifics"));
        }
        let u = latent_arg(uncond, shape, "uncond")?;
        let i = latent_arg(image, shape, "image")?;
        let f = latent_arg(full, shape, "full")?;
        let len = c * h * w;
        let s = (0..n)
            .map(|k| latent_arg(specifics.add(k * len), shape, "specifics"))
            .collect::<Result<Vec<_>, _>>()?;
        let (result, mask) = guidance::sane_combine(&u, &i, &f, &s, &weights.into())?;
        write_latent(&result, out)?;
        if !mask_out.is_null() {
            for (k, &idx) in mask.indices().iter().enumerate() {
                *mask_out.add(k) = idx as u32;
            }
        }
        Ok(())
    })
}

/// Runs one edit.
///
/// `rgb` is `width * height * 3` bytes, row-major. `strategy` is a name such
/// as `"sane"` or `"baseline"`; `config_json` is an optional JSON edit
/// configuration (null selects the defaults). On success `*out` receives a
/// handle to free with [`sane_edit_free`].
///
/// # Safety
/// `backend` must be a live handle; `rgb` must cover the image; strings must
/// be NUL-terminated; `specifics` must point to `n_specifics` strings (it may
/// be null when `n_specifics` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sane_edit(
    backend: *const SaneBackend,
    rgb: *const u8,
    width: u32,
    height: u32,
    instruction: *const c_char,
    specifics: *const *const c_char,
    n_specifics: size_t,
    strategy: *const c_char,
    config_json: *const c_char,
    out: *mut *mut SaneEdit,
) -> SaneStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let backend = backend.as_ref().ok_or_else(|| Failure::null("backend"))?;
        if rgb.is_null() {
            return Err(Failure::null("rgb"));
        }
        let len = (width as usize)
            .checked_mul(height as usize)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Failure::invalid("image size overflows"))?;
        let pixels = std::slice::from_raw_parts(rgb, len).to_vec();
        let image = image::RgbImage::from_raw(width, height, pixels)
            .ok_or_else(|| Failure::invalid("pixel buffer does not match the dimensions"))?;
        let c = AmbiguousInstruction::new(str_arg(instruction, "instruction")?)?;
        let strategy: EditStrategy = str_arg(strategy, "strategy")?.parse().map_err(Failure::invalid)?;
        let config: EditConfig = if config_json.is_null() {
            EditConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure::invalid(format!("config: {e}")))?
        };
        let set = if n_specifics == 0 {
            None
        } else {
            if specifics.is_null() {
                return Err(Failure::null("specifics"));
            }
            let list = (0..n_specifics)
                .map(|k| str_arg(*specifics.add(k), "specific instruction").map(str::to_string))
                .collect::<Result<Vec<_>, _>>()?;
            Some(SpecificInstructionSet::manual(list)?)
        };
        let outcome = run_edit(&image, &c, set.as_ref(), &config, strategy, backend.inner.as_ref())?;
        let manifest = outcome
            .manifest
            .to_json()
            .map_err(|e| Failure(SaneStatus::Pipeline, e.to_string()))?;
        let (width, height) = outcome.image.dimensions();
        *out = Box::into_raw(Box::new(SaneEdit {
            width,
            height,
            pixels: outcome.image.into_raw(),
            manifest: CString::new(manifest).map_err(|e| Failure(SaneStatus::Pipeline, e.to_string()))?,
        }));
        Ok(())
    })
}

/// # Safety
/// `edit` must be a live handle from [`sane_edit`].
#[no_mangle]
pub unsafe extern "C" fn sane_edit_width(edit: *const SaneEdit) -> u32 {
    edit.as_ref().map_or(0, |e| e.width)
}

/// # Safety
/// `edit` must be a live handle from [`sane_edit`].
#[no_mangle]
pub unsafe extern "C" fn sane_edit_height(edit: *const SaneEdit) -> u32 {
    edit.as_ref().map_or(0, |e| e.height)
}

/// RGB8 pixels, `width * height * 3` bytes, owned by the handle.
///
/// # Safety
/// `edit` must be a live handle from [`sane_edit`].
#[no_mangle]
pub unsafe extern "C" fn sane_edit_pixels(edit: *const SaneEdit) -> *const u8 {
    edit.as_ref().map_or(ptr::null(), |e| e.pixels.as_ptr())
}

/// Manifest JSON, owned by the handle.
///
/// # Safety
/// `edit` must be a live handle from [`sane_edit`].
#[no_mangle]
pub unsafe extern "C" fn sane_edit_manifest_json(edit: *const SaneEdit) -> *const c_char {
    edit.as_ref().map_or(ptr::null(), |e| e.manifest.as_ptr())
}

/// # Safety
/// `edit` must be null or a handle from [`sane_edit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sane_edit_free(edit: *mut SaneEdit) {
    if !edit.is_null() {
        drop(Box::from_raw(edit));
    }
}
