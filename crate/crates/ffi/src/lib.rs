//! C ABI over the `spectral-adapt` library.
//!
//! Cubes and models are opaque heap handles owned by the caller and released
//! with the matching `*_free` function. Every fallible call returns an
//! [`SaStatus`]; on failure, [`sa_last_error_message`] describes the error for
//! the calling thread. Panics never cross the boundary and surface as
//! [`SaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spectral_adapt::datagen::{read_cube, write_cube};
use spectral_adapt::hsi::{partition_from_wavelengths, RgbImage, SpectralCube, SpectralMatrix, Wavelengths};
use spectral_adapt::metrics::{report, SAM_EPS};
use spectral_adapt::model::{forward, load_checkpoint, ModelParams};
use spectral_adapt::sdm::{masking_ratios, spectral_density, SpectralDensity};
use spectral_adapt::sera::atgp;
use spectral_adapt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Panic = 7,
}

/// Hyperspectral cube handle.
pub struct SaCube(SpectralCube);

/// Trained model handle.
pub struct SaModel(ModelParams);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SaMetrics {
    pub ssim: f64,
    pub sam: f64,
    pub psnr: f64,
    pub l1: f64,
}

/// One value per RGB-aligned band region.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SaRegions {
    pub red: f64,
    pub green: f64,
    pub blue: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SaStatus::Io,
            Error::Format { .. } => SaStatus::Format,
            Error::DimensionMismatch(_)
            | Error::ShapeMismatch(_)
            | Error::CacheMismatch(_)
            | Error::ImageTooSmall { .. }
            | Error::InvalidBlockSize { .. } => SaStatus::ShapeMismatch,
            Error::RankDeficient { .. } | Error::NonFiniteLoss { .. } => SaStatus::Numeric,
            _ => SaStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SaStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            SaStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SaStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Failure(SaStatus::InvalidArgument, format!("dimensions {dims:?} overflow")))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call from the same thread.
#[no_mangle]
pub extern "C" fn sa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads an HSC1 cube file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_cube_read(path: *const c_char, out: *mut *mut SaCube) -> SaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cube = read_cube(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SaCube(cube)));
        Ok(())
    })
}

/// Writes a cube as HSC1. Values are stored as 32-bit floats.
///
/// # Safety
/// `cube` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sa_cube_write(cube: *const SaCube, path: *const c_char) -> SaStatus {
    guard(|| {
        let cube = ref_arg(cube, "cube")?;
        write_cube(&path_arg(path)?, &cube.0)?;
        Ok(())
    })
}

/// Builds a cube from planar (band-major) data of `height * width * bands`
/// values and `bands` increasing wavelengths in nanometres.
///
/// # Safety
/// `wavelengths` and `data` must point to at least the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn sa_cube_new(
    height: usize,
    width: usize,
    bands: usize,
    wavelengths: *const f64,
    data: *const f64,
    out: *mut *mut SaCube,
) -> SaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let n = checked_len(&[height, width, bands])?;
        let wl = Wavelengths::new(slice_arg(wavelengths, bands, "wavelengths")?.to_vec())?;
        let values = slice_arg(data, n, "data")?.to_vec();
        *out = Box::into_raw(Box::new(SaCube(SpectralCube::new(height, width, wl, values)?)));
        Ok(())
    })
}

/// # Safety
/// `cube` must come from this library; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_cube_dims(
    cube: *const SaCube,
    height: *mut usize,
    width: *mut usize,
    bands: *mut usize,
) -> SaStatus {
    guard(|| {
        let cube = &ref_arg(cube, "cube")?.0;
        *out_arg(height, "height")? = cube.height();
        *out_arg(width, "width")? = cube.width();
        *out_arg(bands, "bands")? = cube.bands();
        Ok(())
    })
}

/// Copies the planar values into `out`, which must hold exactly
/// `height * width * bands` entries.
///
/// # Safety
/// `cube` must come from this library; `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn sa_cube_data(cube: *const SaCube, out: *mut f64, len: usize) -> SaStatus {
    guard(|| {
        let cube = &ref_arg(cube, "cube")?.0;
        if len != cube.data().len() {
            return Err(Failure(
                SaStatus::ShapeMismatch,
                format!("buffer holds {len} values, cube has {}", cube.data().len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(cube.data());
        Ok(())
    })
}

/// # Safety
/// `cube` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sa_cube_free(cube: *mut SaCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

/// SSIM, SAM (radians), PSNR (dB, peak 1) and L1 of `pred` against `gt`.
///
/// # Safety
/// Both cubes must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_metrics(pred: *const SaCube, gt: *const SaCube, out: *mut SaMetrics) -> SaStatus {
    guard(|| {
        let r = report(&ref_arg(pred, "pred")?.0, &ref_arg(gt, "gt")?.0)?;
        *out_arg(out, "out")? = SaMetrics {
            ssim: r.ssim,
            sam: r.sam,
            psnr: r.psnr,
            l1: r.l1,
        };
        Ok(())
    })
}

/// Spectral density of each band region of `cube`, in radians.
///
/// # Safety
/// `cube` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_spectral_density(cube: *const SaCube, out: *mut SaRegions) -> SaStatus {
    guard(|| {
        let cube = &ref_arg(cube, "cube")?.0;
        let part = partition_from_wavelengths(cube.wavelengths())?;
        let d = spectral_density(cube, &part, SAM_EPS)?;
        *out_arg(out, "out")? = SaRegions {
            red: d.red,
            green: d.green,
            blue: d.blue,
        };
        Ok(())
    })
}

/// Per-channel masking ratios in `[r_min, r_max]` from region densities.
///
/// # Safety
/// `density` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sa_masking_ratios(
    density: *const SaRegions,
    r_min: f64,
    r_max: f64,
    out: *mut SaRegions,
) -> SaStatus {
    guard(|| {
        let d = ref_arg(density, "density")?;
        let d = SpectralDensity {
            red: d.red,
            green: d.green,
            blue: d.blue,
        };
        let r = masking_ratios(&d, r_min, r_max)?;
        *out_arg(out, "out")? = SaRegions {
            red: r.red,
            green: r.green,
            blue: r.blue,
        };
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_load(path: *const c_char, out: *mut *mut SaModel) -> SaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let params = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SaModel(params)));
        Ok(())
    })
}

/// Number of output bands of `model`.
///
/// # Safety
/// `model` must come from this library; `bands` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_bands(model: *const SaModel, bands: *mut usize) -> SaStatus {
    guard(|| {
        *out_arg(bands, "bands")? = ref_arg(model, "model")?.0.architecture().bands;
        Ok(())
    })
}

/// Reconstructs a cube from a planar RGB image of `3 * height * width` values
/// in `[0, 1]`. `wavelengths` labels the model's output bands.
///
/// # Safety
/// `model` must come from this library; `rgb` and `wavelengths` must hold the
/// stated number of values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_model_predict(
    model: *const SaModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    wavelengths: *const f64,
    bands: usize,
    out: *mut *mut SaCube,
) -> SaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = &ref_arg(model, "model")?.0;
        let n = checked_len(&[3, height, width])?;
        let img = RgbImage::new(height, width, slice_arg(rgb, n, "rgb")?.to_vec())?;
        let wl = Wavelengths::new(slice_arg(wavelengths, bands, "wavelengths")?.to_vec())?;
        let (cube, _) = forward(model, &img, &wl)?;
        *out = Box::into_raw(Box::new(SaCube(cube)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sa_model_free(model: *mut SaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// ATGP over a row-major `rows x cols` matrix; writes `k` row indices in
/// selection order.
///
/// # Safety
/// `data` must hold `rows * cols` values and `indices` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn sa_atgp(
    data: *const f64,
    rows: usize,
    cols: usize,
    k: usize,
    indices: *mut usize,
) -> SaStatus {
    guard(|| {
        let n = checked_len(&[rows, cols])?;
        let s = SpectralMatrix::new(rows, cols, slice_arg(data, n, "data")?.to_vec())?;
        let picked = atgp(&s, k)?;
        if indices.is_null() {
            return Err(null("indices"));
        }
        std::slice::from_raw_parts_mut(indices, k).copy_from_slice(&picked.indices);
        Ok(())
    })
}
