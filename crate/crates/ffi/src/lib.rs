//! C ABI over the `vdpi` library.
//!
//! Every fallible function returns a [`VdpiStatus`]; the matching message is
//! available from [`vdpi_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function. Images are planar
//! `[channels][height][width]` buffers in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vdpi::engine::{psnr, ssim, Checkpoint, ColorSpace, Restorer};
use vdpi::oracle::{blur_apply, penrose_residuals, pinv_apply_exact, UniformBlur};
use vdpi::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VdpiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Prerequisite = 6,
    Internal = 7,
}

/// Known uniform blur with its Tikhonov δ.
pub struct VdpiOracle {
    blur: UniformBlur,
}

/// Trained restorer (vdn plus, when needed, the frozen blur and pinv models).
pub struct VdpiRestorer {
    inner: Restorer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VdpiStatus {
    match e {
        Error::Shape(_) => VdpiStatus::Shape,
        Error::Contract(_) | Error::Config(_) | Error::Dataset(_) => VdpiStatus::InvalidArgument,
        Error::Io { .. } | Error::Image { .. } => VdpiStatus::Io,
        Error::Format(_) => VdpiStatus::Format,
        Error::Prerequisite(_) => VdpiStatus::Prerequisite,
        Error::NonFinite { .. } => VdpiStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus the last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VdpiStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (VdpiStatus::Ok, String::new()),
        Ok(Err(Fail::Null(what))) => (VdpiStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Fail::Arg(m))) => (VdpiStatus::InvalidArgument, m),
        Ok(Err(Fail::Lib(e))) => (status_of(&e), e.to_string()),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (VdpiStatus::Internal, format!("internal error: {m}"))
        }
    };
    set_error(&msg);
    status
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    Ok(std::slice::from_raw_parts(non_null(p, what)?, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<Option<PathBuf>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))?;
    Ok(Some(PathBuf::from(s)))
}

fn image(data: &[f32], channels: usize, h: usize, w: usize) -> Result<Tensor<f32>, Fail> {
    Ok(Tensor::from_vec(&[channels, h, w], data.to_vec())?)
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn vdpi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Error message of the most recent fallible call on this thread; empty if it
/// succeeded. Valid until the next vdpi call on the same thread.
#[no_mangle]
pub extern "C" fn vdpi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// PSNR in dB between two planar images; luma (BT.601) unless `rgb` is nonzero.
///
/// # Safety
/// `a` and `b` must hold `channels·height·width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdpi_psnr(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    rgb: i32,
    out: *mut f64,
) -> VdpiStatus {
    guard(|| {
        let n = channels * height * width;
        let (ta, tb) = (image(slice(a, n, "a")?, channels, height, width)?, image(slice(b, n, "b")?, channels, height, width)?);
        non_null(out, "out")?;
        let space = if rgb != 0 { ColorSpace::Rgb } else { ColorSpace::YcbcrY };
        *out = psnr(&ta, &tb, space)?;
        Ok(())
    })
}

/// Mean SSIM on luma (11×11 Gaussian window, σ = 1.5).
///
/// # Safety
/// As for [`vdpi_psnr`].
#[no_mangle]
pub unsafe extern "C" fn vdpi_ssim(
    a: *const f32,
    b: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> VdpiStatus {
    guard(|| {
        let n = channels * height * width;
        let (ta, tb) = (image(slice(a, n, "a")?, channels, height, width)?, image(slice(b, n, "b")?, channels, height, width)?);
        non_null(out, "out")?;
        *out = ssim(&ta, &tb)?;
        Ok(())
    })
}

fn put_oracle(blur: UniformBlur, out: *mut *mut VdpiOracle) -> Result<(), Fail> {
    non_null(out, "out")?;
    // SAFETY: checked non-null; the caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(VdpiOracle { blur })) };
    Ok(())
}

/// Oracle for an odd square `kernel_size²` kernel (row-major).
///
/// # Safety
/// `kernel` must hold `kernel_size²` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdpi_oracle_new(
    kernel: *const f64,
    kernel_size: usize,
    delta: f64,
    out: *mut *mut VdpiOracle,
) -> VdpiStatus {
    guard(|| {
        let k = slice(kernel, kernel_size * kernel_size, "kernel")?;
        let t = Tensor::from_vec(&[kernel_size, kernel_size], k.to_vec())?;
        put_oracle(UniformBlur::new(t, delta)?, out)
    })
}

/// Oracle for a normalised isotropic Gaussian.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdpi_oracle_gaussian(
    kernel_size: usize,
    sigma: f64,
    delta: f64,
    out: *mut *mut VdpiOracle,
) -> VdpiStatus {
    guard(|| put_oracle(UniformBlur::gaussian(kernel_size, sigma, delta)?, out))
}

/// # Safety
/// `o` must come from an oracle constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vdpi_oracle_free(o: *mut VdpiOracle) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

unsafe fn oracle_map(
    o: *const VdpiOracle,
    x: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    f: fn(&Tensor<f64>, &UniformBlur) -> vdpi::Result<Tensor<f64>>,
) -> VdpiStatus {
    guard(|| {
        let o = &*non_null(o, "oracle")?;
        let x = Tensor::from_vec(&[height, width], slice(x, height * width, "x")?.to_vec())?;
        non_null(out, "out")?;
        let y = f(&x, &o.blur)?;
        ptr::copy_nonoverlapping(y.data().as_ptr(), out, height * width);
        Ok(())
    })
}

/// Circular blur `Hx` of one `height×width` plane.
///
/// # Safety
/// `x` and `out` must hold `height·width` doubles.
#[no_mangle]
pub unsafe extern "C" fn vdpi_oracle_blur(
    o: *const VdpiOracle,
    x: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> VdpiStatus {
    oracle_map(o, x, height, width, out, blur_apply)
}

/// Tikhonov pseudo-inverse `H⁺y` of one plane.
///
/// # Safety
/// As for [`vdpi_oracle_blur`].
#[no_mangle]
pub unsafe extern "C" fn vdpi_oracle_pinv(
    o: *const VdpiOracle,
    y: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> VdpiStatus {
    oracle_map(o, y, height, width, out, pinv_apply_exact)
}

/// `r1 = ‖HH⁺Hx − Hx‖/‖Hx‖` and `r2 = ‖H⁺HH⁺x − H⁺x‖/‖H⁺x‖`.
///
/// # Safety
/// `x` must hold `height·width` doubles; `r1`, `r2` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdpi_oracle_residuals(
    o: *const VdpiOracle,
    x: *const f64,
    height: usize,
    width: usize,
    r1: *mut f64,
    r2: *mut f64,
) -> VdpiStatus {
    guard(|| {
        let o = &*non_null(o, "oracle")?;
        let x = Tensor::from_vec(&[height, width], slice(x, height * width, "x")?.to_vec())?;
        non_null(r1, "r1")?;
        non_null(r2, "r2")?;
        let r = penrose_residuals(&o.blur, &x)?;
        *r1 = r.r1;
        *r2 = r.r2;
        Ok(())
    })
}

/// Opens a vdn checkpoint; `blur_path` and `pinv_path` may be null when the
/// variant does not use `H⁺y`.
///
/// # Safety
/// Paths must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdpi_restorer_open(
    vdn_path: *const c_char,
    blur_path: *const c_char,
    pinv_path: *const c_char,
    out: *mut *mut VdpiRestorer,
) -> VdpiStatus {
    guard(|| {
        let vdn = path_arg(vdn_path, "vdn_path")?.ok_or(Fail::Null("vdn_path"))?;
        non_null(out, "out")?;
        let load = |p: Option<PathBuf>| p.map(|p| Checkpoint::load(&p)).transpose();
        let (v, b, p) = (
            Checkpoint::load(&vdn)?,
            load(path_arg(blur_path, "blur_path")?)?,
            load(path_arg(pinv_path, "pinv_path")?)?,
        );
        let inner = Restorer::new(&v, b.as_ref(), p.as_ref())?;
        *out = Box::into_raw(Box::new(VdpiRestorer { inner }));
        Ok(())
    })
}

/// # Safety
/// `r` must come from [`vdpi_restorer_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vdpi_restorer_free(r: *mut VdpiRestorer) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Temporal window length and colour channels the restorer expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vdpi_restorer_shape(
    r: *const VdpiRestorer,
    frames: *mut usize,
    channels: *mut usize,
) -> VdpiStatus {
    guard(|| {
        let r = &*non_null(r, "restorer")?;
        non_null(frames, "frames")?;
        non_null(channels, "channels")?;
        *frames = r.inner.frames();
        *channels = r.inner.channels();
        Ok(())
    })
}

/// Restores the centre frame of a window of `frames` consecutive blurred
/// frames, stacked as `[frames·channels][height][width]`. Writes
/// `channels·height·width` values clamped to `[0, 1]`.
///
/// # Safety
/// `window` and `out` must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn vdpi_restorer_restore(
    r: *const VdpiRestorer,
    window: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> VdpiStatus {
    guard(|| {
        let r = &*non_null(r, "restorer")?;
        let (t, c) = (r.inner.frames(), r.inner.channels());
        let w = Tensor::from_vec(&[t * c, height, width], slice(window, t * c * height * width, "window")?.to_vec())?;
        non_null(out, "out")?;
        let x = r.inner.restore_window(&w)?;
        for (i, v) in x.data().iter().enumerate() {
            *out.add(i) = v.clamp(0.0, 1.0);
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last() -> String {
        unsafe { CStr::from_ptr(vdpi_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_pointers_are_reported() {
        let mut v = 0.0;
        let s = unsafe { vdpi_psnr(ptr::null(), ptr::null(), 1, 2, 2, 0, &mut v) };
        assert_eq!(s, VdpiStatus::NullPointer);
        assert!(last().contains("null"));
    }

    #[test]
    fn errors_clear_on_success() {
        let a = [0.5f32; 4];
        let mut v = 0.0;
        unsafe { vdpi_psnr(ptr::null(), a.as_ptr(), 1, 2, 2, 0, &mut v) };
        assert!(!last().is_empty());
        assert_eq!(unsafe { vdpi_psnr(a.as_ptr(), a.as_ptr(), 1, 2, 2, 0, &mut v) }, VdpiStatus::Ok);
        assert_eq!(v, 100.0);
        assert!(last().is_empty());
    }

    #[test]
    fn bad_delta_is_invalid_argument() {
        let mut o = ptr::null_mut();
        let s = unsafe { vdpi_oracle_gaussian(3, 1.0, 0.0, &mut o) };
        assert_eq!(s, VdpiStatus::Ok, "δ is checked when used");
        let x = [1.0f64; 16];
        let (mut r1, mut r2) = (0.0, 0.0);
        let s = unsafe { vdpi_oracle_residuals(o, x.as_ptr(), 4, 4, &mut r1, &mut r2) };
        assert_eq!(s, VdpiStatus::InvalidArgument);
        assert!(last().contains("δ"));
        unsafe { vdpi_oracle_free(o) };
    }
}
