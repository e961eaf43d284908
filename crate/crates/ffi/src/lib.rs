//! C ABI over the voxpipe pipeline.
//!
//! Every fallible function returns `VP_OK` (0) or an error code. Positive
//! codes are the library's error codes, negative ones are ABI-level failures
//! (null pointer, bad UTF-8, caught panic). The message of the last failure on
//! the calling thread is available from [`vp_last_error`].
//!
//! Objects are opaque handles created by the `*_load`, `*_read` and
//! `vp_volume_from_hu` functions and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use voxpipe::config::RunConfig;
use voxpipe::nets::Network;
use voxpipe::volio::{
    read_nrrd, write_nrrd, Encoding, Geometry, MaskVolume, Orientation, ScanMeta, Volume, VolumeKind,
};

pub const VP_OK: c_int = 0;
pub const VP_ERR_NULL: c_int = -1;
pub const VP_ERR_UTF8: c_int = -2;
pub const VP_ERR_PANIC: c_int = -3;
pub const VP_ERR_BUFFER: c_int = -4;

/// Run configuration.
pub struct VpConfig {
    inner: RunConfig,
}

/// Intensity volume.
pub struct VpVolume {
    inner: Volume,
    meta: ScanMeta,
}

/// Binary mask.
pub struct VpMask {
    inner: MaskVolume,
}

/// Trained network (segmenter or classifier).
pub struct VpModel {
    inner: Network<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(c_int, String);

impl From<voxpipe::Error> for Fail {
    fn from(e: voxpipe::Error) -> Self {
        Fail(e.code(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VP_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside voxpipe".into());
            VP_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(VP_ERR_NULL, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(VP_ERR_UTF8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(VP_ERR_NULL, format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(VP_ERR_NULL, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn vp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a configuration. `path` may be null (defaults only); `overrides`
/// holds `n_overrides` strings of the form `key.path=value`.
///
/// # Safety
/// Pointers must be null or valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vp_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut VpConfig,
) -> c_int {
    guard(|| {
        out_arg(out, "out")?;
        let path = if path.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(path, "path")?))
        };
        let mut list = Vec::with_capacity(n_overrides);
        if n_overrides > 0 {
            if overrides.is_null() {
                return Err(Fail(VP_ERR_NULL, "overrides is null".into()));
            }
            for i in 0..n_overrides {
                list.push(str_arg(*overrides.add(i), "override")?.to_string());
            }
        }
        let cfg = RunConfig::load(path.as_deref(), &list)?;
        *out = Box::into_raw(Box::new(VpConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or come from `vp_config_load`.
#[no_mangle]
pub unsafe extern "C" fn vp_config_free(cfg: *mut VpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Reads a scan NRRD and its metadata sidecar (if present).
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_volume_read(path: *const c_char, out: *mut *mut VpVolume) -> c_int {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let (v, meta) = voxpipe::pipeline::read_scan(path.as_ref())?;
        *out = Box::into_raw(Box::new(VpVolume { inner: v, meta }));
        Ok(())
    })
}

/// Wraps a Hounsfield-unit array (x fastest) in head-first-supine
/// orientation.
///
/// # Safety
/// `dims` and `spacing` must point to 3 values, `hu` to their product.
#[no_mangle]
pub unsafe extern "C" fn vp_volume_from_hu(
    dims: *const usize,
    spacing: *const f64,
    hu: *const f32,
    out: *mut *mut VpVolume,
) -> c_int {
    guard(|| {
        out_arg(out, "out")?;
        let d = ref_arg(dims as *const [usize; 3], "dims")?;
        let s = ref_arg(spacing as *const [f64; 3], "spacing")?;
        let g = Geometry::new(*d, *s, Orientation::Hfs)?;
        if hu.is_null() {
            return Err(Fail(VP_ERR_NULL, "hu is null".into()));
        }
        let data = std::slice::from_raw_parts(hu, g.len()).to_vec();
        let v = Volume::new(g, VolumeKind::Hu, data)?;
        let meta = ScanMeta {
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            group: voxpipe::volio::Group::Cta,
            label: 0,
        };
        *out = Box::into_raw(Box::new(VpVolume { inner: v, meta }));
        Ok(())
    })
}

/// # Safety
/// `v` must be a live handle, `dims` writable for 3 values.
#[no_mangle]
pub unsafe extern "C" fn vp_volume_dims(v: *const VpVolume, dims: *mut usize) -> c_int {
    guard(|| {
        let v = ref_arg(v, "volume")?;
        out_arg(dims, "dims")?;
        ptr::copy_nonoverlapping(v.inner.dims().as_ptr(), dims, 3);
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn vp_volume_free(v: *mut VpVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_read(path: *const c_char, out: *mut *mut VpMask) -> c_int {
    guard(|| {
        out_arg(out, "out")?;
        let m = read_nrrd(str_arg(path, "path")?)?.into_mask()?;
        *out = Box::into_raw(Box::new(VpMask { inner: m }));
        Ok(())
    })
}

/// Writes a gzip-encoded mask NRRD.
///
/// # Safety
/// `m` must be a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_write(m: *const VpMask, path: *const c_char) -> c_int {
    guard(|| {
        let m = ref_arg(m, "mask")?;
        write_nrrd(m.inner.clone(), str_arg(path, "path")?, Encoding::Gzip)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle, `dims` writable for 3 values.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_dims(m: *const VpMask, dims: *mut usize) -> c_int {
    guard(|| {
        let m = ref_arg(m, "mask")?;
        out_arg(dims, "dims")?;
        ptr::copy_nonoverlapping(m.inner.dims().as_ptr(), dims, 3);
        Ok(())
    })
}

/// Number of foreground voxels.
///
/// # Safety
/// `m` must be a live handle, `count` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_count(m: *const VpMask, count: *mut usize) -> c_int {
    guard(|| {
        let m = ref_arg(m, "mask")?;
        out_arg(count, "count")?;
        *count = m.inner.count();
        Ok(())
    })
}

/// Copies the mask voxels (x fastest) into `buf`, which must hold `len`
/// bytes with `len` at least the voxel count.
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_copy(m: *const VpMask, buf: *mut u8, len: usize) -> c_int {
    guard(|| {
        let m = ref_arg(m, "mask")?;
        out_arg(buf, "buf")?;
        let data = m.inner.data();
        if len < data.len() {
            return Err(Fail(
                VP_ERR_BUFFER,
                format!("buffer holds {len} bytes, need {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Dice coefficient of two masks on the same grid.
///
/// # Safety
/// `a`, `b` must be live handles, `dsc` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_dice(a: *const VpMask, b: *const VpMask, dsc: *mut f64) -> c_int {
    guard(|| {
        let (a, b) = (ref_arg(a, "a")?, ref_arg(b, "b")?);
        out_arg(dsc, "dsc")?;
        *dsc = voxpipe::eval::seg_metrics(&a.inner, &b.inner)?.dsc;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn vp_mask_free(m: *mut VpMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Loads a segmentation checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_segmenter_load(path: *const c_char, out: *mut *mut VpModel) -> c_int {
    guard(|| {
        out_arg(out, "out")?;
        let net = voxpipe::pipeline::load_segmenter(str_arg(path, "path")?.as_ref())?;
        *out = Box::into_raw(Box::new(VpModel { inner: net }));
        Ok(())
    })
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vp_classifier_load(path: *const c_char, out: *mut *mut VpModel) -> c_int {
    guard(|| {
        out_arg(out, "out")?;
        let net = voxpipe::pipeline::load_classifier(str_arg(path, "path")?.as_ref())?;
        *out = Box::into_raw(Box::new(VpModel { inner: net }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn vp_model_free(m: *mut VpModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Segments `scan` and, when `classifier` is non-null, classifies the
/// Z-trimmed mask. `mask` receives the postprocessed mask on the
/// preprocessed grid; `trimmed` (optional) its Z-trimmed version;
/// `probability` (optional) the aneurysm probability, NaN without a
/// classifier.
///
/// # Safety
/// Handles must be live; output pointers writable or null where optional.
#[no_mangle]
pub unsafe extern "C" fn vp_predict(
    cfg: *const VpConfig,
    segmenter: *const VpModel,
    classifier: *const VpModel,
    scan: *const VpVolume,
    mask: *mut *mut VpMask,
    trimmed: *mut *mut VpMask,
    probability: *mut f64,
) -> c_int {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let seg = ref_arg(segmenter, "segmenter")?;
        let scan = ref_arg(scan, "scan")?;
        out_arg(mask, "mask")?;
        let cls = classifier.as_ref().map(|c| &c.inner);
        let p = voxpipe::pipeline::predict_scan(&cfg.inner, &seg.inner, cls, &scan.inner, &scan.meta)?;
        *mask = Box::into_raw(Box::new(VpMask { inner: p.mask }));
        if !trimmed.is_null() {
            *trimmed = Box::into_raw(Box::new(VpMask { inner: p.trimmed }));
        }
        if !probability.is_null() {
            *probability = p.probability.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Friedman test over an `n × k` row-major score table (rows are cases,
/// columns methods).
///
/// # Safety
/// `scores` must hold `n * k` values; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn vp_friedman(
    scores: *const f64,
    n: usize,
    k: usize,
    higher_is_better: bool,
    chi2: *mut f64,
    p: *mut f64,
) -> c_int {
    guard(|| {
        if scores.is_null() {
            return Err(Fail(VP_ERR_NULL, "scores is null".into()));
        }
        let flat = std::slice::from_raw_parts(scores, n * k);
        let rows: Vec<Vec<f64>> = flat.chunks(k.max(1)).map(|r| r.to_vec()).collect();
        let r = voxpipe::eval::friedman_test(&rows, higher_is_better)?;
        if !chi2.is_null() {
            *chi2 = r.chi2;
        }
        if !p.is_null() {
            *p = r.p;
        }
        Ok(())
    })
}
