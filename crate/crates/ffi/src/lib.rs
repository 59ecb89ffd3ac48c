//! C ABI over the domainness library.
//!
//! Objects cross the boundary as opaque handles (`DmImage`, `DmModel`,
//! `DmMap`) owned by the caller and released with the matching `*_free`.
//! Every fallible call returns a [`DmStatus`]; on failure the message is
//! available from [`dm_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use domainness::analysis::fg_bg_stats;
use domainness::classifier::LinearModel;
use domainness::extractor::{builtin_extract, BuiltinExtractor, BUILTIN_DIM};
use domainness::format::{load_map, save_map};
use domainness::fusion::{fuse, MarginMatrix};
use domainness::image::load_image;
use domainness::occlusion::{build_map, MapConfig, Weighting, DEFAULT_PATCH, DEFAULT_STRIDE};
use domainness::{DomainnessMap, Error, FeatureVector, ImageTensor, SegMask};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Extractor = 6,
    Panic = 7,
}

/// Must hold one of the listed values; anything else is undefined behaviour.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmWeighting {
    None = 0,
    AbsW = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmMapConfig {
    pub patch: u32,
    pub stride: u32,
    /// Occluder colour, RGB in [0, 1].
    pub fill: [f32; 3],
    pub weighting: DmWeighting,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DmRegionStats {
    pub mean_in: f64,
    pub mean_out: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// RGB image with values in [0, 1].
pub struct DmImage(ImageTensor);

/// Binary linear domain discriminator.
pub struct DmModel(LinearModel);

pub struct DmMap(DomainnessMap);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DmStatus::Io,
            Error::Decode { .. } | Error::Format(_) => DmStatus::Format,
            Error::DimMismatch { .. } => DmStatus::DimensionMismatch,
            Error::Extractor(_) => DmStatus::Extractor,
            _ => DmStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DmStatus::NullArgument, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DmStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<(), Failure> {
    if expected != got {
        return Err(Failure(
            DmStatus::DimensionMismatch,
            format!("dimension mismatch: expected {expected}, got {got}"),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an image from `height * width * 3` interleaved RGB values.
///
/// # Safety
/// `data` must point to `len` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_image_new(
    height: u32,
    width: u32,
    data: *const f32,
    len: usize,
    out: *mut *mut DmImage,
) -> DmStatus {
    guard(|| {
        let data = slice(data, len, "data")?.to_vec();
        let img = ImageTensor::new(height as usize, width as usize, 3, data)?;
        emit(out, DmImage(img))
    })
}

/// Loads an 8-bit RGB or grayscale PNG.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_image_load(path_: *const c_char, out: *mut *mut DmImage) -> DmStatus {
    guard(|| {
        let img = load_image(path(path_)?)?;
        emit(out, DmImage(img))
    })
}

/// # Safety
/// `img` must come from `dm_image_new`/`dm_image_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn dm_image_free(img: *mut DmImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `img` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_image_size(img: *const DmImage, height: *mut u32, width: *mut u32) -> DmStatus {
    guard(|| {
        let img = &borrow(img, "img")?.0;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        *height = img.height() as u32;
        *width = img.width() as u32;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn dm_builtin_dim() -> usize {
    BUILTIN_DIM
}

/// Writes the built-in descriptor of `img` into `out` (`len` must equal
/// `dm_builtin_dim()`).
///
/// # Safety
/// `img` must be a live handle; `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dm_builtin_extract(img: *const DmImage, out: *mut f32, len: usize) -> DmStatus {
    guard(|| {
        let img = &borrow(img, "img")?.0;
        let out = slice_mut(out, len, "out")?;
        check_len(BUILTIN_DIM, len)?;
        out.copy_from_slice(builtin_extract(img)?.values());
        Ok(())
    })
}

/// Loads a binary `.lmod` domain model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_model_load(path_: *const c_char, out: *mut *mut DmModel) -> DmStatus {
    guard(|| {
        let model = LinearModel::load(path(path_)?)?;
        emit(out, DmModel(model))
    })
}

/// # Safety
/// `model` must come from `dm_model_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn dm_model_free(model: *mut DmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_model_dim(model: *const DmModel, dim: *mut usize) -> DmStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        if dim.is_null() {
            return Err(null("dim"));
        }
        *dim = model.dim();
        Ok(())
    })
}

/// Decision value `w·f + b`.
///
/// # Safety
/// `features` must point to `len` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_model_margin(
    model: *const DmModel,
    features: *const f32,
    len: usize,
    out: *mut f64,
) -> DmStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let f = FeatureVector::new(slice(features, len, "features")?.to_vec())?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.row.margin(&f)?;
        Ok(())
    })
}

/// Patch 16, stride 8, mid-grey fill, `|w|` weighting.
#[no_mangle]
pub extern "C" fn dm_map_config_default() -> DmMapConfig {
    DmMapConfig {
        patch: DEFAULT_PATCH as u32,
        stride: DEFAULT_STRIDE as u32,
        fill: [0.5; 3],
        weighting: DmWeighting::AbsW,
    }
}

/// Builds the domainness map of `img` with the built-in extractor.
///
/// # Safety
/// `img`, `model` and `cfg` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_map_build(
    img: *const DmImage,
    model: *const DmModel,
    cfg: *const DmMapConfig,
    out: *mut *mut DmMap,
) -> DmStatus {
    guard(|| {
        let img = &borrow(img, "img")?.0;
        let model = &borrow(model, "model")?.0;
        let cfg = borrow(cfg, "cfg")?;
        let map_cfg = MapConfig {
            patch: cfg.patch as usize,
            stride: cfg.stride as usize,
            fill: cfg.fill,
            weighting: match cfg.weighting {
                DmWeighting::None => Weighting::None,
                DmWeighting::AbsW => Weighting::AbsW,
            },
        };
        let map = build_map(img, &BuiltinExtractor::new(), model, &map_cfg)?;
        emit(out, DmMap(map))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_map_load(path_: *const c_char, out: *mut *mut DmMap) -> DmStatus {
    guard(|| {
        let map = load_map(path(path_)?)?;
        emit(out, DmMap(map))
    })
}

/// # Safety
/// `map` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dm_map_save(map: *const DmMap, path_: *const c_char) -> DmStatus {
    guard(|| {
        let map = &borrow(map, "map")?.0;
        save_map(map, path(path_)?)?;
        Ok(())
    })
}

/// # Safety
/// `map` must come from `dm_map_build`/`dm_map_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn dm_map_free(map: *mut DmMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `map` must be live; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_map_size(map: *const DmMap, height: *mut u32, width: *mut u32) -> DmStatus {
    guard(|| {
        let map = &borrow(map, "map")?.0;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        *height = map.height() as u32;
        *width = map.width() as u32;
        Ok(())
    })
}

/// Copies the row-major scores into `out` (`len` = height × width).
///
/// # Safety
/// `map` must be live; `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dm_map_scores(map: *const DmMap, out: *mut f32, len: usize) -> DmStatus {
    guard(|| {
        let map = &borrow(map, "map")?.0;
        let out = slice_mut(out, len, "out")?;
        check_len(map.scores().len(), len)?;
        out.copy_from_slice(map.scores());
        Ok(())
    })
}

/// Mean domainness inside / outside a mask (row-major, nonzero =
/// foreground) over the centred `crop`×`crop` window.
///
/// # Safety
/// `map` must be live; `mask` must point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_fg_bg_stats(
    map: *const DmMap,
    mask: *const u8,
    len: usize,
    crop: u32,
    out: *mut DmRegionStats,
) -> DmStatus {
    guard(|| {
        let map = &borrow(map, "map")?.0;
        let bytes = slice(mask, len, "mask")?;
        check_len(map.height() * map.width(), len)?;
        let mask = SegMask::new(map.height(), map.width(), bytes.iter().map(|&b| (b != 0) as u8).collect())?;
        let s = fg_bg_stats(map, &mask, crop as usize)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = DmRegionStats {
            mean_in: s.mean_in,
            mean_out: s.mean_out,
            n_in: s.n_in,
            n_out: s.n_out,
        };
        Ok(())
    })
}

/// Fusion rule: `argmax_c (mean_j level[j][c] + global[c])`.
///
/// `levels` holds `n_levels` rows of `n_classes` margins. Classes are taken
/// to be in lexicographic order already, so ties go to the lowest index.
///
/// # Safety
/// `levels` must hold `n_levels * n_classes` doubles, `global` `n_classes`;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dm_fuse(
    levels: *const f64,
    n_levels: usize,
    global: *const f64,
    n_classes: usize,
    out: *mut usize,
) -> DmStatus {
    guard(|| {
        if n_classes == 0 {
            return Err(Failure(DmStatus::InvalidArgument, "n_classes must be at least 1".into()));
        }
        let total = n_levels
            .checked_mul(n_classes)
            .ok_or_else(|| Failure(DmStatus::InvalidArgument, "levels size overflows".into()))?;
        let levels = slice(levels, total, "levels")?;
        let global = slice(global, n_classes, "global")?;
        let names: Vec<String> = (0..n_classes).map(|i| format!("{i:020}")).collect();
        let matrix = |v: &[f64]| MarginMatrix::new(names.clone(), v.to_vec());
        let level_matrices = levels.chunks(n_classes).map(matrix).collect::<Result<Vec<_>, _>>()?;
        let winner = fuse(&level_matrices, &matrix(global)?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = winner;
        Ok(())
    })
}
