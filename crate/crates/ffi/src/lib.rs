//! C ABI over the `crowdcount` library.
//!
//! Every function returns a [`CcStatus`]; on failure a message is kept per
//! thread and can be copied out with [`cc_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use crowdcount::density::{render_density, DotMap};
use crowdcount::eval;
use crowdcount::grid::DenseGrid;
use crowdcount::model::{self, CheckpointMeta, ModelConfig, ModelParams};
use crowdcount::synth::DatasetManifest;
use crowdcount::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Diverged = 6,
    Capacity = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

impl From<&Error> for CcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CcStatus::InvalidArgument,
            Error::Capacity { .. } => CcStatus::Capacity,
            Error::Diverged { .. } => CcStatus::Diverged,
            Error::Config(_) => CcStatus::Config,
            Error::Io { .. } => CcStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::Csv(_) => CcStatus::Format,
        }
    }
}

/// Count metrics; `rer` is a fraction, not a percentage.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CcMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rer: f64,
}

/// Dataset partitions as stored on disk.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcSplit {
    Seed = 0,
    Weak = 1,
    Val = 2,
    Test = 3,
}

/// Trained or freshly initialized network.
pub struct CcModel {
    params: ModelParams,
}

/// A generated dataset loaded from disk.
pub struct CcDataset {
    manifest: DatasetManifest,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(CcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(CcStatus::from(&e), e.to_string())
    }
}

fn fail(status: CcStatus, msg: &str) -> Fail {
    Fail(status, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(CcStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CcStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(CcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn image_arg(p: *const f64, rows: usize, cols: usize) -> Result<DenseGrid, Fail> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(CcStatus::InvalidArgument, "image size overflows"))?;
    Ok(DenseGrid::from_vec(rows, cols, slice_arg(p, n, "image")?.to_vec())?)
}

unsafe fn write_out(grid: &DenseGrid, out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(fail(CcStatus::NullPointer, "output buffer is null"));
    }
    if out_len < grid.len() {
        return Err(Fail(
            CcStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {out_len}", grid.len()),
        ));
    }
    ptr::copy_nonoverlapping(grid.values().as_ptr(), out, grid.len());
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length plus one.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(path: *const c_char, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CcStatus::NullPointer, "out is null"));
        }
        let (params, _) = model::load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CcModel { params }));
        Ok(())
    })
}

/// Initializes a model from a JSON model configuration (null for defaults).
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn cc_model_init(config_json: *const c_char, seed: u64, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CcStatus::NullPointer, "out is null"));
        }
        let config: ModelConfig = if config_json.is_null() {
            ModelConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| fail(CcStatus::InvalidArgument, "config is not UTF-8"))?;
            serde_json::from_str(text).map_err(|e| Fail(CcStatus::Config, e.to_string()))?
        };
        let params = model::init_model(&config, seed)?;
        *out = Box::into_raw(Box::new(CcModel { params }));
        Ok(())
    })
}

/// Writes `model` as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cc_model_save(model: *const CcModel, path: *const c_char, seed: u64, step: u64) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "model is null"))?;
        model::save_checkpoint(&path_arg(path)?, &m.params, CheckpointMeta { seed, step })?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of auxiliary branches.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_model_num_aux(model: *const CcModel, out: *mut usize) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "model is null"))?;
        let out = out.as_mut().ok_or_else(|| fail(CcStatus::NullPointer, "out is null"))?;
        *out = m.params.num_aux();
        Ok(())
    })
}

/// Predicted count for a row-major `rows x cols` image.
///
/// # Safety
/// `image` must hold `rows * cols` values; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn cc_model_predict_count(
    model: *const CcModel,
    image: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "model is null"))?;
        let out = out.as_mut().ok_or_else(|| fail(CcStatus::NullPointer, "out is null"))?;
        *out = model::predict_count(&m.params, &image_arg(image, rows, cols)?)?;
        Ok(())
    })
}

/// Density map of `branch` (0 is the primary map) into `out`, which must
/// hold `rows * cols` values.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_model_predict_density(
    model: *const CcModel,
    image: *const f64,
    rows: usize,
    cols: usize,
    branch: usize,
    out: *mut f64,
    out_len: usize,
) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "model is null"))?;
        if branch > m.params.num_aux() {
            return Err(Fail(
                CcStatus::InvalidArgument,
                format!("branch {branch} out of range (model has {} auxiliary)", m.params.num_aux()),
            ));
        }
        let (primary, aux) = model::predict_maps(&m.params, &image_arg(image, rows, cols)?)?;
        let map = if branch == 0 { &primary } else { &aux[branch - 1] };
        write_out(map, out, out_len)
    })
}

/// Ground-truth density for `n_points` dots given as interleaved `x, y`
/// pairs in pixel coordinates. Writes `height * width` values.
///
/// # Safety
/// `points_xy` must hold `2 * n_points` values; `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn cc_render_density(
    points_xy: *const f64,
    n_points: usize,
    width: usize,
    height: usize,
    sigma: f64,
    truncation: f64,
    out: *mut f64,
    out_len: usize,
) -> CcStatus {
    guard(|| {
        let xy = slice_arg(points_xy, n_points * 2, "points")?;
        let pts = xy.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let dots = DotMap::new(width, height, pts)?;
        let d = render_density(&dots, sigma, truncation)?;
        write_out(d.grid(), out, out_len)
    })
}

/// MAE, root-mean-square error and mean relative error of `n` counts.
///
/// # Safety
/// `pred` and `gt` must hold `n` values; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn cc_metrics(pred: *const f64, gt: *const f64, n: usize, out: *mut CcMetrics) -> CcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| fail(CcStatus::NullPointer, "out is null"))?;
        let (p, g) = (slice_arg(pred, n, "pred")?, slice_arg(gt, n, "gt")?);
        *out = CcMetrics {
            mae: eval::mae(p, g)?,
            mse: eval::mse_metric(p, g)?,
            rer: eval::rer(p, g)?,
        };
        Ok(())
    })
}

/// Opens a dataset directory written by `crowdcount gen-data`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn cc_dataset_load(dir: *const c_char, out: *mut *mut CcDataset) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CcStatus::NullPointer, "out is null"));
        }
        let manifest = DatasetManifest::load(&path_arg(dir)?)?;
        *out = Box::into_raw(Box::new(CcDataset { manifest }));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cc_dataset_free(ds: *mut CcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn shots(v: &[crowdcount::synth::LabeledShot]) -> Vec<(&DenseGrid, f64)> {
    v.iter().map(|s| (&s.image, s.count)).collect()
}

fn split_items(ds: &CcDataset, split: CcSplit) -> Vec<(&DenseGrid, f64)> {
    let m = &ds.manifest;
    match split {
        CcSplit::Seed => vec![(&m.seed_sample.image, m.seed_sample.dots.count() as f64)],
        CcSplit::Weak => shots(&m.weak_samples),
        CcSplit::Val => shots(&m.val_samples),
        CcSplit::Test => shots(&m.test_samples),
    }
}

/// Number of images in `split`, plus the shared image size.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cc_dataset_info(
    ds: *const CcDataset,
    split: CcSplit,
    n_images: *mut usize,
    rows: *mut usize,
    cols: *mut usize,
) -> CcStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "dataset is null"))?;
        if n_images.is_null() || rows.is_null() || cols.is_null() {
            return Err(fail(CcStatus::NullPointer, "output pointer is null"));
        }
        *n_images = split_items(d, split).len();
        *rows = d.manifest.scene_spec.height;
        *cols = d.manifest.scene_spec.width;
        Ok(())
    })
}

/// Copies image `index` of `split` into `out` and its count label into
/// `count`.
///
/// # Safety
/// `out` must hold `out_len` values; `count` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn cc_dataset_image(
    ds: *const CcDataset,
    split: CcSplit,
    index: usize,
    out: *mut f64,
    out_len: usize,
    count: *mut f64,
) -> CcStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| fail(CcStatus::NullPointer, "dataset is null"))?;
        let count = count.as_mut().ok_or_else(|| fail(CcStatus::NullPointer, "count is null"))?;
        let items = split_items(d, split);
        let (img, c) = items.get(index).ok_or_else(|| {
            Fail(
                CcStatus::InvalidArgument,
                format!("index {index} out of range ({} images)", items.len()),
            )
        })?;
        write_out(img, out, out_len)?;
        *count = *c;
        Ok(())
    })
}
