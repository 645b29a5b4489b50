//! C ABI over the voxdistill core.
//!
//! Every entry point returns a [`VxdStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`vxd_last_error_message`]. Objects cross
//! the boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Grids are dense `h * w * d` arrays with depth fastest.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use voxdistill::eval::{dice_jaccard, sliding_window_infer, surface_distances};
use voxdistill::experiment::{cmd_train, load_or_build, ExperimentConfig};
use voxdistill::model::{Checkpoint, ParamSet};
use voxdistill::sdm::signed_distance_map;
use voxdistill::synth::{generate_cases, make_split, DatasetSplit, PhantomSpec, Volume};
use voxdistill::{dataset_io, Error, ErrorCategory, Grid3};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VxdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Shape = 3,
    Numeric = 4,
    Format = 5,
    Io = 6,
    Panic = 7,
}

impl From<ErrorCategory> for VxdStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::InvalidInput => VxdStatus::InvalidInput,
            ErrorCategory::Shape => VxdStatus::Shape,
            ErrorCategory::Numeric => VxdStatus::Numeric,
            ErrorCategory::Format => VxdStatus::Format,
            ErrorCategory::Io => VxdStatus::Io,
        }
    }
}

/// Trained network weights (the student of a checkpoint).
pub struct VxdModel {
    params: ParamSet,
}

/// A labeled / unlabeled / test split held in memory.
pub struct VxdDataset {
    split: DatasetSplit,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VxdStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VxdStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VxdStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            e.category().into()
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            VxdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn read3<T: Copy>(p: *const T, what: &'static str) -> Result<[T; 3], Failure> {
    let p = non_null(p, what)?;
    Ok([*p, *p.add(1), *p.add(2)])
}

unsafe fn dims_arg(p: *const usize) -> Result<([usize; 3], usize), Failure> {
    let dims = read3(p, "dims")?;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(format!("{dims:?} overflows")))?;
    if n == 0 {
        return Err(Error::InvalidShape(format!("{dims:?} has an empty axis")).into());
    }
    Ok((dims, n))
}

unsafe fn grid_arg<T: Copy>(data: *const T, dims: [usize; 3], n: usize, what: &'static str) -> Result<Grid3<T>, Failure> {
    let data = non_null(data, what)?;
    Ok(Grid3::from_vec(dims, std::slice::from_raw_parts(data, n).to_vec())?)
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    let p = non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = value;
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, excluding NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vxd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vxd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Normalized signed distance map of a binary mask (negative inside, in
/// `[-1, 1]`). `out` receives `h * w * d` values.
///
/// # Safety
/// `mask` and `out` must hold `h * w * d` elements; `dims` and `spacing` three.
#[no_mangle]
pub unsafe extern "C" fn vxd_signed_distance_map(
    mask: *const u8,
    dims: *const usize,
    spacing: *const f64,
    out: *mut f64,
) -> VxdStatus {
    guard(|| {
        let (dims, n) = dims_arg(dims)?;
        let mask = grid_arg(mask, dims, n, "mask")?;
        let spacing = read3(spacing, "spacing")?;
        non_null(out, "out")?;
        let sdm = signed_distance_map(&mask, spacing)?;
        ptr::copy_nonoverlapping(sdm.values().as_slice().as_ptr(), out, n);
        Ok(())
    })
}

/// Dice and Jaccard overlap in percent.
///
/// # Safety
/// `pred` and `truth` must hold `h * w * d` elements.
#[no_mangle]
pub unsafe extern "C" fn vxd_dice_jaccard(
    pred: *const u8,
    truth: *const u8,
    dims: *const usize,
    out_dice: *mut f64,
    out_jaccard: *mut f64,
) -> VxdStatus {
    guard(|| {
        let (dims, n) = dims_arg(dims)?;
        let (d, j) = dice_jaccard(&grid_arg(pred, dims, n, "pred")?, &grid_arg(truth, dims, n, "truth")?)?;
        write_out(out_dice, d, "out_dice")?;
        write_out(out_jaccard, j, "out_jaccard")
    })
}

/// Average symmetric surface distance and 95th-percentile Hausdorff distance.
/// Fails with `InvalidInput` when either mask is empty.
///
/// # Safety
/// `pred` and `truth` must hold `h * w * d` elements; `spacing` three.
#[no_mangle]
pub unsafe extern "C" fn vxd_surface_distances(
    pred: *const u8,
    truth: *const u8,
    dims: *const usize,
    spacing: *const f64,
    out_asd: *mut f64,
    out_hd95: *mut f64,
) -> VxdStatus {
    guard(|| {
        let (dims, n) = dims_arg(dims)?;
        let spacing = read3(spacing, "spacing")?;
        let (asd, hd) = surface_distances(&grid_arg(pred, dims, n, "pred")?, &grid_arg(truth, dims, n, "truth")?, spacing)?;
        write_out(out_asd, asd, "out_asd")?;
        write_out(out_hd95, hd, "out_hd95")
    })
}

/// Generates a phantom split in memory with the default phantom family.
///
/// # Safety
/// `shape` must hold three elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vxd_dataset_generate(
    shape: *const usize,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    seed: u64,
    out: *mut *mut VxdDataset,
) -> VxdStatus {
    guard(|| {
        let shape = read3(shape, "shape")?;
        non_null(out, "out")?;
        let cases = generate_cases(n_labeled + n_unlabeled + n_test, shape, seed, &PhantomSpec::default())?;
        let split = make_split(cases, n_labeled, n_unlabeled, n_test, seed)?;
        *out = Box::into_raw(Box::new(VxdDataset { split }));
        Ok(())
    })
}

/// Loads a dataset directory written by `voxdistill generate`, verifying checksums.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vxd_dataset_load(dir: *const c_char, out: *mut *mut VxdDataset) -> VxdStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        non_null(out, "out")?;
        let (split, _) = dataset_io::load_split(&dir)?;
        *out = Box::into_raw(Box::new(VxdDataset { split }));
        Ok(())
    })
}

/// Number of labeled, unlabeled and test cases.
///
/// # Safety
/// `dataset` must come from this library; `counts` must hold three elements.
#[no_mangle]
pub unsafe extern "C" fn vxd_dataset_counts(dataset: *const VxdDataset, counts: *mut usize) -> VxdStatus {
    guard(|| {
        let ds = &*non_null(dataset, "dataset")?;
        non_null(counts, "counts")?;
        let s = &ds.split;
        for (i, v) in [s.labeled.len(), s.unlabeled.len(), s.test.len()].into_iter().enumerate() {
            *counts.add(i) = v;
        }
        Ok(())
    })
}

/// Copies volume and mask of test case `index`. Either output may be null.
///
/// # Safety
/// `dataset` must come from this library; `dims` must hold three elements;
/// non-null outputs must hold `h * w * d` elements.
#[no_mangle]
pub unsafe extern "C" fn vxd_dataset_test_case(
    dataset: *const VxdDataset,
    index: usize,
    dims: *mut usize,
    volume: *mut f64,
    mask: *mut u8,
) -> VxdStatus {
    guard(|| {
        let ds = &*non_null(dataset, "dataset")?;
        let case = ds.split.test.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("test index {index} out of range ({} cases)", ds.split.test.len()))
        })?;
        non_null(dims, "dims")?;
        for (i, &d) in case.dims().iter().enumerate() {
            *dims.add(i) = d;
        }
        if !volume.is_null() {
            let v = case.volume.voxels().as_slice();
            ptr::copy_nonoverlapping(v.as_ptr(), volume, v.len());
        }
        if !mask.is_null() {
            let m = case.mask.as_slice();
            ptr::copy_nonoverlapping(m.as_ptr(), mask, m.len());
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vxd_dataset_free(dataset: *mut VxdDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Loads the student network of a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vxd_model_load(path: *const c_char, out: *mut *mut VxdModel) -> VxdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        non_null(out, "out")?;
        let ckpt = Checkpoint::load(&path, None)?;
        *out = Box::into_raw(Box::new(VxdModel { params: ckpt.student }));
        Ok(())
    })
}

/// Trains with a TOML experiment config into `run_dir` and returns the final
/// student. `config_path` may be null for the built-in defaults.
///
/// # Safety
/// Paths must be null (config only) or NUL-terminated; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn vxd_train(config_path: *const c_char, run_dir: *const c_char, out: *mut *mut VxdModel) -> VxdStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::load(&path_arg(config_path, "config_path")?)?
        };
        let run_dir = path_arg(run_dir, "run_dir")?;
        let split = load_or_build(&cfg.dataset)?;
        let state = cmd_train(&cfg, &split, &run_dir, None)?;
        if !out.is_null() {
            *out = Box::into_raw(Box::new(VxdModel { params: state.student }));
        }
        Ok(())
    })
}

/// Sliding-window foreground probability of a z-scored volume. `window` and
/// `stride` may be null: the window then defaults to the full volume rounded
/// down to the network's downsampling factor, the stride to half the window.
///
/// # Safety
/// `volume` and `out_prob` must hold `h * w * d` elements; non-null `window` and
/// `stride` three.
#[no_mangle]
pub unsafe extern "C" fn vxd_model_predict(
    model: *const VxdModel,
    volume: *const f64,
    dims: *const usize,
    window: *const usize,
    stride: *const usize,
    out_prob: *mut f64,
) -> VxdStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        let (dims, n) = dims_arg(dims)?;
        let voxels = grid_arg(volume, dims, n, "volume")?;
        non_null(out_prob, "out_prob")?;
        let f = model.params.arch.downsampling();
        let window = if window.is_null() {
            dims.map(|d| (d / f * f).max(f))
        } else {
            read3(window, "window")?
        };
        let stride = if stride.is_null() {
            window.map(|w| (w / 2).max(1))
        } else {
            read3(stride, "stride")?
        };
        let prob = sliding_window_infer(&model.params, &Volume::new(voxels, [1.0; 3])?, window, stride)?;
        ptr::copy_nonoverlapping(prob.as_slice().as_ptr(), out_prob, n);
        Ok(())
    })
}

/// Number of trainable parameters of the model.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vxd_model_num_params(model: *const VxdModel, out: *mut usize) -> VxdStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        write_out(out, model.params.num_params(), "out")
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vxd_model_free(model: *mut VxdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
