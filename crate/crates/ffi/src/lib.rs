//! C interface to the hsfm library.
//!
//! Every fallible function returns an [`HsfmStatus`]. On failure a message is
//! kept per thread and can be read with [`hsfm_last_error_message`] until the
//! next failing call on that thread. Datasets, splits, heads and support sets
//! are handed out as opaque pointers and must be released with the matching
//! `*_free` function. Output pointers are set to NULL before any work is
//! done, so they never dangle on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hsfm::metaopt::Balance;
use hsfm::runner::{run, Command, RunConfig};
use hsfm::{
    dfr_baseline, erm_train, evaluate, export_support, generate, read_features, read_head,
    write_features, write_head, DatasetSplit, Error, FeatureDataset, GdOptions, LinearHead,
    SupportSet, SynthConfig,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Bad magic, unsupported version or truncated file.
    Format = 4,
    Validation = 5,
    Shape = 6,
    /// Non-finite values during training.
    Numeric = 7,
    Config = 8,
    /// The run finished but reported failure (self-check, sweep points).
    Failed = 9,
    Panic = 10,
}

/// Opaque handle to a grouped feature dataset.
pub struct HsfmDataset {
    inner: FeatureDataset,
}

/// Opaque handle to a train/val/test triple.
pub struct HsfmSplit {
    inner: DatasetSplit,
}

/// Opaque handle to a linear softmax head.
pub struct HsfmHead {
    inner: LinearHead,
}

/// Opaque handle to a learned support set.
pub struct HsfmSupport {
    inner: SupportSet,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsfmSplitPart {
    Train = 0,
    Val = 1,
    Test = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HsfmDatasetInfo {
    pub rows: usize,
    pub dim: usize,
    pub classes: usize,
    pub groups: usize,
}

/// Full-batch gradient descent settings. `clip_norm <= 0` disables clipping.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsfmGdOptions {
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HsfmEvalSummary {
    pub worst_group_accuracy: f64,
    pub average_accuracy: f64,
    pub mean_loss: f64,
    pub group_count: usize,
}

struct FfiError {
    status: HsfmStatus,
    message: String,
}

impl FfiError {
    fn new(status: HsfmStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn null(name: &str) -> Self {
        Self::new(HsfmStatus::NullPointer, format!("`{name}` is NULL"))
    }
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => HsfmStatus::Io,
            Error::BadMagic { .. } | Error::Version { .. } | Error::Truncated { .. } => {
                HsfmStatus::Format
            }
            Error::Validation(_) | Error::LabelIndex { .. } | Error::EmptyBatch => {
                HsfmStatus::Validation
            }
            Error::Shape(_) => HsfmStatus::Shape,
            Error::Divergence { .. } => HsfmStatus::Numeric,
            Error::Unsupported(_) | Error::Config(_) => HsfmStatus::Config,
            Error::Failed(_) => HsfmStatus::Failed,
        };
        Self::new(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> HsfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HsfmStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            HsfmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(FfiError::null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        FfiError::new(
            HsfmStatus::InvalidArgument,
            format!("`{name}` is not valid UTF-8"),
        )
    })
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> FfiResult<PathBuf> {
    str_arg(p, name).map(PathBuf::from)
}

unsafe fn obj<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| FfiError::null(name))
}

/// Null out an output slot up front; fails if the slot itself is NULL.
unsafe fn clear_out<T>(out: *mut *mut T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(FfiError::null(name));
    }
    *out = ptr::null_mut();
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn gd_options(o: &HsfmGdOptions) -> GdOptions {
    GdOptions {
        steps: o.steps,
        lr: o.lr,
        clip_norm: (o.clip_norm > 0.0).then_some(o.clip_norm),
        weight_decay: o.weight_decay,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hsfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hsfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---------------------------------------------------------------- datasets

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_dataset_read(
    path: *const c_char,
    out: *mut *mut HsfmDataset,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let ds = read_features(path_arg(path, "path")?)?;
        put(out, HsfmDataset { inner: ds });
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hsfm_dataset_write(
    ds: *const HsfmDataset,
    path: *const c_char,
) -> HsfmStatus {
    guard(|| {
        let ds = obj(ds, "ds")?;
        write_features(path_arg(path, "path")?, &ds.inner)?;
        Ok(())
    })
}

/// Build a dataset from row-major `features` (`rows * dim` floats) and
/// per-row `labels` and `groups`. The arrays are copied.
///
/// # Safety
/// The arrays must hold at least the stated number of elements (they may be
/// NULL when `rows` is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_dataset_from_arrays(
    features: *const f32,
    labels: *const u32,
    groups: *const u32,
    rows: usize,
    dim: usize,
    classes: usize,
    group_count: usize,
    out: *mut *mut HsfmDataset,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let len = rows
            .checked_mul(dim)
            .ok_or_else(|| FfiError::new(HsfmStatus::InvalidArgument, "rows * dim overflows"))?;
        let slice = |p: *const u32, name: &str| -> FfiResult<Vec<usize>> {
            if rows == 0 {
                return Ok(Vec::new());
            }
            if p.is_null() {
                return Err(FfiError::null(name));
            }
            Ok(std::slice::from_raw_parts(p, rows)
                .iter()
                .map(|&v| v as usize)
                .collect())
        };
        let feats = if len == 0 {
            Vec::new()
        } else if features.is_null() {
            return Err(FfiError::null("features"));
        } else {
            std::slice::from_raw_parts(features, len).to_vec()
        };
        let ds = FeatureDataset::new(
            feats,
            slice(labels, "labels")?,
            slice(groups, "groups")?,
            dim,
            classes,
            group_count,
        )?;
        put(out, HsfmDataset { inner: ds });
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_dataset_info(
    ds: *const HsfmDataset,
    info: *mut HsfmDatasetInfo,
) -> HsfmStatus {
    guard(|| {
        let ds = &obj(ds, "ds")?.inner;
        let info = info.as_mut().ok_or_else(|| FfiError::null("info"))?;
        *info = HsfmDatasetInfo {
            rows: ds.len(),
            dim: ds.dim(),
            classes: ds.class_count(),
            groups: ds.group_count(),
        };
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hsfm_dataset_free(ds: *mut HsfmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ------------------------------------------------------------------ splits

/// Generate a synthetic split. `config_json` is a synthetic-data config
/// object; NULL selects the canonical two-class, two-environment benchmark.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_split_synth(
    config_json: *const c_char,
    out: *mut *mut HsfmSplit,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let cfg = match opt_str_arg(config_json, "config_json")? {
            None => SynthConfig::synth_waterbirds(),
            Some(text) => parse_synth_config(text)?,
        };
        put(
            out,
            HsfmSplit {
                inner: generate(&cfg)?,
            },
        );
        Ok(())
    })
}

fn parse_synth_config(text: &str) -> FfiResult<SynthConfig> {
    // Parse through the run-config schema so errors read the same as the CLI's.
    let wrapped = format!(r#"{{"data": {{"synth": {text}}}}}"#);
    let cfg = RunConfig::from_json(&wrapped)?;
    Ok(cfg.data.and_then(|d| d.synth).expect("synth was set"))
}

/// # Safety
/// The paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_split_read(
    train: *const c_char,
    val: *const c_char,
    test: *const c_char,
    out: *mut *mut HsfmSplit,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let split = DatasetSplit::new(
            read_features(path_arg(train, "train")?)?,
            read_features(path_arg(val, "val")?)?,
            read_features(path_arg(test, "test")?)?,
        )?;
        put(out, HsfmSplit { inner: split });
        Ok(())
    })
}

/// Copy one part of a split into a new dataset handle.
///
/// # Safety
/// `split` must be a live split handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_split_part(
    split: *const HsfmSplit,
    part: HsfmSplitPart,
    out: *mut *mut HsfmDataset,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let s = &obj(split, "split")?.inner;
        let ds = match part {
            HsfmSplitPart::Train => &s.train,
            HsfmSplitPart::Val => &s.val,
            HsfmSplitPart::Test => &s.test,
        };
        put(out, HsfmDataset { inner: ds.clone() });
        Ok(())
    })
}

/// # Safety
/// `split` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hsfm_split_free(split: *mut HsfmSplit) {
    if !split.is_null() {
        drop(Box::from_raw(split));
    }
}

// ------------------------------------------------------------------- heads

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_head_zeros(
    classes: usize,
    dim: usize,
    out: *mut *mut HsfmHead,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        if classes < 2 || dim == 0 {
            return Err(FfiError::new(
                HsfmStatus::InvalidArgument,
                format!("a head needs at least 2 classes and 1 dimension, got {classes}x{dim}"),
            ));
        }
        put(
            out,
            HsfmHead {
                inner: LinearHead::zeros(classes, dim),
            },
        );
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_head_read(
    path: *const c_char,
    out: *mut *mut HsfmHead,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        put(
            out,
            HsfmHead {
                inner: read_head(path_arg(path, "path")?)?,
            },
        );
        Ok(())
    })
}

/// # Safety
/// `head` must be a live head handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hsfm_head_write(head: *const HsfmHead, path: *const c_char) -> HsfmStatus {
    guard(|| {
        write_head(path_arg(path, "path")?, &obj(head, "head")?.inner)?;
        Ok(())
    })
}

/// Copy the head's parameters out: `weights` receives `classes * dim`
/// row-major values and `bias` receives `classes` values. Either buffer may
/// be NULL to skip it.
///
/// # Safety
/// Non-NULL buffers must hold at least the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hsfm_head_params(
    head: *const HsfmHead,
    weights: *mut f64,
    weights_len: usize,
    bias: *mut f64,
    bias_len: usize,
) -> HsfmStatus {
    guard(|| {
        let h = &obj(head, "head")?.inner;
        if !weights.is_null() {
            let n = h.class_count() * h.dim();
            if weights_len < n {
                return Err(FfiError::new(
                    HsfmStatus::InvalidArgument,
                    format!("weights buffer holds {weights_len} values, need {n}"),
                ));
            }
            let dst = std::slice::from_raw_parts_mut(weights, n);
            for (d, s) in dst.iter_mut().zip(h.weights.iter()) {
                *d = *s;
            }
        }
        if !bias.is_null() {
            let n = h.class_count();
            if bias_len < n {
                return Err(FfiError::new(
                    HsfmStatus::InvalidArgument,
                    format!("bias buffer holds {bias_len} values, need {n}"),
                ));
            }
            std::slice::from_raw_parts_mut(bias, n)
                .copy_from_slice(h.bias.as_slice().expect("contiguous"));
        }
        Ok(())
    })
}

/// # Safety
/// `head` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hsfm_head_free(head: *mut HsfmHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

// ---------------------------------------------------------------- training

/// Full-batch ERM from `head0` on `ds`.
///
/// # Safety
/// Handles must be live; `opts` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_erm_train(
    head0: *const HsfmHead,
    ds: *const HsfmDataset,
    opts: *const HsfmGdOptions,
    out: *mut *mut HsfmHead,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let opts = gd_options(obj(opts, "opts")?);
        let head = erm_train(&obj(head0, "head0")?.inner, &obj(ds, "ds")?.inner, &opts)?;
        put(out, HsfmHead { inner: head });
        Ok(())
    })
}

/// Retrain `head0` on a balanced subsample of `val`, balancing groups when
/// `by_group` is true and classes otherwise.
///
/// # Safety
/// Handles must be live; `opts` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_dfr_train(
    head0: *const HsfmHead,
    val: *const HsfmDataset,
    opts: *const HsfmGdOptions,
    by_group: bool,
    seed: u64,
    out: *mut *mut HsfmHead,
) -> HsfmStatus {
    guard(|| {
        clear_out(out, "out")?;
        let opts = gd_options(obj(opts, "opts")?);
        let balance = if by_group {
            Balance::ByGroup
        } else {
            Balance::ByClass
        };
        let head = dfr_baseline(
            &obj(head0, "head0")?.inner,
            &obj(val, "val")?.inner,
            &opts,
            balance,
            seed,
        )?;
        put(out, HsfmHead { inner: head });
        Ok(())
    })
}

/// Run HSFM from `head0` on `split`. `preset` names a hyperparameter preset
/// (NULL for the synthetic default) and `overrides_json` is an optional JSON
/// object whose fields replace the preset's. Either output may be NULL when
/// not wanted.
///
/// # Safety
/// Handles must be live; strings NULL or NUL-terminated; non-NULL outputs
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_train(
    head0: *const HsfmHead,
    split: *const HsfmSplit,
    preset: *const c_char,
    overrides_json: *const c_char,
    out_head: *mut *mut HsfmHead,
    out_support: *mut *mut HsfmSupport,
) -> HsfmStatus {
    guard(|| {
        if !out_head.is_null() {
            *out_head = ptr::null_mut();
        }
        if !out_support.is_null() {
            *out_support = ptr::null_mut();
        }
        let mut cfg = RunConfig {
            preset: opt_str_arg(preset, "preset")?.map(str::to_string),
            ..RunConfig::default()
        };
        if let Some(text) = opt_str_arg(overrides_json, "overrides_json")? {
            let wrapped = format!(r#"{{"hsfm": {text}}}"#);
            cfg.hsfm = RunConfig::from_json(&wrapped)?.hsfm;
        }
        let hsfm_cfg = cfg.hsfm_config()?;
        let outcome = hsfm::hsfm_train(
            &obj(head0, "head0")?.inner,
            &obj(split, "split")?.inner,
            &hsfm_cfg,
        )?;
        if !out_head.is_null() {
            put(
                out_head,
                HsfmHead {
                    inner: outcome.head,
                },
            );
        }
        if !out_support.is_null() {
            put(
                out_support,
                HsfmSupport {
                    inner: outcome.support,
                },
            );
        }
        Ok(())
    })
}

/// Write `<prefix>.init` and `<prefix>.opt` HSFM-FS files for the support set.
///
/// # Safety
/// `support` must be live; `prefix` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hsfm_support_export(
    support: *const HsfmSupport,
    prefix: *const c_char,
) -> HsfmStatus {
    guard(|| {
        export_support(&obj(support, "support")?.inner, path_arg(prefix, "prefix")?)?;
        Ok(())
    })
}

/// Number of support rows and their dimension.
///
/// # Safety
/// `support` must be live; `rows` and `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn hsfm_support_shape(
    support: *const HsfmSupport,
    rows: *mut usize,
    dim: *mut usize,
) -> HsfmStatus {
    guard(|| {
        let s = &obj(support, "support")?.inner;
        *rows.as_mut().ok_or_else(|| FfiError::null("rows"))? = s.len();
        *dim.as_mut().ok_or_else(|| FfiError::null("dim"))? = s.dim();
        Ok(())
    })
}

/// # Safety
/// `support` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hsfm_support_free(support: *mut HsfmSupport) {
    if !support.is_null() {
        drop(Box::from_raw(support));
    }
}

// -------------------------------------------------------------- evaluation

/// Evaluate `head` on `ds`. When `per_group` is non-NULL it receives one
/// accuracy per group (NaN for groups without rows) and `per_group_len` must
/// be at least the group count.
///
/// # Safety
/// Handles must be live; `summary` writable; `per_group` NULL or writable for
/// `per_group_len` values.
#[no_mangle]
pub unsafe extern "C" fn hsfm_evaluate(
    head: *const HsfmHead,
    ds: *const HsfmDataset,
    summary: *mut HsfmEvalSummary,
    per_group: *mut f64,
    per_group_len: usize,
) -> HsfmStatus {
    guard(|| {
        let summary = summary.as_mut().ok_or_else(|| FfiError::null("summary"))?;
        let head = &obj(head, "head")?.inner;
        let ds = &obj(ds, "ds")?.inner;
        if head.class_count() != ds.class_count() || head.dim() != ds.dim() {
            return Err(FfiError::new(
                HsfmStatus::Shape,
                format!(
                    "head is {}x{} but data has C={}, d={}",
                    head.class_count(),
                    head.dim(),
                    ds.class_count(),
                    ds.dim()
                ),
            ));
        }
        let report = evaluate(head, ds)?;
        let groups = report.per_group_accuracy.len();
        if !per_group.is_null() {
            if per_group_len < groups {
                return Err(FfiError::new(
                    HsfmStatus::InvalidArgument,
                    format!("per_group buffer holds {per_group_len} values, need {groups}"),
                ));
            }
            let dst = std::slice::from_raw_parts_mut(per_group, groups);
            for (d, acc) in dst.iter_mut().zip(&report.per_group_accuracy) {
                *d = acc.unwrap_or(f64::NAN);
            }
        }
        *summary = HsfmEvalSummary {
            worst_group_accuracy: report.worst_group_accuracy,
            average_accuracy: report.average_accuracy,
            mean_loss: report.mean_loss,
            group_count: groups,
        };
        Ok(())
    })
}

// ---------------------------------------------------------------- commands

/// Run a CLI command (`"gen-data"`, `"train-hsfm"`, ...) with the config file
/// at `config_path`, writing into `out_dir`.
///
/// # Safety
/// All strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hsfm_run_command(
    command: *const c_char,
    config_path: *const c_char,
    out_dir: *const c_char,
) -> HsfmStatus {
    guard(|| {
        let name = str_arg(command, "command")?;
        let cmd = Command::from_name(name).ok_or_else(|| {
            FfiError::new(
                HsfmStatus::InvalidArgument,
                format!("unknown command {name:?}"),
            )
        })?;
        let cfg = RunConfig::load(path_arg(config_path, "config_path")?)?;
        run(cmd, &cfg, &path_arg(out_dir, "out_dir")?)?;
        Ok(())
    })
}
