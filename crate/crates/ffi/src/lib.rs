//! C ABI over the `scopeformer` crate.
//!
//! Every function returns an [`SfStatus`]; on failure a message is kept per
//! thread and read with [`sf_last_error`]. Models are opaque [`SfModel`]
//! handles created by [`sf_model_new`] and released by [`sf_model_free`].
//! Arrays are row-major `double` buffers; output buffers are caller-owned and
//! their capacity is passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use scopeformer::config::{ModelConfig, RunConfig};
use scopeformer::data::{self, DataError};
use scopeformer::loss::{weighted_log_loss_value, LabelWeights};
use scopeformer::model::{plan, Scopeformer};
use scopeformer::tensor::Tensor;
use scopeformer::train::Checkpoint;
use scopeformer::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SfModel {
    inner: Scopeformer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

struct Failure(SfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => SfStatus::Config,
            Error::Data(_) => SfStatus::Data,
            Error::Checkpoint(_) => SfStatus::Checkpoint,
            _ => SfStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure(SfStatus::Data, e.to_string())
    }
}

fn fail(status: SfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(SfStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn write_out(out: *mut f64, cap: usize, data: &[f64]) -> Result<(), Failure> {
    if cap < data.len() {
        return Err(fail(
            SfStatus::BufferTooSmall,
            format!("output needs {} values, capacity is {cap}", data.len()),
        ));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "output buffer is NULL"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn parse_model_config(json: &str) -> Result<ModelConfig, Failure> {
    // Accept either a full run config or just its `model` section.
    if let Ok(run) = RunConfig::from_json(json) {
        return Ok(run.canonical().map_err(Error::from)?.model);
    }
    let model = ModelConfig::from_json(json).map_err(Error::from)?;
    Ok(model.canonical().map_err(Error::from)?)
}

/// Validates a JSON run config (or bare model section).
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sf_config_validate(json: *const c_char) -> SfStatus {
    guard(|| {
        parse_model_config(str_arg(json, "json")?)?;
        Ok(())
    })
}

/// Shape plan of a config: the fused feature map `[h, w, C]`, token count,
/// latent width and total parameter count, without allocating weights.
///
/// # Safety
/// `json` must be NUL-terminated; `fused` must point to 3 writable values and
/// the remaining outputs to one each.
#[no_mangle]
pub unsafe extern "C" fn sf_config_plan(
    json: *const c_char,
    fused: *mut usize,
    tokens: *mut usize,
    latent_dim: *mut usize,
    params: *mut u64,
) -> SfStatus {
    guard(|| {
        let p = plan(&parse_model_config(str_arg(json, "json")?)?)?;
        if fused.is_null() {
            return Err(fail(SfStatus::NullPointer, "fused is NULL"));
        }
        std::ptr::copy_nonoverlapping(p.fused.as_ptr(), fused, 3);
        *out_arg(tokens, "tokens")? = p.tokens;
        *out_arg(latent_dim, "latent_dim")? = p.latent_dim;
        *out_arg(params, "params")? = p.total_params() as u64;
        Ok(())
    })
}

/// Builds a freshly initialised model.
///
/// # Safety
/// `json` must be NUL-terminated and `out` writable. Free the handle with
/// [`sf_model_free`].
#[no_mangle]
pub unsafe extern "C" fn sf_model_new(json: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let inner = Scopeformer::new(parse_model_config(str_arg(json, "json")?)?)?;
        *out = Box::into_raw(Box::new(SfModel { inner }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`sf_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads parameters from a checkpoint written by the trainer. With `force`
/// false a config digest mismatch is refused.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load_checkpoint(model: *mut SfModel, path: *const c_char, force: bool) -> SfStatus {
    guard(|| {
        let m = &mut out_arg(model, "model")?.inner;
        let path = PathBuf::from(str_arg(path, "path")?);
        let c = Checkpoint::load(&path, Some(m.config.digest()), force).map_err(Error::from)?;
        for (name, p) in m.params.iter_mut() {
            p.value = c
                .get_shaped(&format!("param/{name}"), p.value.shape())
                .map_err(Error::from)?
                .clone();
        }
        Ok(())
    })
}

/// Input side length and label count of a model.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_info(
    model: *const SfModel,
    image_size: *mut usize,
    in_channels: *mut usize,
    num_labels: *mut usize,
) -> SfStatus {
    guard(|| {
        let m = &model
            .as_ref()
            .ok_or_else(|| fail(SfStatus::NullPointer, "model is NULL"))?
            .inner;
        *out_arg(image_size, "image_size")? = m.config.image_size;
        *out_arg(in_channels, "in_channels")? = m.config.in_channels;
        *out_arg(num_labels, "num_labels")? = m.num_labels();
        Ok(())
    })
}

/// Label probabilities `[batch, num_labels]` for images `[batch, S, S, C]`.
///
/// # Safety
/// `images` must hold `batch·S·S·C` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sf_model_predict(
    model: *const SfModel,
    images: *const f64,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let m = &model
            .as_ref()
            .ok_or_else(|| fail(SfStatus::NullPointer, "model is NULL"))?
            .inner;
        let (s, c) = (m.config.image_size, m.config.in_channels);
        if batch == 0 {
            return Err(fail(SfStatus::InvalidArgument, "batch must be at least 1"));
        }
        let x = slice_arg(images, batch * s * s * c, "images")?;
        let t = Tensor::new(vec![batch, s, s, c], x.to_vec()).map_err(Error::from)?;
        let probs = m.predict(&t)?;
        write_out(out, out_len, probs.data())
    })
}

/// Parses a DICOM byte stream and windows it into `[rows, cols, 3]` with the
/// default windows. Call with `out` NULL to query `rows`/`cols` first.
///
/// # Safety
/// `bytes` must hold `len` bytes; `rows`/`cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_dicom_to_image(
    bytes: *const u8,
    len: usize,
    out: *mut f64,
    out_len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> SfStatus {
    guard(|| {
        let slice = data::parse_dicom_lite(slice_arg(bytes, len, "bytes")?, "<ffi>")?;
        *out_arg(rows, "rows")? = slice.rows;
        *out_arg(cols, "cols")? = slice.cols;
        if out.is_null() {
            return Ok(());
        }
        let img = data::hu_window_stack(&slice, &data::DEFAULT_WINDOWS)?;
        write_out(out, out_len, img.data())
    })
}

/// Weighted multi-label log loss of `probs` against binary `labels`, both
/// `[batch, num_labels]`. `weights` may be NULL for the standard weighting.
///
/// # Safety
/// Arrays must hold `batch·num_labels` values (`num_labels` for weights).
#[no_mangle]
pub unsafe extern "C" fn sf_weighted_log_loss(
    probs: *const f64,
    labels: *const f64,
    batch: usize,
    num_labels: usize,
    weights: *const f64,
    eps: f64,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        let n = batch * num_labels;
        let shape = vec![batch, num_labels];
        let p = Tensor::new(shape.clone(), slice_arg(probs, n, "probs")?.to_vec()).map_err(Error::from)?;
        let y = Tensor::new(shape, slice_arg(labels, n, "labels")?.to_vec()).map_err(Error::from)?;
        let w = if weights.is_null() {
            LabelWeights::standard(num_labels)
        } else {
            LabelWeights::new(slice_arg(weights, num_labels, "weights")?)
        }
        .map_err(Error::from)?;
        *out_arg(out, "out")? = weighted_log_loss_value(&p, &y, &w, eps).map_err(Error::from)?;
        Ok(())
    })
}

/// Reads an `.sfi` sample. Call with `out` NULL to query `dims` (H, W, C).
///
/// # Safety
/// `path` must be NUL-terminated and `dims` point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn sf_sfi_read(path: *const c_char, out: *mut f64, out_len: usize, dims: *mut usize) -> SfStatus {
    guard(|| {
        let t = data::read_sfi(&PathBuf::from(str_arg(path, "path")?))?;
        if dims.is_null() {
            return Err(fail(SfStatus::NullPointer, "dims is NULL"));
        }
        std::ptr::copy_nonoverlapping(t.shape().as_ptr(), dims, 3);
        if out.is_null() {
            return Ok(());
        }
        write_out(out, out_len, t.data())
    })
}

/// Writes an `[h, w, c]` image with values in `[0, 1]` as `.sfi`.
///
/// # Safety
/// `path` must be NUL-terminated and `data` hold `h·w·c` values.
#[no_mangle]
pub unsafe extern "C" fn sf_sfi_write(path: *const c_char, data: *const f64, h: usize, w: usize, c: usize) -> SfStatus {
    guard(|| {
        let v = slice_arg(data, h * w * c, "data")?.to_vec();
        let t = Tensor::new(vec![h, w, c], v).map_err(Error::from)?;
        data::write_sfi(&PathBuf::from(str_arg(path, "path")?), &t)?;
        Ok(())
    })
}
