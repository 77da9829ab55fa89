//! C ABI over the adaptation toolkit.
//!
//! Every function returns an [`XpmoStatus`]; on failure the message is kept
//! per thread and read with [`xpmo_last_error`]. Images are passed as a
//! contiguous `f64` buffer of `n` images, each `height·width·channels`
//! values in row-major order with channels innermost.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use expamoe::adaptation::Adapter;
use expamoe::backbone::{model_forward, ToyViT};
use expamoe::harness::config::ExperimentConfig;
use expamoe::sodd::DomainRegistry;
use expamoe::spectral::{extract_batch, ImageSample, SpectralConfig};
use expamoe::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XpmoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Checkpoint = 4,
    Io = 5,
    Shape = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Internal = 10,
}

/// A model checkpoint with its optional domain registry.
pub struct XpmoModel {
    model: ToyViT,
    registry: Option<DomainRegistry>,
}

/// A standalone domain registry.
pub struct XpmoRegistry {
    inner: DomainRegistry,
}

/// An adaptation session owning its model and registry.
pub struct XpmoAdapter {
    inner: Adapter,
}

/// Outcome of one adaptation step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct XpmoStepReport {
    pub domain_id: usize,
    pub sodd_domain: usize,
    pub is_new: bool,
    pub pass_count: usize,
    pub loss: f64,
    pub updated: bool,
}

/// Outcome of a registry assignment.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct XpmoAssignment {
    pub domain: usize,
    pub is_new: bool,
    pub min_distance: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(XpmoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::UnknownCorruption(_) => XpmoStatus::Config,
            Error::Checkpoint(_) => XpmoStatus::Checkpoint,
            Error::Io(_) => XpmoStatus::Io,
            Error::Shape { .. }
            | Error::Dimension { .. }
            | Error::CropExceedsSpectrum { .. }
            | Error::InvalidImage(_)
            | Error::UnknownDomainBranch { .. }
            | Error::EmptyInput(_)
            | Error::EmptyRegistry => XpmoStatus::Shape,
            Error::NotPositiveDefinite { .. }
            | Error::DegenerateCovariance { .. }
            | Error::NegativeProbability(_)
            | Error::Diverged(_)
            | Error::EmptyLogits => XpmoStatus::Numeric,
            _ => XpmoStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: XpmoStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> XpmoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            XpmoStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside the library".into());
            XpmoStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(XpmoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(XpmoStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(XpmoStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(XpmoStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn images_arg(
    pixels: *const f64,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<ImageSample>, Failure> {
    if pixels.is_null() {
        return Err(fail(XpmoStatus::NullPointer, "pixels is null"));
    }
    let per = height
        .checked_mul(width)
        .and_then(|x| x.checked_mul(channels))
        .filter(|&x| x > 0)
        .ok_or_else(|| fail(XpmoStatus::InvalidArgument, "image dimensions must be positive"))?;
    let total = per
        .checked_mul(n)
        .ok_or_else(|| fail(XpmoStatus::InvalidArgument, "image buffer size overflows"))?;
    let all = std::slice::from_raw_parts(pixels, total);
    all.chunks_exact(per)
        .map(|px| ImageSample::new(height, width, channels, px.to_vec()).map_err(Failure::from))
        .collect()
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(XpmoStatus::NullPointer, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len`. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn xpmo_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads an `XPMO` checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_model_load(path: *const c_char, out: *mut *mut XpmoModel) -> XpmoStatus {
    guard(|| {
        let path = path_arg(path)?;
        let bytes = std::fs::read(&path).map_err(|e| fail(XpmoStatus::Io, format!("{}: {e}", path.display())))?;
        let (model, registry) = ToyViT::from_bytes(&bytes)?;
        put(out, Box::into_raw(Box::new(XpmoModel { model, registry })), "out")
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_model_load_bytes(bytes: *const u8, len: usize, out: *mut *mut XpmoModel) -> XpmoStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(fail(XpmoStatus::NullPointer, "bytes is null"));
        }
        let (model, registry) = ToyViT::from_bytes(std::slice::from_raw_parts(bytes, len))?;
        put(out, Box::into_raw(Box::new(XpmoModel { model, registry })), "out")
    })
}

/// Writes the model and its registry to `path`.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xpmo_model_save(model: *const XpmoModel, path: *const c_char) -> XpmoStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let path = path_arg(path)?;
        std::fs::write(&path, m.model.to_bytes(m.registry.as_ref()))
            .map_err(|e| fail(XpmoStatus::Io, format!("{}: {e}", path.display())))
    })
}

/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn xpmo_model_free(model: *mut XpmoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, domain branches and the expected image side.
///
/// # Safety
/// `model` must come from this library; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn xpmo_model_info(
    model: *const XpmoModel,
    classes: *mut usize,
    branches: *mut usize,
    image_size: *mut usize,
) -> XpmoStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        for (p, v) in [
            (classes, m.model.config.classes),
            (branches, m.model.num_branches()),
            (image_size, m.model.config.image_size),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Predicted class per image through domain branch `domain_id`.
///
/// # Safety
/// `pixels` holds `n` images as described in the crate docs; `labels_out`
/// has room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn xpmo_model_predict(
    model: *const XpmoModel,
    pixels: *const f64,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    domain_id: usize,
    labels_out: *mut usize,
) -> XpmoStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let images = images_arg(pixels, n, height, width, channels)?;
        if labels_out.is_null() {
            return Err(fail(XpmoStatus::NullPointer, "labels_out is null"));
        }
        let preds = model_forward(&m.model, &images, domain_id)?.predictions();
        ptr::copy_nonoverlapping(preds.as_ptr(), labels_out, preds.len());
        Ok(())
    })
}

/// Spectral descriptor of one image. `out_len` receives the descriptor
/// length; with a short or null `out`, nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `pixels` holds one image; `out` is null or has room for `capacity`.
#[no_mangle]
pub unsafe extern "C" fn xpmo_descriptor(
    pixels: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    crop_radius: usize,
    log_compress: bool,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> XpmoStatus {
    guard(|| {
        let images = images_arg(pixels, 1, height, width, channels)?;
        let cfg = SpectralConfig {
            crop_radius,
            log_compress,
        };
        let d = extract_batch(&images, &cfg)?.remove(0);
        put(out_len, d.len(), "out_len")?;
        if out.is_null() || capacity < d.len() {
            return Err(fail(
                XpmoStatus::BufferTooSmall,
                format!("descriptor needs {} values, buffer holds {capacity}", d.len()),
            ));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), out, d.len());
        Ok(())
    })
}

/// Copies the registry stored in a checkpoint.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_registry_from_model(model: *const XpmoModel, out: *mut *mut XpmoRegistry) -> XpmoStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let inner = m
            .registry
            .clone()
            .ok_or_else(|| fail(XpmoStatus::Checkpoint, "checkpoint has no registry"))?;
        put(out, Box::into_raw(Box::new(XpmoRegistry { inner })), "out")
    })
}

/// # Safety
/// `registry` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn xpmo_registry_free(registry: *mut XpmoRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Domain count, descriptor dimension and novelty threshold.
///
/// # Safety
/// `registry` must come from this library; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn xpmo_registry_info(
    registry: *const XpmoRegistry,
    domains: *mut usize,
    dim: *mut usize,
    tau: *mut f64,
) -> XpmoStatus {
    guard(|| {
        let r = &as_ref(registry, "registry")?.inner;
        if !domains.is_null() {
            domains.write(r.len());
        }
        if !dim.is_null() {
            dim.write(r.dim);
        }
        if !tau.is_null() {
            tau.write(r.tau);
        }
        Ok(())
    })
}

/// Batch decision for `batch` descriptors of length `dim`, row-major.
/// The registry is not modified.
///
/// # Safety
/// `descriptors` holds `batch·dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_registry_assign(
    registry: *const XpmoRegistry,
    descriptors: *const f64,
    batch: usize,
    dim: usize,
    out: *mut XpmoAssignment,
) -> XpmoStatus {
    guard(|| {
        let r = &as_ref(registry, "registry")?.inner;
        if descriptors.is_null() {
            return Err(fail(XpmoStatus::NullPointer, "descriptors is null"));
        }
        if batch == 0 || dim == 0 {
            return Err(fail(XpmoStatus::InvalidArgument, "batch and dim must be positive"));
        }
        let total = batch
            .checked_mul(dim)
            .ok_or_else(|| fail(XpmoStatus::InvalidArgument, "descriptor buffer size overflows"))?;
        let rows: Vec<Vec<f64>> = std::slice::from_raw_parts(descriptors, total)
            .chunks_exact(dim)
            .map(<[f64]>::to_vec)
            .collect();
        let a = r.assign_batch(&rows)?;
        let min_distance = a.distances.iter().copied().fold(f64::INFINITY, f64::min);
        put(
            out,
            XpmoAssignment {
                domain: a.domain,
                is_new: a.is_new,
                min_distance,
            },
            "out",
        )
    })
}

/// Starts an adaptation session from a warmed-up checkpoint. `config_toml`
/// is an experiment config (null for defaults); its `adapt` and `spectral`
/// sections apply. The model handle stays valid and unchanged.
///
/// # Safety
/// `model` must come from this library; `config_toml` is null or
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_adapter_new(
    model: *const XpmoModel,
    config_toml: *const c_char,
    out: *mut *mut XpmoAdapter,
) -> XpmoStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let text = if config_toml.is_null() {
            ""
        } else {
            CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| fail(XpmoStatus::InvalidArgument, "config is not UTF-8"))?
        };
        let cfg = ExperimentConfig::from_toml_str(text, &[])?;
        let registry = m
            .registry
            .clone()
            .ok_or_else(|| fail(XpmoStatus::Checkpoint, "checkpoint has no registry; run warm-up first"))?;
        let inner = Adapter::new(m.model.clone(), registry, cfg.adapt, cfg.spectral)?;
        put(out, Box::into_raw(Box::new(XpmoAdapter { inner })), "out")
    })
}

/// One adaptation step on an unlabeled batch. `labels_out` may be null;
/// otherwise it receives `n` predictions.
///
/// # Safety
/// `pixels` holds `n` images; `report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_adapter_step(
    adapter: *mut XpmoAdapter,
    pixels: *const f64,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    report: *mut XpmoStepReport,
    labels_out: *mut usize,
) -> XpmoStatus {
    guard(|| {
        let a = as_mut(adapter, "adapter")?;
        if report.is_null() {
            return Err(fail(XpmoStatus::NullPointer, "report is null"));
        }
        let images = images_arg(pixels, n, height, width, channels)?;
        let r = a.inner.ctta_step(&images)?;
        if !labels_out.is_null() {
            ptr::copy_nonoverlapping(r.predictions.as_ptr(), labels_out, r.predictions.len());
        }
        report.write(XpmoStepReport {
            domain_id: r.domain_id,
            sodd_domain: r.sodd_domain,
            is_new: r.is_new,
            pass_count: r.pass_count,
            loss: r.loss,
            updated: r.updated,
        });
        Ok(())
    })
}

/// Snapshot of the session's model and registry as a new model handle.
///
/// # Safety
/// `adapter` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpmo_adapter_model(adapter: *const XpmoAdapter, out: *mut *mut XpmoModel) -> XpmoStatus {
    guard(|| {
        let a = &as_ref(adapter, "adapter")?.inner;
        let m = XpmoModel {
            model: a.model.clone(),
            registry: Some(a.registry.clone()),
        };
        put(out, Box::into_raw(Box::new(m)), "out")
    })
}

/// # Safety
/// `adapter` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn xpmo_adapter_free(adapter: *mut XpmoAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}
