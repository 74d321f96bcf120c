//! C ABI for neuromed.
//!
//! Objects cross the boundary as opaque handles created by `*_generate`, `*_load`
//! or `*_convert` and released by the matching `*_free`. Every fallible call
//! returns an [`NmStatus`]; on failure [`nm_last_error`] yields a message that
//! stays valid on the calling thread until its next failing call. Panics are
//! caught and reported as [`NmStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use neuromed::data::{gen_synthetic, load_dataset, save_dataset, LabeledImageSet, SynthConfig};
use neuromed::model::{load_model, save_model, ModelGraph};
use neuromed::snn::{self, load_snn, save_snn, ConvertOptions, Encoding, OutputShift, SimConfig, SpikingNetwork};
use neuromed::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Contract = 4,
    Numeric = 5,
    Unconvertible = 6,
    DegenerateScale = 7,
    Format = 8,
    Io = 9,
    Internal = 10,
}

/// Spike encoding of input pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmEncoding {
    /// Use the encoding stored in the network.
    Default = 0,
    ConstantCurrent = 1,
    Poisson = 2,
}

/// Labeled image set.
pub struct NmDataset(LabeledImageSet);

/// Trained feed-forward model.
pub struct NmModel(ModelGraph);

/// Converted spiking network.
pub struct NmSnn(SpikingNetwork);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> NmStatus {
    match e {
        Error::Dimension(_) => NmStatus::Dimension,
        Error::Contract(_) => NmStatus::Contract,
        Error::Numeric { .. } => NmStatus::Numeric,
        Error::Unconvertible(_) => NmStatus::Unconvertible,
        Error::DegenerateScale { .. } => NmStatus::DegenerateScale,
        Error::BadMagic { .. } | Error::Version(_) | Error::Checksum | Error::Format(_) => NmStatus::Format,
        Error::Io(_) => NmStatus::Io,
    }
}

struct Fail(NmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            NmStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(NmStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn store<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or an empty string.
#[no_mangle]
pub extern "C" fn nm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Synthetic dataset with the default class priors.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn nm_dataset_generate(n: usize, patients: usize, size: usize, noise: f64, seed: u64, out: *mut *mut NmDataset) -> NmStatus {
    guard(|| {
        let cfg = SynthConfig { n, patients, size, noise, ..SynthConfig::default() };
        emit(out, NmDataset(gen_synthetic(&cfg, seed)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nm_dataset_load(path: *const c_char, out: *mut *mut NmDataset) -> NmStatus {
    guard(|| emit(out, NmDataset(load_dataset(path_arg(path)?)?)))
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nm_dataset_save(ds: *const NmDataset, path: *const c_char) -> NmStatus {
    guard(|| Ok(save_dataset(&handle(ds, "dataset")?.0, path_arg(path)?)?))
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nm_dataset_len(ds: *const NmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Copies the labels into `labels[0..capacity]`; fails if `capacity` is short.
///
/// # Safety
/// `labels` must point to `capacity` writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn nm_dataset_labels(ds: *const NmDataset, labels: *mut u32, capacity: usize) -> NmStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.0;
        write_labels(d.labels().iter().copied(), d.len(), labels, capacity)
    })
}

unsafe fn write_labels(values: impl Iterator<Item = usize>, n: usize, out: *mut u32, capacity: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("label buffer"));
    }
    if capacity < n {
        return Err(Fail(NmStatus::InvalidArgument, format!("label buffer holds {capacity}, need {n}")));
    }
    let buf = std::slice::from_raw_parts_mut(out, n);
    for (slot, v) in buf.iter_mut().zip(values) {
        *slot = v as u32;
    }
    Ok(())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nm_dataset_free(ds: *mut NmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nm_model_load(path: *const c_char, out: *mut *mut NmModel) -> NmStatus {
    guard(|| emit(out, NmModel(load_model(path_arg(path)?)?)))
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nm_model_save(model: *const NmModel, path: *const c_char) -> NmStatus {
    guard(|| Ok(save_model(&handle(model, "model")?.0, path_arg(path)?)?))
}

/// Predicted class per sample of `ds`.
///
/// # Safety
/// Handles must be live; `labels` must point to `capacity` writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn nm_model_predict(model: *const NmModel, ds: *const NmDataset, labels: *mut u32, capacity: usize) -> NmStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let d = &handle(ds, "dataset")?.0;
        let preds = m.predict(d.images())?;
        write_labels(preds.into_iter(), d.len(), labels, capacity)
    })
}

/// # Safety
/// Handles must be live; `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nm_model_accuracy(model: *const NmModel, ds: *const NmDataset, accuracy: *mut f64) -> NmStatus {
    guard(|| {
        let acc = neuromed::model::train::accuracy(&handle(model, "model")?.0, &handle(ds, "dataset")?.0)?;
        store(accuracy, acc)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nm_model_free(model: *mut NmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Converts `model` to a spiking network, normalizing by the given percentile
/// of positive activations on `calib`. Skips the calibration-set simulation.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nm_snn_convert(model: *const NmModel, calib: *const NmDataset, percentile: f64, out: *mut *mut NmSnn) -> NmStatus {
    guard(|| {
        let opts = ConvertOptions { percentile, eval_timesteps: None, output_shift: OutputShift::Auto };
        let (net, _) = snn::normalize_and_convert_with(&handle(model, "model")?.0, &handle(calib, "calibration set")?.0, &opts)?;
        emit(out, NmSnn(net))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nm_snn_load(path: *const c_char, out: *mut *mut NmSnn) -> NmStatus {
    guard(|| emit(out, NmSnn(load_snn(path_arg(path)?)?)))
}

/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nm_snn_save(net: *const NmSnn, path: *const c_char) -> NmStatus {
    guard(|| Ok(save_snn(&handle(net, "network")?.0, path_arg(path)?)?))
}

/// Accuracy of the spiking network on `ds` after `timesteps` steps.
///
/// # Safety
/// Handles must be live; `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nm_snn_accuracy(
    net: *const NmSnn,
    ds: *const NmDataset,
    timesteps: usize,
    encoding: NmEncoding,
    seed: u64,
    accuracy: *mut f64,
) -> NmStatus {
    guard(|| {
        let n = &handle(net, "network")?.0;
        let encoder = match encoding {
            NmEncoding::Default => n.encoding(),
            NmEncoding::ConstantCurrent => Encoding::ConstantCurrent,
            NmEncoding::Poisson => Encoding::Poisson,
        };
        let cfg = SimConfig { timesteps, encoder, max_rate_scale: 1.0, seed };
        store(accuracy, snn::sim::accuracy(n, &handle(ds, "dataset")?.0, &cfg)?)
    })
}

/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nm_snn_free(net: *mut NmSnn) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

