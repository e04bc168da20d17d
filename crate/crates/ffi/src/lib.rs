//! C ABI over `sei_al`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`SeiStatus`]; on failure the message is available from
//! [`sei_last_error`] until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use num_complex::Complex64;
use sei_al::harness::{self, ExperimentConfig};
use sei_al::model::{load_checkpoint, save_checkpoint, NetworkParams};
use sei_al::numerics::Tensor;
use sei_al::selection::{bald_from_passes, kcenter_greedy};
use sei_al::signal::{generate_records, load_iq_file, save_iq_file, ChannelConfig, IqRecord, SimulationConfig};
use sei_al::training::{embed_records, predict_classes};
use sei_al::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Config = 10,
    Shape = 11,
    Numeric = 12,
    Selection = 13,
    Parse = 14,
    Checkpoint = 15,
    Report = 16,
    Io = 17,
    Panic = 99,
}

impl From<&Error> for SeiStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => SeiStatus::Config,
            Error::Shape { .. } => SeiStatus::Shape,
            Error::NonFiniteGradient { .. } | Error::Numeric(_) => SeiStatus::Numeric,
            Error::Selection(_) => SeiStatus::Selection,
            Error::Parse { .. } => SeiStatus::Parse,
            Error::Checkpoint(_) => SeiStatus::Checkpoint,
            Error::Report(_) => SeiStatus::Report,
            Error::Io { .. } => SeiStatus::Io,
        }
    }
}

/// Experiment configuration handle.
pub struct SeiConfig {
    inner: ExperimentConfig,
}

/// A list of I/Q records plus their sample rate.
pub struct SeiDataset {
    records: Vec<IqRecord>,
    sample_rate: f64,
}

/// Network parameters (query and key branches, heads, classifier).
pub struct SeiModel {
    params: NetworkParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(SeiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SeiStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: SeiStatus, message: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, message.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SeiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeiStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside sei_al".to_string());
            SeiStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(SeiStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(SeiStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .map_or_else(|| fail(SeiStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .map_or_else(|| fail(SeiStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(SeiStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len < needed {
        return fail(
            SeiStatus::BufferTooSmall,
            format!("{what} holds {len} elements, {needed} needed"),
        );
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(SeiStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the most recent failure on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sei_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sei_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration holding the library defaults.
#[no_mangle]
pub extern "C" fn sei_config_new() -> *mut SeiConfig {
    into_handle(SeiConfig {
        inner: ExperimentConfig::default(),
    })
}

/// Parses a `key = value` configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sei_config_load(path: *const c_char, out: *mut *mut SeiConfig) -> SeiStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = ExperimentConfig::load(path)?;
        *out = into_handle(SeiConfig { inner });
        Ok(())
    })
}

/// Sets one configuration key from its textual value.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sei_config_set(config: *mut SeiConfig, key: *const c_char, value: *const c_char) -> SeiStatus {
    guard(|| {
        let config = out_arg(config, "config")?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        config.inner.set(key, value)?;
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sei_config_free(config: *mut SeiConfig) {
    free_handle(config);
}

/// Simulates the dataset described by `config` (emitters, records, length, SNR).
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_simulate(config: *const SeiConfig, seed: u64, out: *mut *mut SeiDataset) -> SeiStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.inner;
        let out = out_arg(out, "out")?;
        let channel = if cfg.multipath {
            let mut rng = sei_al::rng::stream_rng(seed, sei_al::rng::stream::SIMULATION, 1);
            ChannelConfig::random_multipath(cfg.snr_db, &mut rng)
        } else {
            ChannelConfig::flat(cfg.snr_db)
        };
        let sim = SimulationConfig::new(cfg.num_emitters, cfg.per_emitter, cfg.length, channel);
        let (records, _) = generate_records(&sim, seed)?;
        *out = into_handle(SeiDataset {
            records,
            sample_rate: sim.sample_rate,
        });
        Ok(())
    })
}

/// Builds a dataset from interleaved I/Q samples.
///
/// `iq` holds `count * length * 2` values, record-major, I before Q.
/// `labels` is null or holds `count` entries; a negative label means unlabeled.
///
/// # Safety
/// Buffers must hold the stated number of elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_from_iq(
    iq: *const f64,
    count: usize,
    length: usize,
    labels: *const i32,
    sample_rate: f64,
    out: *mut *mut SeiDataset,
) -> SeiStatus {
    guard(|| {
        if length == 0 {
            return fail(SeiStatus::InvalidArgument, "record length must be positive");
        }
        let total = count
            .checked_mul(length)
            .and_then(|n| n.checked_mul(2))
            .map_or_else(|| fail(SeiStatus::InvalidArgument, "sample count overflows"), Ok)?;
        let iq = slice_arg(iq, total, "iq")?;
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice_arg(labels, count, "labels")?)
        };
        let out = out_arg(out, "out")?;
        let records = iq
            .chunks_exact(length * 2)
            .enumerate()
            .map(|(i, chunk)| {
                let samples = chunk.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
                let truth = labels.and_then(|l| usize::try_from(l[i]).ok());
                IqRecord::new(samples, truth)
            })
            .collect();
        *out = into_handle(SeiDataset { records, sample_rate });
        Ok(())
    })
}

/// Reads an I/Q dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_load(path: *const c_char, out: *mut *mut SeiDataset) -> SeiStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let file = load_iq_file(path)?;
        *out = into_handle(SeiDataset {
            records: file.records,
            sample_rate: file.sample_rate,
        });
        Ok(())
    })
}

/// Writes a dataset in the I/Q file format.
///
/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_save(dataset: *const SeiDataset, path: *const c_char) -> SeiStatus {
    guard(|| {
        let ds = ref_arg(dataset, "dataset")?;
        let path = str_arg(path, "path")?;
        save_iq_file(path, &ds.records, ds.sample_rate)?;
        Ok(())
    })
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_len(dataset: *const SeiDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.records.len())
}

/// Samples per record (length of the first record), or 0 if empty.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_record_length(dataset: *const SeiDataset) -> usize {
    dataset.as_ref().and_then(|d| d.records.first()).map_or(0, IqRecord::len)
}

/// Copies record `index` as interleaved I/Q into `out` (capacity `cap` values).
///
/// # Safety
/// `dataset` must be a live handle and `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_samples(dataset: *const SeiDataset, index: usize, out: *mut f64, cap: usize) -> SeiStatus {
    guard(|| {
        let ds = ref_arg(dataset, "dataset")?;
        let Some(record) = ds.records.get(index) else {
            return fail(SeiStatus::InvalidArgument, format!("record {index} out of range"));
        };
        let out = out_slice(out, cap, record.len() * 2, "out")?;
        for (pair, s) in out.chunks_exact_mut(2).zip(&record.samples) {
            pair[0] = s.re;
            pair[1] = s.im;
        }
        Ok(())
    })
}

/// Ground-truth emitter of record `index`, or -1 if unknown or out of range.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_truth(dataset: *const SeiDataset, index: usize) -> i64 {
    dataset
        .as_ref()
        .and_then(|d| d.records.get(index))
        .and_then(|r| r.emitter_truth)
        .map_or(-1, |t| t as i64)
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sei_dataset_free(dataset: *mut SeiDataset) {
    free_handle(dataset);
}

/// Creates a freshly initialised model for `num_classes` emitters and
/// records of `length` samples, using the channel plan in `config`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sei_model_new(
    config: *const SeiConfig,
    num_classes: usize,
    length: usize,
    seed: u64,
    out: *mut *mut SeiModel,
) -> SeiStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.inner;
        let out = out_arg(out, "out")?;
        let mut rng = sei_al::rng::stream_rng(seed, sei_al::rng::stream::INIT, 0);
        let params = NetworkParams::new(cfg.model_config(num_classes, length), &mut rng)?;
        *out = into_handle(SeiModel { params });
        Ok(())
    })
}

/// Loads a checkpoint; any architecture is accepted.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sei_model_load(path: *const c_char, out: *mut *mut SeiModel) -> SeiStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let (params, _) = load_checkpoint(path, None)?;
        *out = into_handle(SeiModel { params });
        Ok(())
    })
}

/// Writes a checkpoint tagged with `seed` and a free-form `stage` name.
///
/// # Safety
/// `model` must be a live handle; `path` and `stage` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sei_model_save(model: *const SeiModel, path: *const c_char, seed: u64, stage: *const c_char) -> SeiStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        let stage = str_arg(stage, "stage")?;
        save_checkpoint(path, &model.params, seed, stage)?;
        Ok(())
    })
}

/// Embedding width (rows written per record by [`sei_model_embed`]).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sei_model_embed_dim(model: *const SeiModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.embed_dim)
}

/// Number of emitter classes the classifier predicts.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sei_model_num_classes(model: *const SeiModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.num_classes)
}

/// Writes eval-mode projection embeddings, `len(dataset) * embed_dim` values.
///
/// # Safety
/// Handles must be live and `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn sei_model_embed(model: *const SeiModel, dataset: *const SeiDataset, out: *mut f64, cap: usize) -> SeiStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let ds = ref_arg(dataset, "dataset")?;
        let refs: Vec<&IqRecord> = ds.records.iter().collect();
        let needed = refs.len() * model.params.config.embed_dim;
        let out = out_slice(out, cap, needed, "out")?;
        if refs.is_empty() {
            return Ok(());
        }
        let z = embed_records(&model.params, &refs)?;
        out.copy_from_slice(z.data());
        Ok(())
    })
}

/// Writes the predicted class of every record into `out` (capacity `cap`).
///
/// # Safety
/// Handles must be live and `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn sei_model_predict(model: *const SeiModel, dataset: *const SeiDataset, out: *mut usize, cap: usize) -> SeiStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let ds = ref_arg(dataset, "dataset")?;
        let refs: Vec<&IqRecord> = ds.records.iter().collect();
        let out = out_slice(out, cap, refs.len(), "out")?;
        if refs.is_empty() {
            return Ok(());
        }
        out.copy_from_slice(&predict_classes(&model.params, &refs)?);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sei_model_free(model: *mut SeiModel) {
    free_handle(model);
}

/// K-center greedy over row-major embeddings.
///
/// Picks `k` of the `num_candidates` rows, farthest first in cosine distance
/// from the `num_centers` labeled rows, writing candidate indices to `out`.
///
/// # Safety
/// Buffers must hold the stated element counts; `out` must hold `k` values.
#[no_mangle]
pub unsafe extern "C" fn sei_select_kcenter(
    candidates: *const f64,
    num_candidates: usize,
    centers: *const f64,
    num_centers: usize,
    dim: usize,
    k: usize,
    out: *mut usize,
) -> SeiStatus {
    guard(|| {
        let cand = slice_arg(candidates, num_candidates * dim, "candidates")?;
        let cent = slice_arg(centers, num_centers * dim, "centers")?;
        let out = out_slice(out, k, k, "out")?;
        let cand = Tensor::new(vec![num_candidates, dim], cand.to_vec())?;
        let cent = Tensor::new(vec![num_centers, dim], cent.to_vec())?;
        let picked = kcenter_greedy(&cand, &cent, k)?;
        out.copy_from_slice(&picked.indices);
        Ok(())
    })
}

/// BALD mutual information per record from `passes` stacked softmax outputs.
///
/// `probs` is `passes * count * num_classes` values, pass-major; `out` receives
/// `count` scores.
///
/// # Safety
/// `probs` must hold the stated element count and `out` must hold `count` values.
#[no_mangle]
pub unsafe extern "C" fn sei_bald_scores(
    probs: *const f64,
    passes: usize,
    count: usize,
    num_classes: usize,
    out: *mut f64,
) -> SeiStatus {
    guard(|| {
        let per_pass = count * num_classes;
        let probs = slice_arg(probs, passes * per_pass, "probs")?;
        let out = out_slice(out, count, count, "out")?;
        let tensors = if per_pass == 0 {
            Vec::new()
        } else {
            probs
                .chunks_exact(per_pass)
                .map(|p| Tensor::new(vec![count, num_classes], p.to_vec()))
                .collect::<Result<Vec<_>, _>>()?
        };
        out.copy_from_slice(&bald_from_passes(&tensors)?);
        Ok(())
    })
}

/// Runs a full experiment and writes the per-round test accuracy.
///
/// `accuracy` must hold `rounds + 1` values; `written` receives the number of
/// rounds actually reported (fewer if the pool ran out). The run directory is
/// written only if `out_dir` is set in the configuration.
///
/// # Safety
/// `config` must be a live handle; `accuracy` must hold `cap` doubles and
/// `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sei_run_experiment(config: *const SeiConfig, accuracy: *mut f64, cap: usize, written: *mut usize) -> SeiStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.inner;
        let written = out_arg(written, "written")?;
        let out = out_slice(accuracy, cap, cfg.rounds + 1, "accuracy")?;
        let outcome = if cfg.baseline {
            harness::run_baseline_cnn(cfg)?
        } else {
            harness::run_experiment(cfg)?
        };
        for (slot, report) in out.iter_mut().zip(&outcome.reports) {
            *slot = report.test_accuracy;
        }
        *written = outcome.reports.len();
        Ok(())
    })
}

/// Aggregates run directories below `dir` and writes `curves.csv` there.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sei_report(dir: *const c_char) -> SeiStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        harness::report(&dir)?;
        Ok(())
    })
}
