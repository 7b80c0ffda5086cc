//! C ABI over `qlwa`.
//!
//! Objects cross the boundary as opaque handles created by `qlwa_*_new`,
//! `_load` or `_generate` calls and released with the matching `_free`.
//! Every fallible call returns a [`QlwaStatus`]; on failure the message is
//! available from [`qlwa_last_error_message`] on the same thread. Strings
//! returned through `char **` out-parameters are owned by the caller and
//! must be released with [`qlwa_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use qlwa::analysis::{self, SensitivityReport, SweepOptions};
use qlwa::data::{self, Arch, Dataset, Labels, Metric};
use qlwa::graph::{fold_batch_norms, load_model, save_model};
use qlwa::quant::{self, CalibrationRecord, QuantParams, WeightClip};
use qlwa::{Error, NetworkGraph, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QlwaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Graph = 5,
    Quant = 6,
    Data = 7,
    Analysis = 8,
    Panic = 9,
}

pub struct QlwaGraph {
    inner: NetworkGraph,
}

pub struct QlwaDataset {
    inner: Dataset,
}

pub struct QlwaCalibration {
    inner: CalibrationRecord,
}

pub struct QlwaReport {
    inner: SensitivityReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(QlwaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => QlwaStatus::Io,
            Error::Json { .. } | Error::TensorFormat { .. } | Error::Csv { .. } => QlwaStatus::Parse,
            Error::ShapeMismatch { .. }
            | Error::InvalidTensor(_)
            | Error::UnknownKind { .. }
            | Error::MissingParameter { .. }
            | Error::DagViolation { .. }
            | Error::DanglingInput { .. }
            | Error::DuplicateLayer(_)
            | Error::InvalidLayer { .. }
            | Error::LayerShape { .. }
            | Error::InvalidGraph(_)
            | Error::NonPositiveVariance { .. }
            | Error::UnknownLayer(_)
            | Error::Weightless(_) => QlwaStatus::Graph,
            Error::MissingCalibration(_) | Error::Config(_) | Error::Equalize(_) => QlwaStatus::Quant,
            Error::Dataset(_) | Error::UnknownArch(_) => QlwaStatus::Data,
            Error::Report(_) => QlwaStatus::Analysis,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(QlwaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QlwaStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QlwaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("panic: {msg}"));
            QlwaStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(QlwaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(QlwaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(QlwaStatus::NullPointer, format!("{what} is null")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains NUL"))
}

fn metric_of(ds: &Dataset) -> Metric {
    match ds.labels() {
        Labels::Classes(_) => Metric::Top1Accuracy,
        Labels::Targets(_) => Metric::NegL2,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next `qlwa_*` call on the same thread.
#[no_mangle]
pub extern "C" fn qlwa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qlwa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a synthetic fixture (`mlp_small`, `conv_small`, `resnet_tiny`,
/// `outlier_resnet_tiny`; dashes are accepted).
#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_gen_fixture(arch: *const c_char, seed: u64, out_graph: *mut *mut QlwaGraph) -> QlwaStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let arch: Arch = cstr(arch, "arch")?.parse()?;
        let inner = data::gen_fixture(arch, seed)?;
        *slot = Box::into_raw(Box::new(QlwaGraph { inner }));
        Ok(())
    })
}

/// Loads `model.json` (or the directory holding it).
#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_load(path: *const c_char, out_graph: *mut *mut QlwaGraph) -> QlwaStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let inner = load_model(&PathBuf::from(cstr(path, "path")?))?;
        *slot = Box::into_raw(Box::new(QlwaGraph { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_save(graph: *const QlwaGraph, path: *const c_char) -> QlwaStatus {
    guard(|| {
        let g = obj(graph, "graph")?;
        save_model(&g.inner, &PathBuf::from(cstr(path, "path")?))?;
        Ok(())
    })
}

/// New graph with every batch norm folded into its conv/dense.
#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_fold(graph: *const QlwaGraph, out_graph: *mut *mut QlwaGraph) -> QlwaStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let inner = fold_batch_norms(&obj(graph, "graph")?.inner)?;
        *slot = Box::into_raw(Box::new(QlwaGraph { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_compute_layer_count(graph: *const QlwaGraph, out_count: *mut usize) -> QlwaStatus {
    guard(|| {
        *out(out_count, "out_count")? = obj(graph, "graph")?.inner.compute_layers().len();
        Ok(())
    })
}

/// 16-hex-digit content fingerprint.
#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_fingerprint(graph: *const QlwaGraph, out_str: *mut *mut c_char) -> QlwaStatus {
    guard(|| {
        let slot = out(out_str, "out_str")?;
        *slot = to_c_string(obj(graph, "graph")?.inner.fingerprint())?;
        Ok(())
    })
}

/// Full-precision forward pass of one sample. `input_len` must equal the
/// element count of the graph's input; `output` receives up to
/// `output_cap` values and `out_len` the full output length.
#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_forward(
    graph: *const QlwaGraph,
    input: *const f32,
    input_len: usize,
    output: *mut f32,
    output_cap: usize,
    out_len: *mut usize,
) -> QlwaStatus {
    guard(|| {
        let g = &obj(graph, "graph")?.inner;
        if input.is_null() {
            return Err(Failure(QlwaStatus::NullPointer, "input is null".into()));
        }
        let len_slot = out(out_len, "out_len")?;
        let x = Tensor::new(g.input_shape().to_vec(), std::slice::from_raw_parts(input, input_len).to_vec())?;
        let y = g.forward(&x)?;
        *len_slot = y.len();
        if output_cap < y.len() {
            return Err(invalid(format!("output buffer holds {output_cap} values, need {}", y.len())));
        }
        if output.is_null() {
            return Err(Failure(QlwaStatus::NullPointer, "output is null".into()));
        }
        std::slice::from_raw_parts_mut(output, y.len()).copy_from_slice(y.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_graph_free(graph: *mut QlwaGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Uniform samples labelled by the graph's own argmax.
#[no_mangle]
pub unsafe extern "C" fn qlwa_dataset_generate(
    graph: *const QlwaGraph,
    n: usize,
    seed: u64,
    out_dataset: *mut *mut QlwaDataset,
) -> QlwaStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let inner = data::gen_dataset(&obj(graph, "graph")?.inner, n, seed)?;
        *slot = Box::into_raw(Box::new(QlwaDataset { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_dataset_load(dir: *const c_char, out_dataset: *mut *mut QlwaDataset) -> QlwaStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let inner = data::load_dataset(&PathBuf::from(cstr(dir, "dir")?))?;
        *slot = Box::into_raw(Box::new(QlwaDataset { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_dataset_save(dataset: *const QlwaDataset, dir: *const c_char) -> QlwaStatus {
    guard(|| {
        let d = obj(dataset, "dataset")?;
        data::save_dataset(&d.inner, &PathBuf::from(cstr(dir, "dir")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_dataset_len(dataset: *const QlwaDataset, out_len: *mut usize) -> QlwaStatus {
    guard(|| {
        *out(out_len, "out_len")? = obj(dataset, "dataset")?.inner.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_dataset_free(dataset: *mut QlwaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Activation ranges over the first `n_samples` samples.
#[no_mangle]
pub unsafe extern "C" fn qlwa_calibrate(
    graph: *const QlwaGraph,
    dataset: *const QlwaDataset,
    n_samples: usize,
    out_calib: *mut *mut QlwaCalibration,
) -> QlwaStatus {
    guard(|| {
        let slot = out(out_calib, "out_calib")?;
        let inner = quant::calibrate(&obj(graph, "graph")?.inner, &obj(dataset, "dataset")?.inner, n_samples)?;
        *slot = Box::into_raw(Box::new(QlwaCalibration { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_calibration_free(calib: *mut QlwaCalibration) {
    if !calib.is_null() {
        drop(Box::from_raw(calib));
    }
}

/// Per-layer sensitivity at each of `weight_bits[0..n_bits]`, min/max
/// weight ranges, per-tensor granularity. The graph must be folded.
#[no_mangle]
pub unsafe extern "C" fn qlwa_sweep(
    graph: *const QlwaGraph,
    dataset: *const QlwaDataset,
    calib: *const QlwaCalibration,
    weight_bits: *const u32,
    n_bits: usize,
    act_bits: u32,
    out_report: *mut *mut QlwaReport,
) -> QlwaStatus {
    guard(|| {
        let slot = out(out_report, "out_report")?;
        if weight_bits.is_null() {
            return Err(Failure(QlwaStatus::NullPointer, "weight_bits is null".into()));
        }
        let bits = std::slice::from_raw_parts(weight_bits, n_bits);
        let ds = &obj(dataset, "dataset")?.inner;
        let opts = SweepOptions { act_bits, ..SweepOptions::default() };
        let inner = analysis::sweep(&obj(graph, "graph")?.inner, bits, &obj(calib, "calib")?.inner, ds, metric_of(ds), opts)?;
        *slot = Box::into_raw(Box::new(QlwaReport { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_report_to_json(report: *const QlwaReport, out_json: *mut *mut c_char) -> QlwaStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        *slot = to_c_string(obj(report, "report")?.inner.to_json())?;
        Ok(())
    })
}

/// Degradation of one layer at one bit-width from a sweep.
#[no_mangle]
pub unsafe extern "C" fn qlwa_report_degradation(
    report: *const QlwaReport,
    layer_id: *const c_char,
    weight_bits: u32,
    out_degradation: *mut f64,
) -> QlwaStatus {
    guard(|| {
        let slot = out(out_degradation, "out_degradation")?;
        let id = cstr(layer_id, "layer_id")?;
        let e = obj(report, "report")?
            .inner
            .entry(id, weight_bits)
            .ok_or_else(|| Failure(QlwaStatus::Analysis, format!("no entry for `{id}` at {weight_bits} bits")))?;
        *slot = e.degradation;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlwa_report_free(report: *mut QlwaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Naive / global / local clipping comparison as JSON. `method` is
/// `minmax` or `mse_grid`.
#[no_mangle]
pub unsafe extern "C" fn qlwa_compare_fixes(
    graph: *const QlwaGraph,
    dataset: *const QlwaDataset,
    calib: *const QlwaCalibration,
    target_layer: *const c_char,
    weight_bits: u32,
    act_bits: u32,
    method: *const c_char,
    out_json: *mut *mut c_char,
) -> QlwaStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let method: WeightClip = cstr(method, "method")?.parse()?;
        let ds = &obj(dataset, "dataset")?.inner;
        let r = analysis::compare_fixes(
            &obj(graph, "graph")?.inner,
            cstr(target_layer, "target_layer")?,
            &obj(calib, "calib")?.inner,
            ds,
            metric_of(ds),
            weight_bits,
            act_bits,
            method,
        )?;
        *slot = to_c_string(r.to_json())?;
        Ok(())
    })
}

/// Weight outlier summary of one layer as JSON.
#[no_mangle]
pub unsafe extern "C" fn qlwa_diagnose(
    graph: *const QlwaGraph,
    layer_id: *const c_char,
    k_sigma: f64,
    out_json: *mut *mut c_char,
) -> QlwaStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let s = analysis::diagnose_outliers(&obj(graph, "graph")?.inner, cstr(layer_id, "layer_id")?, k_sigma)?;
        let json = serde_json::to_string_pretty(&s).map_err(|e| Failure(QlwaStatus::Analysis, e.to_string()))?;
        *slot = to_c_string(json)?;
        Ok(())
    })
}

/// Fake-quantizes `data[0..len]` with the per-tensor min/max range,
/// writing into `out` (may alias `data`).
#[no_mangle]
pub unsafe extern "C" fn qlwa_quantize_dequantize(data: *const f32, len: usize, bits: u32, out_values: *mut f32) -> QlwaStatus {
    guard(|| {
        if data.is_null() || out_values.is_null() {
            return Err(Failure(QlwaStatus::NullPointer, "data or out is null".into()));
        }
        if len == 0 {
            return Err(invalid("empty input"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let t = Tensor::new(vec![len], values)?;
        let (lo, hi) = quant::weight_range_minmax(&t);
        let qp = QuantParams::from_range(lo, hi, bits)?;
        let q = quant::quantize_dequantize(&t, &qp);
        std::slice::from_raw_parts_mut(out_values, len).copy_from_slice(q.data());
        Ok(())
    })
}
