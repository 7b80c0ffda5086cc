use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use qlwa_ffi::*;

fn last_error() -> String {
    let p = qlwa_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { qlwa_string_free(p) };
    s
}

fn fixture(arch: &str) -> *mut QlwaGraph {
    let name = CString::new(arch).unwrap();
    let mut raw = ptr::null_mut();
    assert_eq!(unsafe { qlwa_graph_gen_fixture(name.as_ptr(), 7, &mut raw) }, QlwaStatus::Ok);
    let mut folded = ptr::null_mut();
    assert_eq!(unsafe { qlwa_graph_fold(raw, &mut folded) }, QlwaStatus::Ok);
    unsafe { qlwa_graph_free(raw) };
    folded
}

#[test]
fn sweep_round_trip() {
    let g = fixture("conv_small");
    let mut count = 0usize;
    assert_eq!(unsafe { qlwa_graph_compute_layer_count(g, &mut count) }, QlwaStatus::Ok);
    assert_eq!(count, 5);

    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { qlwa_dataset_generate(g, 32, 7, &mut ds) }, QlwaStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { qlwa_dataset_len(ds, &mut n) }, QlwaStatus::Ok);
    assert_eq!(n, 32);

    let mut calib = ptr::null_mut();
    assert_eq!(unsafe { qlwa_calibrate(g, ds, 16, &mut calib) }, QlwaStatus::Ok);

    let bits = [4u32, 8];
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { qlwa_sweep(g, ds, calib, bits.as_ptr(), bits.len(), 16, &mut report) }, QlwaStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { qlwa_report_to_json(report, &mut json) }, QlwaStatus::Ok);
    let text = take_string(json);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 10);
    assert_eq!(v["fp_score"], 1.0);

    let id = CString::new("conv1").unwrap();
    let mut d = f64::NAN;
    assert_eq!(unsafe { qlwa_report_degradation(report, id.as_ptr(), 4, &mut d) }, QlwaStatus::Ok);
    assert!(d.is_finite());
    assert_eq!(unsafe { qlwa_report_degradation(report, id.as_ptr(), 5, &mut d) }, QlwaStatus::Analysis);

    let method = CString::new("minmax").unwrap();
    let mut fix = ptr::null_mut();
    let st = unsafe { qlwa_compare_fixes(g, ds, calib, id.as_ptr(), 8, 8, method.as_ptr(), &mut fix) };
    assert_eq!(st, QlwaStatus::Ok);
    let fix: serde_json::Value = serde_json::from_str(&take_string(fix)).unwrap();
    assert_eq!(fix["naive"], fix["local_clip"]);

    unsafe {
        qlwa_report_free(report);
        qlwa_calibration_free(calib);
        qlwa_dataset_free(ds);
        qlwa_graph_free(g);
    }
}

#[test]
fn forward_and_quantize() {
    let g = fixture("mlp_small");
    let input = [0.25f32; 16];
    let mut out = [0f32; 10];
    let mut len = 0usize;
    let st = unsafe { qlwa_graph_forward(g, input.as_ptr(), input.len(), out.as_mut_ptr(), out.len(), &mut len) };
    assert_eq!(st, QlwaStatus::Ok);
    assert_eq!(len, 10);
    assert!(out.iter().all(|v| v.is_finite()));

    let mut small = [0f32; 4];
    let st = unsafe { qlwa_graph_forward(g, input.as_ptr(), input.len(), small.as_mut_ptr(), small.len(), &mut len) };
    assert_eq!(st, QlwaStatus::InvalidArgument);
    assert_eq!(len, 10);

    let st = unsafe { qlwa_graph_forward(g, input.as_ptr(), 3, out.as_mut_ptr(), out.len(), &mut len) };
    assert_eq!(st, QlwaStatus::Graph);
    unsafe { qlwa_graph_free(g) };

    let data = [-1.0f32, -0.3, 0.0, 0.4, 2.0];
    let mut q = [0f32; 5];
    assert_eq!(unsafe { qlwa_quantize_dequantize(data.as_ptr(), 5, 16, q.as_mut_ptr()) }, QlwaStatus::Ok);
    for (a, b) in data.iter().zip(&q) {
        assert!((a - b).abs() <= 3.0 / 65535.0);
    }
    assert_eq!(unsafe { qlwa_quantize_dequantize(data.as_ptr(), 5, 1, q.as_mut_ptr()) }, QlwaStatus::Quant);
}

#[test]
fn errors_are_reported() {
    let mut g = ptr::null_mut();
    let bad = CString::new("vgg").unwrap();
    assert_eq!(unsafe { qlwa_graph_gen_fixture(bad.as_ptr(), 1, &mut g) }, QlwaStatus::Data);
    assert!(last_error().contains("vgg"));
    assert!(g.is_null());

    assert_eq!(unsafe { qlwa_graph_gen_fixture(ptr::null(), 1, &mut g) }, QlwaStatus::NullPointer);
    assert!(last_error().contains("arch"));

    let missing = CString::new("/nonexistent/qlwa/model.json").unwrap();
    assert_eq!(unsafe { qlwa_graph_load(missing.as_ptr(), &mut g) }, QlwaStatus::Io);

    let mut count = 0usize;
    assert_eq!(unsafe { qlwa_graph_compute_layer_count(ptr::null(), &mut count) }, QlwaStatus::NullPointer);

    // success clears the previous message
    let ok = CString::new("mlp-small").unwrap();
    assert_eq!(unsafe { qlwa_graph_gen_fixture(ok.as_ptr(), 1, &mut g) }, QlwaStatus::Ok);
    assert!(qlwa_last_error_message().is_null());

    let layer = CString::new("fc1").unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { qlwa_diagnose(g, layer.as_ptr(), 3.0, &mut json) }, QlwaStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(v["weight_count"], 16 * 32);
    unsafe {
        qlwa_graph_free(g);
        qlwa_graph_free(ptr::null_mut());
        qlwa_string_free(ptr::null_mut());
    }
}

#[test]
fn model_and_dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixture("conv_small");
    let model = CString::new(dir.path().join("m").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qlwa_graph_save(g, model.as_ptr()) }, QlwaStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { qlwa_graph_load(model.as_ptr(), &mut loaded) }, QlwaStatus::Ok);

    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { qlwa_graph_fingerprint(g, &mut a) }, QlwaStatus::Ok);
    assert_eq!(unsafe { qlwa_graph_fingerprint(loaded, &mut b) }, QlwaStatus::Ok);
    assert_eq!(take_string(a), take_string(b));

    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { qlwa_dataset_generate(g, 4, 3, &mut ds) }, QlwaStatus::Ok);
    let ddir = CString::new(dir.path().join("d").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qlwa_dataset_save(ds, ddir.as_ptr()) }, QlwaStatus::Ok);
    let mut ds2 = ptr::null_mut();
    assert_eq!(unsafe { qlwa_dataset_load(ddir.as_ptr(), &mut ds2) }, QlwaStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { qlwa_dataset_len(ds2, &mut n) }, QlwaStatus::Ok);
    assert_eq!(n, 4);
    unsafe {
        qlwa_dataset_free(ds);
        qlwa_dataset_free(ds2);
        qlwa_graph_free(g);
        qlwa_graph_free(loaded);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(qlwa_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/qlwa.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["qlwa_graph_load", "qlwa_sweep", "qlwa_last_error_message", "QLWA_STATUS_PANIC", "typedef struct QlwaGraph QlwaGraph"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(status.success());
}
