use std::ffi::{CStr, CString};
use std::ptr;

use spss_ffi::*;

fn last_error() -> String {
    let p = spss_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_lifecycle_and_forward() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { spss_model_new(3, 2, 4, 7, &mut model) }, SpssStatus::Ok);
    assert_eq!(unsafe { spss_model_n_out(model) }, 2);
    assert!(unsafe { spss_model_param_count(model) } > 0);

    let (rows, cols) = (20, 24);
    let pixels: Vec<f32> = (0..3 * rows * cols).map(|i| (i % 13) as f32 / 13.0).collect();
    let mut scores = vec![0f32; 2 * rows * cols];
    let st = unsafe { spss_model_forward(model, pixels.as_ptr(), 3, rows, cols, scores.as_mut_ptr(), scores.len()) };
    assert_eq!(st, SpssStatus::Ok);
    for p in 0..rows * cols {
        assert!((scores[p] + scores[rows * cols + p] - 1.0).abs() < 1e-5);
    }
    let mut rho = [0f64; 2];
    assert_eq!(unsafe { spss_gap(scores.as_ptr(), 2, rows, cols, rho.as_mut_ptr()) }, SpssStatus::Ok);
    assert!((rho[0] + rho[1] - 1.0).abs() < 1e-5);

    let st = unsafe { spss_model_forward(model, pixels.as_ptr(), 3, rows, cols, scores.as_mut_ptr(), 10) };
    assert_eq!(st, SpssStatus::ShapeMismatch);
    assert!(last_error().contains("need"));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { spss_model_save(model, path.as_ptr()) }, SpssStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { spss_model_load(path.as_ptr(), &mut loaded) }, SpssStatus::Ok);
    let mut again = vec![0f32; 2 * rows * cols];
    unsafe { spss_model_forward(loaded, pixels.as_ptr(), 3, rows, cols, again.as_mut_ptr(), again.len()) };
    assert_eq!(again, scores);
    unsafe {
        spss_model_free(model);
        spss_model_free(loaded);
        spss_model_free(ptr::null_mut());
    }
}

#[test]
fn error_codes() {
    assert_eq!(unsafe { spss_model_new(3, 2, 4, 0, ptr::null_mut()) }, SpssStatus::NullPointer);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { spss_model_new(3, 0, 4, 0, &mut model) }, SpssStatus::InvalidArgument);
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { spss_model_load(missing.as_ptr(), &mut model) }, SpssStatus::Io);
    let mut ok = ptr::null_mut();
    assert_eq!(unsafe { spss_model_new(1, 1, 4, 0, &mut ok) }, SpssStatus::Ok);
    assert!(spss_last_error().is_null());
    unsafe { spss_model_free(ok) };
}

#[test]
fn loss_extract_and_metrics() {
    let pred = [0.6, 0.4];
    let target = [0.8, 0.2];
    let mut loss = 0.0;
    assert_eq!(unsafe { spss_loss_sp(pred.as_ptr(), target.as_ptr(), 1, 2, &mut loss) }, SpssStatus::Ok);
    assert!((loss - 0.08).abs() < 1e-12);

    let bits = [1u8, 1, 1, 0];
    let mut sp = [0f64; 1];
    assert_eq!(unsafe { spss_extract_sp(bits.as_ptr(), 2, 2, 1, sp.as_mut_ptr()) }, SpssStatus::Ok);
    assert_eq!(sp[0], 0.75);

    let truth = [1u8, 1, 0, 0];
    let guess = [1u8, 0, 0, 0];
    let mut m = SpssMetrics::default();
    assert_eq!(unsafe { spss_metrics(guess.as_ptr(), truth.as_ptr(), 4, 2, &mut m) }, SpssStatus::Ok);
    assert!((m.mean_iou - 7.0 / 12.0).abs() < 1e-12);
    assert!((m.mean_accuracy - 0.75).abs() < 1e-12);
    let bad = [5u8, 0, 0, 0];
    assert_ne!(unsafe { spss_metrics(bad.as_ptr(), truth.as_ptr(), 4, 2, &mut m) }, SpssStatus::Ok);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spss.h")).unwrap();
    for name in [
        "spss_model_new",
        "spss_model_load",
        "spss_model_forward",
        "spss_gap",
        "spss_loss_sp",
        "spss_extract_sp",
        "spss_metrics",
        "spss_last_error",
        "SPSS_STATUS_OK",
        "typedef struct SpssModel SpssModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
