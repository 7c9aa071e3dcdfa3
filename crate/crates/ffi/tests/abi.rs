use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use refdense_ffi::*;

const SMALL_SPEC: &str = r#"{"n_train": 60, "n_test": 12, "timesteps": 32, "seed": 4}"#;
const QUICK_TRAIN: &str = r#"{"epochs": 1, "lr": 0.001, "t_train": 32, "model": {"hidden": 16, "heads": 2, "scales": 2}}"#;

fn last_error() -> String {
    let p = rd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_dataset() -> *mut RdDataset {
    let spec = CString::new(SMALL_SPEC).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { rd_dataset_generate(spec.as_ptr(), &mut ds) },
        RdStatus::Ok
    );
    ds
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(rd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn average_precision_over_raw_arrays() {
    let scores = [0.9, 0.8, 0.7, 0.6];
    let labels = [1u8, 0, 1, 0];
    let mut ap = 0.0;
    let s = unsafe { rd_average_precision(scores.as_ptr(), labels.as_ptr(), 4, &mut ap) };
    assert_eq!(s, RdStatus::Ok);
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

    let none = [0u8; 4];
    let s = unsafe { rd_average_precision(scores.as_ptr(), none.as_ptr(), 4, &mut ap) };
    assert_eq!(s, RdStatus::NoPositives);
    assert!(last_error().contains("positive"));
}

#[test]
fn per_frame_map_skips_empty_classes() {
    // Column 0 is ranked perfectly, column 1 has no positives.
    let scores = [0.9, 0.1, 0.2, 0.5, 0.8, 0.3];
    let labels = [1u8, 0, 0, 0, 1, 0];
    let mut map = 0.0;
    let s = unsafe { rd_per_frame_map(scores.as_ptr(), labels.as_ptr(), 3, 2, &mut map) };
    assert_eq!(s, RdStatus::Ok);
    assert!((map - 1.0).abs() < 1e-12);
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { rd_average_precision(ptr::null(), ptr::null(), 3, &mut out) },
        RdStatus::NullArgument
    );
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { rd_dataset_load(ptr::null(), &mut ds) },
        RdStatus::NullArgument
    );
    assert_eq!(
        unsafe { rd_model_evaluate(ptr::null(), ptr::null(), &mut out) },
        RdStatus::NullArgument
    );
    assert_eq!(unsafe { rd_dataset_len(ptr::null(), RdSplit::Train) }, 0);
    unsafe {
        rd_dataset_free(ptr::null_mut());
        rd_model_free(ptr::null_mut());
    }
}

#[test]
fn malformed_inputs_map_to_status_codes() {
    let bad = CString::new(r#"{"no_such_field": 1}"#).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { rd_dataset_generate(bad.as_ptr(), &mut ds) },
        RdStatus::InvalidInput
    );
    assert!(ds.is_null());

    let missing = CString::new("/nonexistent/manifest.json").unwrap();
    assert_eq!(
        unsafe { rd_dataset_load(missing.as_ptr(), &mut ds) },
        RdStatus::Io
    );
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { rd_model_load(missing.as_ptr(), &mut model) },
        RdStatus::Io
    );
}

#[test]
fn train_save_load_predict_round_trip() {
    let ds = small_dataset();
    assert_eq!(unsafe { rd_dataset_len(ds, RdSplit::Train) }, 60);
    assert_eq!(unsafe { rd_dataset_len(ds, RdSplit::Test) }, 12);
    let c = unsafe { rd_dataset_num_actions(ds) };
    assert_eq!(c, 34);

    let cfg = CString::new(QUICK_TRAIN).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { rd_model_train(ds, cfg.as_ptr(), &mut model) },
        RdStatus::Ok,
        "{}",
        last_error()
    );

    let mut map = -1.0;
    assert_eq!(
        unsafe { rd_model_evaluate(model, ds, &mut map) },
        RdStatus::Ok
    );
    assert!((0.0..=1.0).contains(&map));

    let (mut rows, mut cols) = (0, 0);
    let s = unsafe {
        rd_model_predict(
            model,
            ds,
            RdSplit::Test,
            0,
            ptr::null_mut(),
            0,
            &mut rows,
            &mut cols,
        )
    };
    assert_eq!(s, RdStatus::BufferTooSmall);
    assert_eq!((rows, cols), (32, c));
    let mut first = vec![0.0; rows * cols];
    let s = unsafe {
        rd_model_predict(
            model,
            ds,
            RdSplit::Test,
            0,
            first.as_mut_ptr(),
            first.len(),
            &mut rows,
            &mut cols,
        )
    };
    assert_eq!(s, RdStatus::Ok);
    assert!(first.iter().all(|p| (0.0..=1.0).contains(p)));
    let s = unsafe {
        rd_model_predict(
            model,
            ds,
            RdSplit::Test,
            99,
            first.as_mut_ptr(),
            first.len(),
            &mut rows,
            &mut cols,
        )
    };
    assert_eq!(s, RdStatus::InvalidInput);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.rfdc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rd_model_save(model, path.as_ptr()) }, RdStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { rd_model_load(path.as_ptr(), &mut loaded) },
        RdStatus::Ok
    );
    let mut second = vec![0.0; rows * cols];
    let s = unsafe {
        rd_model_predict(
            loaded,
            ds,
            RdSplit::Test,
            0,
            second.as_mut_ptr(),
            second.len(),
            &mut rows,
            &mut cols,
        )
    };
    assert_eq!(s, RdStatus::Ok);
    assert_eq!(first, second);

    unsafe {
        rd_model_free(model);
        rd_model_free(loaded);
        rd_dataset_free(ds);
    }
}

#[test]
fn incompatible_dataset_is_rejected() {
    let ds = small_dataset();
    let cfg = CString::new(QUICK_TRAIN).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { rd_model_train(ds, cfg.as_ptr(), &mut model) },
        RdStatus::Ok
    );
    let other = CString::new(r#"{"n_train": 60, "n_test": 12, "timesteps": 32, "segment_dim": 8}"#)
        .unwrap();
    let mut ds2 = ptr::null_mut();
    assert_eq!(
        unsafe { rd_dataset_generate(other.as_ptr(), &mut ds2) },
        RdStatus::Ok
    );
    let mut map = 0.0;
    assert_eq!(
        unsafe { rd_model_evaluate(model, ds2, &mut map) },
        RdStatus::InvalidInput
    );
    unsafe {
        rd_model_free(model);
        rd_dataset_free(ds);
        rd_dataset_free(ds2);
    }
}

#[test]
fn header_declares_every_export_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/refdense.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "rd_last_error",
        "rd_version",
        "rd_dataset_load",
        "rd_dataset_generate",
        "rd_dataset_free",
        "rd_dataset_len",
        "rd_dataset_num_actions",
        "rd_model_train",
        "rd_model_load",
        "rd_model_save",
        "rd_model_free",
        "rd_model_evaluate",
        "rd_model_predict",
        "rd_average_precision",
        "rd_per_frame_map",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("typedef struct RdModel RdModel;"));

    // Syntax check with whatever C compiler is around; skipped where there is none.
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        return;
    };
    assert!(status.success());
}
