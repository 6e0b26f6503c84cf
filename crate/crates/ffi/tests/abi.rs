use std::ffi::{CStr, CString};
use std::ptr;

use lex_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = lex_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const CONFIG: &str = r#"{
    "preset": "lex-gaussian",
    "model": {"predictor_hidden": [16], "selector_hidden": [16], "mask_samples": 2},
    "train": {"epochs": 2, "batch_size": 50, "lr": 0.001, "eval_masks": 5}
}"#;

#[test]
fn version_is_static_text() {
    let v = unsafe { CStr::from_ptr(lex_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut ds: *mut LexDataset = ptr::null_mut();
    let st = unsafe { lex_dataset_generate(ptr::null(), 10, 0, &mut ds) };
    assert_eq!(st, LexStatus::NullArgument);
    assert!(ds.is_null());
    assert!(last_error().contains("name"));
    assert_eq!(unsafe { lex_dataset_rows(ptr::null()) }, 0);
    unsafe { lex_dataset_free(ptr::null_mut()) };
}

#[test]
fn core_errors_map_to_status_codes() {
    let mut ds: *mut LexDataset = ptr::null_mut();
    let st = unsafe { lex_dataset_generate(cstr("S9").as_ptr(), 10, 0, &mut ds) };
    assert_ne!(st, LexStatus::Ok);
    assert!(!last_error().is_empty());

    let bad = [0xffu8, 0];
    let st = unsafe { lex_dataset_load(bad.as_ptr().cast(), &mut ds) };
    assert_eq!(st, LexStatus::InvalidArgument);

    let st = unsafe { lex_dataset_load(cstr("/nonexistent/x.csv").as_ptr(), &mut ds) };
    assert_eq!(st, LexStatus::Io);
}

#[test]
fn mask_metrics_through_the_abi() {
    let z = [1u8, 1, 0, 0];
    let zs = [1u8, 0, 1, 0];
    let (mut t, mut f, mut q) = (0.0, 0.0, 0.0);
    let st = unsafe { lex_mask_metrics(z.as_ptr(), zs.as_ptr(), 4, &mut t, &mut f, &mut q) };
    assert_eq!(st, LexStatus::Ok);
    assert_eq!((t, f, q), (0.5, 0.5, 0.5));
    let st = unsafe { lex_mask_metrics(z.as_ptr(), zs.as_ptr(), 4, &mut t, ptr::null_mut(), &mut q) };
    assert_eq!(st, LexStatus::NullArgument);
}

#[test]
fn dataset_roundtrip_imputer_and_model() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut train: *mut LexDataset = ptr::null_mut();
        let mut test: *mut LexDataset = ptr::null_mut();
        assert_eq!(lex_dataset_generate(cstr("S3").as_ptr(), 200, 1, &mut train), LexStatus::Ok);
        assert_eq!(lex_dataset_generate(cstr("S3").as_ptr(), 50, 2, &mut test), LexStatus::Ok);
        assert_eq!(lex_dataset_rows(train), 200);
        let d = lex_dataset_features(train);
        assert_eq!(d, 11);

        let path = cstr(dir.path().join("train.csv").to_str().unwrap());
        assert_eq!(lex_dataset_save(train, path.as_ptr()), LexStatus::Ok);
        let mut again: *mut LexDataset = ptr::null_mut();
        assert_eq!(lex_dataset_load(path.as_ptr(), &mut again), LexStatus::Ok);
        assert_eq!(lex_dataset_rows(again), 200);
        lex_dataset_free(again);

        let mut imp: *mut LexImputer = ptr::null_mut();
        let spec = cstr(r#"{"kind": "gaussian_std"}"#);
        assert_eq!(lex_imputer_fit(spec.as_ptr(), train, 3, &mut imp), LexStatus::Ok);
        let x: Vec<f64> = (0..d).map(|i| i as f64).collect();
        let mut z = vec![0u8; d];
        z[0] = 1;
        z[4] = 1;
        let mut out = vec![0.0; d];
        assert_eq!(lex_imputer_impute(imp, x.as_ptr(), z.as_ptr(), d, 9, out.as_mut_ptr()), LexStatus::Ok);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[4], 4.0);
        assert!(out.iter().all(|v| v.is_finite()));

        let imp_path = cstr(dir.path().join("imputer.json").to_str().unwrap());
        assert_eq!(lex_imputer_save(imp, imp_path.as_ptr()), LexStatus::Ok);
        let mut imp2: *mut LexImputer = ptr::null_mut();
        assert_eq!(lex_imputer_load(imp_path.as_ptr(), &mut imp2), LexStatus::Ok);
        lex_imputer_free(imp2);

        let mut model: *mut LexModel = ptr::null_mut();
        let mut m = LexMetrics::default();
        let cfg = cstr(CONFIG);
        let st = lex_model_train(cfg.as_ptr(), train, imp, test, &mut model, &mut m);
        assert_eq!(st, LexStatus::Ok, "{}", last_error());
        assert_eq!(m.n_instances, 50);
        assert!((0.0..=1.0).contains(&m.tpr));
        assert!((m.effective_rate - 5.0 / 11.0).abs() < 1e-12);
        assert_eq!(lex_model_features(model), d);

        let mut logits = vec![0.0; 2 * d];
        let xs: Vec<f64> = (0..2 * d).map(|i| (i as f64) * 0.1).collect();
        assert_eq!(lex_model_selector_logits(model, xs.as_ptr(), 2, d, logits.as_mut_ptr()), LexStatus::Ok);
        assert!(logits.iter().all(|v| v.is_finite()));
        assert_eq!(lex_model_selector_logits(model, xs.as_ptr(), 2, d - 1, logits.as_mut_ptr()), LexStatus::Dimension);

        let mut e1 = LexMetrics::default();
        let mut e2 = LexMetrics::default();
        assert_eq!(lex_model_evaluate(model, test, 5, 4, &mut e1), LexStatus::Ok);
        assert_eq!(lex_model_evaluate(model, test, 5, 4, &mut e2), LexStatus::Ok);
        assert_eq!(e1, e2);

        lex_model_free(model);
        lex_imputer_free(imp);
        lex_dataset_free(train);
        lex_dataset_free(test);
    }
}

#[test]
fn bad_config_is_a_config_error() {
    unsafe {
        let mut train: *mut LexDataset = ptr::null_mut();
        assert_eq!(lex_dataset_generate(cstr("S3").as_ptr(), 100, 1, &mut train), LexStatus::Ok);
        let mut imp: *mut LexImputer = ptr::null_mut();
        assert_eq!(lex_imputer_fit(cstr(r#"{"kind": "constant", "c": 0}"#).as_ptr(), train, 0, &mut imp), LexStatus::Ok);
        let mut model: *mut LexModel = ptr::null_mut();
        let st = lex_model_train(cstr(r#"{"preset": "nope"}"#).as_ptr(), train, imp, ptr::null(), &mut model, ptr::null_mut());
        assert_eq!(st, LexStatus::Config);
        assert!(model.is_null());
        lex_imputer_free(imp);
        lex_dataset_free(train);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/lex.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ LexMetrics m; LexDataset *ds = 0; (void)m; \
             return lex_dataset_rows(ds) == 0 && LEX_STATUS_OK == 0 ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let Ok(status) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler on PATH; header check skipped");
        return;
    };
    assert!(status.success());
}
