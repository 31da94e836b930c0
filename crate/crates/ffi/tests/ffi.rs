use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use hkd::config::RunConfig;
use hkd::train::{self, Control};
use hkd_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hkd_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn scalar_functions_and_errors() {
    let mut v = f64::NAN;
    let p = [0.7, 0.3];
    assert_eq!(unsafe { hkd_uncertainty(p.as_ptr(), 2, true, &mut v) }, HkdStatus::Ok);
    let expected = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln()) / 2f64.ln();
    assert!((v - expected).abs() < 1e-15);
    assert_eq!(last_error(), "");

    let logits = [2.0, 0.0, -1.0];
    assert_eq!(unsafe { hkd_cross_entropy(logits.as_ptr(), 3, 0, &mut v) }, HkdStatus::Ok);
    let lse = (2f64.exp() + 1.0 + (-1f64).exp()).ln();
    assert!((v - (lse - 2.0)).abs() < 1e-14);
    assert_eq!(unsafe { hkd_cross_entropy(logits.as_ptr(), 3, 3, &mut v) }, HkdStatus::InvalidArgument);
    assert!(last_error().contains("label 3"));

    let t = [0.5, 0.5];
    assert_eq!(unsafe { hkd_kd_vanilla(t.as_ptr(), t.as_ptr(), 2, 1.0, &mut v) }, HkdStatus::Ok);
    assert_eq!(v, 0.0);
    let bad = [0.9, 0.3];
    assert_eq!(unsafe { hkd_kd_vanilla(bad.as_ptr(), t.as_ptr(), 2, 1.0, &mut v) }, HkdStatus::InvalidArgument);
    assert_eq!(unsafe { hkd_uncertainty(ptr::null(), 2, true, &mut v) }, HkdStatus::NullPointer);
    assert!(last_error().contains("probs"));
}

#[test]
fn weight_store_handle() {
    let mut store = ptr::null_mut();
    assert_eq!(unsafe { hkd_store_new(0.5, 0.6, &mut store) }, HkdStatus::Ok);
    let mut out = HkdWeightPair { beta: 0.0, gamma: 0.0 };
    let prev = HkdWeightPair { beta: 1.2, gamma: 0.9 };
    let fresh = HkdWeightPair { beta: 0.8, gamma: 1.1 };
    unsafe {
        assert_eq!(hkd_store_ensemble(store, 7, prev, 0.1, 1, &mut out), HkdStatus::Ok);
        assert_eq!(out, prev);
        assert_eq!(hkd_store_ensemble(store, 7, fresh, 0.3, 2, &mut out), HkdStatus::Ok);
        assert!((out.beta - 1.0).abs() < 1e-15 && (out.gamma - 1.0).abs() < 1e-15);
        assert_eq!(hkd_store_ensemble(store, 7, fresh, 0.3, 2, &mut out), HkdStatus::InvalidArgument);
        let mut n = 0;
        assert_eq!(hkd_store_len(store, &mut n), HkdStatus::Ok);
        assert_eq!(n, 1);
        hkd_store_free(store);
        hkd_store_free(ptr::null_mut());
    }
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { hkd_store_new(1.5, 0.6, &mut s) }, HkdStatus::Config);
    assert!(s.is_null());
}

#[test]
fn model_round_trip_through_checkpoint() {
    let cfg = RunConfig::from_toml_str(
        r#"
        [data]
        classes = 3
        dim = 4
        train_per_class = 10
        eval_per_class = 5
        meta_per_class = 1
        [teacher]
        hidden = [6]
        feature_tap = 0
        epochs = 1
        "#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let splits = cfg.data.load(0).unwrap();
    let mut control = Control { out_dir: Some(dir.path().to_path_buf()), ..Control::default() };
    let run = train::train_teacher(&cfg, &splits, &mut control).unwrap();
    let path = CString::new(dir.path().join("teacher.ckpt").to_str().unwrap()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hkd_model_load(path.as_ptr(), &mut model) }, HkdStatus::Ok);
    let (mut inputs, mut classes) = (0, 0);
    assert_eq!(unsafe { hkd_model_dims(model, &mut inputs, &mut classes) }, HkdStatus::Ok);
    assert_eq!((inputs, classes), (4, 3));
    let x = splits.eval.features().select_rows(&[0, 1]);
    let mut probs = [0.0; 6];
    assert_eq!(unsafe { hkd_model_predict(model, x.data().as_ptr(), 2, probs.as_mut_ptr(), 6) }, HkdStatus::Ok);
    let direct = run.teacher.spec.predict(&run.teacher.params, &x).unwrap();
    assert_eq!(&probs[..], direct.probs.data());
    assert_eq!(unsafe { hkd_model_predict(model, x.data().as_ptr(), 2, probs.as_mut_ptr(), 5) }, HkdStatus::InvalidArgument);
    unsafe { hkd_model_free(model) };

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { hkd_model_load(missing.as_ptr(), &mut m2) }, HkdStatus::Io);
    assert!(last_error().contains("none.ckpt"));
}

#[test]
fn gradcheck_entry_point() {
    let mut worst = f64::NAN;
    assert_eq!(unsafe { hkd_gradcheck(3, &mut worst) }, HkdStatus::Ok, "{}", last_error());
    assert!(worst < 1e-4);
    let v = unsafe { CStr::from_ptr(hkd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "hkd.h"

int main(void) {
    double p[2] = {0.5, 0.5};
    double u = 0.0;
    if (hkd_uncertainty(p, 2, true, &u) != HKD_STATUS_OK || fabs(u - 1.0) > 1e-12) return 1;
    HkdWeightStore *store = NULL;
    if (hkd_store_new(0.5, 0.6, &store) != HKD_STATUS_OK) return 2;
    HkdWeightPair w, a = {1.2, 0.9}, b = {0.8, 1.1};
    hkd_store_ensemble(store, 1, a, 0.0, 0, &w);
    hkd_store_ensemble(store, 1, b, 0.3, 1, &w);
    hkd_store_free(store);
    if (fabs(w.beta - 1.0) > 1e-15) return 3;
    if (hkd_uncertainty(NULL, 2, true, &u) != HKD_STATUS_NULL_POINTER) return 4;
    printf("%s\n", hkd_last_error());
    return 0;
}
"#;

/// Compiles a C client against the generated header and static library.
#[test]
fn c_client_links_against_static_library() {
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libhkd_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.is_file() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("client");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "client exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).contains("probs"));
}
