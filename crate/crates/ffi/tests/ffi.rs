use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mal_last_error()) }.to_string_lossy().into_owned()
}

fn small_dataset() -> *mut MalDataset {
    let cfg = CString::new("scene_count = 5\nclass_count = 2\nseed = 4\n").unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { mal_dataset_generate(cfg.as_ptr(), &mut d) }, MalStatus::Ok);
    assert!(!d.is_null());
    d
}

#[test]
fn iou_and_null_handling() {
    let a = MalBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
    let b = MalBox { x1: 1.0, y1: 0.0, x2: 3.0, y2: 2.0 };
    let mut v = 0.0;
    assert_eq!(unsafe { mal_iou(&a, &b, &mut v) }, MalStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(last_error(), "");
    assert_eq!(unsafe { mal_iou(ptr::null(), &b, &mut v) }, MalStatus::NullPointer);
    assert!(last_error().contains("null"));
    let bad = MalBox { x1: 3.0, y1: 0.0, x2: 1.0, y2: 2.0 };
    assert_eq!(unsafe { mal_iou(&bad, &b, &mut v) }, MalStatus::InvalidBox);
}

#[test]
fn bad_config_reports_key() {
    let cfg = CString::new("scene_cnt = 5\n").unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { mal_dataset_generate(cfg.as_ptr(), &mut d) }, MalStatus::Config);
    assert!(d.is_null());
    assert!(last_error().contains("scene_cnt"), "{}", last_error());
}

#[test]
fn dataset_round_trip() {
    let d = small_dataset();
    let (mut tr, mut va) = (0, 0);
    assert_eq!(unsafe { mal_dataset_counts(d, &mut tr, &mut va) }, MalStatus::Ok);
    assert_eq!((tr, va), (4, 1));
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.txt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mal_dataset_save(d, path.as_ptr()) }, MalStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { mal_dataset_load(path.as_ptr(), &mut back) }, MalStatus::Ok);
    let missing = CString::new(dir.path().join("nope.txt").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { mal_dataset_load(missing.as_ptr(), &mut none) }, MalStatus::Io);
    unsafe {
        mal_dataset_free(back);
        mal_dataset_free(d);
        mal_dataset_free(ptr::null_mut());
    }
}

#[test]
fn train_save_evaluate_detect() {
    let d = small_dataset();
    let method = CString::new("baseline").unwrap();
    let cfg = CString::new("iterations = 20\nbatch_size = 2\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mal_train(d, method.as_ptr(), cfg.as_ptr(), &mut m) }, MalStatus::Ok, "{}", last_error());

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mal_model_save(m, path.as_ptr()) }, MalStatus::Ok);
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { mal_model_load(path.as_ptr(), &mut m2) }, MalStatus::Ok);

    let mut s1 = MalEvalSummary { ap: 0.0, ap50: 0.0, ap75: 0.0, score_iou_correlation: 0.0, scenes: 0, detections: 0 };
    let mut s2 = s1;
    assert_eq!(unsafe { mal_evaluate(m, d, MalSplit::Val, &mut s1) }, MalStatus::Ok);
    assert_eq!(unsafe { mal_evaluate(m2, d, MalSplit::Val, &mut s2) }, MalStatus::Ok);
    assert_eq!(s1.scenes, 1);
    assert_eq!(s1.ap.to_bits(), s2.ap.to_bits());

    let mut total = 0;
    assert_eq!(unsafe { mal_detect(m, d, 0, ptr::null_mut(), 0, &mut total) }, MalStatus::Ok);
    let mut buf = vec![MalDetection { bbox: MalBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 }, class_id: 0, score: 0.0 }; total];
    let mut again = 0;
    assert_eq!(unsafe { mal_detect(m, d, 0, buf.as_mut_ptr(), buf.len(), &mut again) }, MalStatus::Ok);
    assert_eq!(again, total);
    assert!(buf.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(buf.iter().all(|x| x.class_id < 2 && x.bbox.x1 < x.bbox.x2));
    assert_eq!(unsafe { mal_detect(m, d, 99, ptr::null_mut(), 0, &mut total) }, MalStatus::InvalidArgument);

    let wrong = CString::new("yolo").unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { mal_train(d, wrong.as_ptr(), ptr::null(), &mut none) }, MalStatus::InvalidArgument);
    unsafe {
        mal_model_free(m);
        mal_model_free(m2);
        mal_dataset_free(d);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mal.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for f in [
        "mal_last_error", "mal_version", "mal_iou", "mal_dataset_generate", "mal_dataset_load",
        "mal_dataset_save", "mal_dataset_counts", "mal_dataset_free", "mal_train", "mal_model_load",
        "mal_model_save", "mal_model_free", "mal_evaluate", "mal_detect",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("typedef struct MalDataset MalDataset;"));
    assert!(text.contains("MAL_STATUS_OK = 0"));
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "mal.h"
int main(void) {
    MalBox a = {0, 0, 2, 2}, b = {1, 0, 3, 2};
    double v = 0;
    if (mal_iou(&a, &b, &v) != MAL_STATUS_OK || fabs(v - 1.0 / 3.0) > 1e-12) return 1;
    if (mal_iou(NULL, &b, &v) != MAL_STATUS_NULL_POINTER) return 2;
    MalDataset *d = NULL;
    if (mal_dataset_generate("scene_count = 5\nseed = 2\n", &d) != MAL_STATUS_OK) return 3;
    size_t tr = 0, va = 0;
    mal_dataset_counts(d, &tr, &va);
    printf("version=%s train=%zu val=%zu\n", mal_version(), tr, va);
    mal_dataset_free(d);
    return 0;
}
"#;

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .map(String::from)
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(header())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Directory holding the build's `libmal_ffi.a`, found from the test binary location.
fn static_lib_dir() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    exe.ancestors().skip(1).take(3).map(Path::to_path_buf).find(|d| d.join("libmal_ffi.a").exists())
}

#[test]
fn c_program_links_and_runs() {
    let (Some(cc), Some(lib)) = (cc(), static_lib_dir()) else {
        eprintln!("no C compiler or static library; skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(lib.join("libmal_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("train=4 val=1"), "{stdout}");
}
