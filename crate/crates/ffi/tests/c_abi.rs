use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use plrh_ffi::*;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = plrh_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn load() -> *mut PlrhDataset {
    let e2e = fixtures().join("e2e");
    let s = cstr(e2e.join("samples.jsonl").to_str().unwrap());
    let f = cstr(e2e.join("features.bin").to_str().unwrap());
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { plrh_dataset_load(s.as_ptr(), f.as_ptr(), &mut ds) }, PlrhStatus::Ok);
    assert!(plrh_last_error().is_null());
    ds
}

#[test]
fn dataset_and_selection() {
    let ds = load();
    unsafe {
        assert_eq!(plrh_dataset_len(ds), 20);
        assert_eq!(plrh_dataset_train_len(ds), 12);
        assert_eq!(plrh_dataset_feature_dim(ds), 16);

        let id = cstr("test-12");
        let mut sel = ptr::null_mut();
        assert_eq!(plrh_select_for_sample(ds, id.as_ptr(), 3, &mut sel), PlrhStatus::Ok);
        assert_eq!(plrh_selection_len(sel), 3);
        let mut prev = f64::INFINITY;
        for rank in 0..3 {
            let mut sid = ptr::null_mut();
            let mut score = 0.0;
            assert_eq!(plrh_selection_get(sel, rank, &mut sid, &mut score), PlrhStatus::Ok);
            assert!(CStr::from_ptr(sid).to_str().unwrap().starts_with("train-"));
            assert!(score <= prev);
            prev = score;
            plrh_string_free(sid);
        }
        let (mut sid, mut score) = (ptr::null_mut(), 0.0);
        assert_eq!(plrh_selection_get(sel, 3, &mut sid, &mut score), PlrhStatus::OutOfRange);
        plrh_selection_free(sel);

        let unknown = cstr("nope");
        assert_eq!(plrh_select_for_sample(ds, unknown.as_ptr(), 3, &mut sel), PlrhStatus::NotFound);
        assert!(last_error().contains("nope"));
        assert_eq!(plrh_select_for_sample(ds, id.as_ptr(), 0, &mut sel), PlrhStatus::Retrieval);

        let wrong_dim = [1.0f32; 4];
        assert_eq!(plrh_select_examples(ds, wrong_dim.as_ptr(), 4, 2, &mut sel), PlrhStatus::Retrieval);
        plrh_dataset_free(ds);
    }
}

#[test]
fn load_errors() {
    let s = cstr("/nonexistent/samples.jsonl");
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(plrh_dataset_load(s.as_ptr(), s.as_ptr(), &mut ds), PlrhStatus::Io);
        assert!(ds.is_null());
        assert_eq!(plrh_dataset_load(ptr::null(), s.as_ptr(), &mut ds), PlrhStatus::NullArgument);
        let bad = [0xffu8, 0];
        assert_eq!(
            plrh_dataset_load(bad.as_ptr().cast(), s.as_ptr(), &mut ds),
            PlrhStatus::InvalidUtf8
        );
        plrh_dataset_free(ptr::null_mut());
        assert_eq!(plrh_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn cosine_normalize_score() {
    let a = [1.0f32, 0.0];
    let b = [1.0f32, 1.0];
    let mut c = 0.0;
    unsafe {
        assert_eq!(plrh_cosine_similarity(a.as_ptr(), b.as_ptr(), 2, &mut c), PlrhStatus::Ok);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let z = [0.0f32, 0.0];
        assert_eq!(plrh_cosine_similarity(a.as_ptr(), z.as_ptr(), 2, &mut c), PlrhStatus::Retrieval);

        let raw = cstr("  The Stir-Fry! ");
        let mut out = ptr::null_mut();
        assert_eq!(plrh_normalize_answer(raw.as_ptr(), &mut out), PlrhStatus::Ok);
        assert_eq!(CStr::from_ptr(out).to_str().unwrap(), "stirfry");
        plrh_string_free(out);

        let answers: Vec<CString> = ["helmet", "helmet", "hat"].iter().map(|s| cstr(s)).collect();
        let ptrs: Vec<*const libc::c_char> = answers.iter().map(|s| s.as_ptr()).collect();
        let pred = cstr("Helmet");
        let (mut m, mut acc) = (0, 0.0);
        assert_eq!(plrh_score_sample(pred.as_ptr(), ptrs.as_ptr(), 3, &mut m, &mut acc), PlrhStatus::Ok);
        assert_eq!((m, acc), (2, 2.0 / 3.0));
        assert_eq!(plrh_score_sample(pred.as_ptr(), ptr::null(), 0, &mut m, &mut acc), PlrhStatus::Evaluation);
    }
}

#[test]
fn prompt_builder_matches_golden_file() {
    let golden = std::fs::read_to_string(fixtures().join("golden/stage2.txt")).unwrap();
    let head = cstr("Please generate the rationale according to the context and question.");
    let blocks = [
        (
            "Fresh vegetables displayed along with eggs and a dip.",
            "What type of food is in the image?",
            "The vegetables are clearly visible in the image, and they are a common type of food.",
        ),
        (
            "Cut up vegetables tossed around in a light dressing.",
            "What kind of dish is this?",
            "Given the context of cut up vegetables tossed around in a light dressing, it's logical to conclude that it's a stir fry.",
        ),
    ];
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(plrh_prompt_builder_new(2, head.as_ptr(), false, &mut b), PlrhStatus::Ok);
        for (c, q, r) in blocks {
            let (c, q, r) = (cstr(c), cstr(q), cstr(r));
            assert_eq!(
                plrh_prompt_builder_add_example(b, c.as_ptr(), q.as_ptr(), ptr::null(), r.as_ptr()),
                PlrhStatus::Ok
            );
        }
        let mut p = ptr::null_mut();
        assert_eq!(plrh_prompt_build(b, &mut p), PlrhStatus::Prompt);
        assert!(last_error().contains("input"));

        let c = cstr("A bowl of broccoli, carrots, and cauliflower.");
        let q = cstr("What types of food are these items?");
        assert_eq!(
            plrh_prompt_builder_set_input(b, c.as_ptr(), q.as_ptr(), ptr::null(), ptr::null()),
            PlrhStatus::Ok
        );
        assert_eq!(plrh_prompt_build(b, &mut p), PlrhStatus::Ok);
        assert_eq!(CStr::from_ptr(plrh_prompt_text(p)).to_str().unwrap(), golden);
        let hash = CStr::from_ptr(plrh_prompt_hash(p)).to_str().unwrap().to_owned();
        assert_eq!(hash, plrh_core::hashing::content_hash(golden.as_bytes()));
        assert_eq!(plrh_prompt_example_count(p), 2);
        plrh_prompt_free(p);

        let a = cstr("vegetable");
        assert_eq!(
            plrh_prompt_builder_set_input(b, c.as_ptr(), q.as_ptr(), a.as_ptr(), ptr::null()),
            PlrhStatus::Ok
        );
        assert_eq!(plrh_prompt_build(b, &mut p), PlrhStatus::Prompt);
        plrh_prompt_builder_free(b);

        assert_eq!(plrh_prompt_builder_new(7, head.as_ptr(), false, &mut b), PlrhStatus::OutOfRange);
    }
}

#[test]
fn errors_are_thread_local() {
    let s = cstr("/nonexistent");
    let mut ds = ptr::null_mut();
    unsafe { plrh_dataset_load(s.as_ptr(), s.as_ptr(), &mut ds) };
    assert!(!plrh_last_error().is_null());
    std::thread::spawn(|| assert!(plrh_last_error().is_null())).join().unwrap();
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "plrh.h"

int main(int argc, char **argv) {
    PlrhDataset *ds = NULL;
    if (plrh_dataset_load(argv[1], argv[2], &ds) != PLRH_STATUS_OK) {
        fprintf(stderr, "%s\n", plrh_last_error());
        return 1;
    }
    PlrhSelection *sel = NULL;
    if (plrh_select_for_sample(ds, "test-12", 2, &sel) != PLRH_STATUS_OK) return 2;
    for (size_t i = 0; i < plrh_selection_len(sel); i++) {
        char *id = NULL;
        double score = 0.0;
        if (plrh_selection_get(sel, i, &id, &score) != PLRH_STATUS_OK) return 3;
        printf("%s %.6f\n", id, score);
        plrh_string_free(id);
    }
    plrh_selection_free(sel);
    plrh_dataset_free(ds);
    return plrh_dataset_load(NULL, argv[2], &ds) == PLRH_STATUS_NULL_ARGUMENT ? 0 : 4;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libplrh_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let src = dir.join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let e2e = fixtures().join("e2e");
    let out = Command::new(&bin)
        .arg(e2e.join("samples.jsonl"))
        .arg(e2e.join("features.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("train-07 "));
}
