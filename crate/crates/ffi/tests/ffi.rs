use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use attrib_core::classifiers::{self, checkpoint, Architecture, TrainConfig};
use attrib_core::dataset::ClassKey;
use attrib_core::synthgen::{self, CorpusSpec};
use attrib_core::transforms::TransformSpec;
use attrib_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(attrib_last_error()) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { attrib_string_free(p) };
    s
}

#[test]
fn confusion_round_trip() {
    let counts = [1u64, 3, 2, 2];
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { attrib_confusion_from_counts(counts.as_ptr(), 2, &mut h) }, AttribStatus::Ok);
    let mut recall = [0.0; 4];
    let mut precision = [0.0; 4];
    let mut acc = 0.0;
    assert_eq!(unsafe { attrib_confusion_recall(h, recall.as_mut_ptr(), 4) }, AttribStatus::Ok);
    assert_eq!(unsafe { attrib_confusion_precision(h, precision.as_mut_ptr(), 4) }, AttribStatus::Ok);
    assert_eq!(unsafe { attrib_confusion_accuracy(h, &mut acc) }, AttribStatus::Ok);
    assert_eq!(recall, [25.0, 75.0, 50.0, 50.0]);
    assert!((precision[0] - 100.0 / 3.0).abs() < 1e-12 && (precision[1] - 60.0).abs() < 1e-12);
    assert_eq!(acc, 0.375);
    assert_eq!(last_error(), "");
    assert_eq!(unsafe { attrib_confusion_recall(h, recall.as_mut_ptr(), 3) }, AttribStatus::BufferTooSmall);
    assert!(last_error().contains("need 4"));
    unsafe { attrib_confusion_free(h) };

    let empty_row = [0u64, 0, 1, 1];
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { attrib_confusion_from_counts(empty_row.as_ptr(), 2, &mut h) }, AttribStatus::Ok);
    assert_eq!(unsafe { attrib_confusion_recall(h, recall.as_mut_ptr(), 4) }, AttribStatus::InsufficientData);
    unsafe { attrib_confusion_free(h) };
}

#[test]
fn null_and_bad_arguments() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { attrib_confusion_from_counts(ptr::null(), 2, &mut h) }, AttribStatus::NullPointer);
    assert!(last_error().contains("counts"));
    assert_eq!(unsafe { attrib_checkpoint_load(ptr::null(), &mut ptr::null_mut()) }, AttribStatus::NullPointer);
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { attrib_checkpoint_load(missing.as_ptr(), &mut ck) }, AttribStatus::Io);
    assert!(ck.is_null());
    let bad = [0xffu8, 0];
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { attrib_domain_question(bad.as_ptr() as *const c_char, &mut out) }, AttribStatus::InvalidUtf8);
    unsafe {
        attrib_checkpoint_free(ptr::null_mut());
        attrib_confusion_free(ptr::null_mut());
        attrib_string_free(ptr::null_mut());
    }
    assert!(unsafe { attrib_checkpoint_label(ptr::null(), 0) }.is_null());
}

#[test]
fn prompts_match_core() {
    let names: Vec<CString> = attrib_core::mllmattr::default_candidates().into_iter().map(|s| CString::new(s).unwrap()).collect();
    let ptrs: Vec<*const c_char> = names.iter().map(|c| c.as_ptr()).collect();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { attrib_zero_shot_prompt(ptrs.as_ptr(), ptrs.len(), &mut out) }, AttribStatus::Ok);
    let expected = attrib_core::mllmattr::build_zero_shot_prompt(&attrib_core::mllmattr::default_candidates()).unwrap();
    assert_eq!(take_string(out), expected);
    assert_eq!(unsafe { attrib_zero_shot_prompt(ptr::null(), 0, &mut out) }, AttribStatus::InvalidArgument);
    let d = CString::new("food").unwrap();
    assert_eq!(unsafe { attrib_domain_question(d.as_ptr(), &mut out) }, AttribStatus::Ok);
    assert_eq!(take_string(out), "In the image, do you see food? Answer the question with just yes or no.");
    let v = unsafe { CStr::from_ptr(attrib_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn checkpoint_predicts_like_core() {
    let dir = tempfile::tempdir().unwrap();
    let sigs = synthgen::palette_only_signatures(2).unwrap();
    let spec = CorpusSpec {
        domains: 1,
        languages: 1,
        per_cell: 12,
        size: 32,
        seed: 3,
    };
    let rows = synthgen::generate_corpus(&sigs, &spec, dir.path()).unwrap();
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::desk()
    };
    let transform = TransformSpec::none().with_seed(1);
    let ckpt = classifiers::train(dir.path(), &rows, ClassKey::Model, &transform, &tc, &Architecture::hist()).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&ckpt, &path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { attrib_checkpoint_load(cpath.as_ptr(), &mut h) }, AttribStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { attrib_checkpoint_n_classes(h, &mut n) }, AttribStatus::Ok);
    assert_eq!(n, 2);
    for i in 0..n {
        let label = unsafe { CStr::from_ptr(attrib_checkpoint_label(h, i)) }.to_str().unwrap();
        assert_eq!(label, ckpt.labels[i]);
    }
    assert!(unsafe { attrib_checkpoint_label(h, n) }.is_null());

    let expected = classifiers::predict(&ckpt, dir.path(), &rows, &TransformSpec::none().with_seed(ckpt.meta.seed)).unwrap();
    for (row, (&want, post)) in rows.iter().zip(expected.predicted.iter().zip(&expected.posteriors)).take(6) {
        let img = CString::new(dir.path().join(&row.path).to_str().unwrap()).unwrap();
        let mut class = usize::MAX;
        let mut probs = [0.0; 2];
        assert_eq!(
            unsafe { attrib_checkpoint_predict_file(h, img.as_ptr(), &mut class, probs.as_mut_ptr(), 2) },
            AttribStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(class, want);
        assert_eq!(&probs[..], &post[..]);
    }
    let missing = CString::new(dir.path().join("none.png").to_str().unwrap()).unwrap();
    let mut class = 0;
    assert_eq!(unsafe { attrib_checkpoint_predict_file(h, missing.as_ptr(), &mut class, ptr::null_mut(), 0) }, AttribStatus::Io);
    unsafe { attrib_checkpoint_free(h) };
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include").join("attrib.h");
    assert!(header.exists(), "build script writes the header");
    let lib = target_dir().join("libattrib_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C link test: no C compiler or static library at {}", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests").join("smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke program failed to build");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "C smoke program exited with {:?}", run.status);
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(
        stdout,
        "In the image, do you see animals? Answer the question with just yes or no.\n25.0000 75.0000 33.3333 66.6667 0.3750\n"
    );
}
