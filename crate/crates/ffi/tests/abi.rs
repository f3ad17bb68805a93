//! Exercises the C ABI through its Rust symbols.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use factdpo::policy::{save_checkpoint, AdapterConfig, ModelConfig, PolicyModel, Tokenizer};
use factdpo_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { fdpo_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn small_checkpoint(dir: &tempfile::TempDir) -> CString {
    let tok = Tokenizer::build(
        ["Alice's city is Paris.", "Alice's city is Rome."]
            .iter()
            .copied(),
        20,
    );
    let cfg = ModelConfig {
        vocab_size: tok.vocab_size(),
        embed_dim: 8,
        context_len: 256,
        ..ModelConfig::default()
    };
    let model = PolicyModel::new(
        cfg,
        AdapterConfig {
            rank: 2,
            alpha: 2.0,
        },
        tok,
        3,
    )
    .unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path, None).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn model_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_checkpoint(&dir);
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { fdpo_model_load(path.as_ptr(), &mut model) },
        FdpoStatus::Ok
    );
    assert!(!model.is_null());

    let mut vocab = 0;
    assert_eq!(
        unsafe { fdpo_model_vocab_size(model, &mut vocab) },
        FdpoStatus::Ok
    );
    assert!(vocab > 100);

    let prompt = CString::new("Alice's city").unwrap();
    let completion = CString::new(" is Paris.").unwrap();
    let mut lp = 0.0;
    assert_eq!(
        unsafe { fdpo_model_logprob(model, prompt.as_ptr(), completion.as_ptr(), &mut lp) },
        FdpoStatus::Ok
    );
    assert!(lp < 0.0 && lp.is_finite());

    let claim = CString::new("Alice's city is Paris.").unwrap();
    let evidence = CString::new("Alice's city is Rome.\n").unwrap();
    let mut label = FdpoLabel::Supports;
    let mut text: *mut c_char = ptr::null_mut();
    let st = unsafe {
        fdpo_model_predict(
            model,
            claim.as_ptr(),
            evidence.as_ptr(),
            8,
            &mut label,
            &mut text,
        )
    };
    assert_eq!(st, FdpoStatus::Ok);
    assert!(!text.is_null());
    let first = unsafe { CStr::from_ptr(text) }.to_owned();
    unsafe { fdpo_string_free(text) };

    let mut again: *mut c_char = ptr::null_mut();
    let mut label2 = FdpoLabel::Supports;
    unsafe {
        fdpo_model_predict(
            model,
            claim.as_ptr(),
            evidence.as_ptr(),
            8,
            &mut label2,
            &mut again,
        )
    };
    assert_eq!(unsafe { CStr::from_ptr(again) }, first.as_c_str());
    assert_eq!(label, label2);
    unsafe { fdpo_string_free(again) };

    unsafe { fdpo_model_free(model) };
    unsafe { fdpo_model_free(ptr::null_mut()) };
}

#[test]
fn errors_map_to_codes() {
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { fdpo_model_load(ptr::null(), &mut model) },
        FdpoStatus::NullPointer
    );
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
    assert_eq!(
        unsafe { fdpo_model_load(missing.as_ptr(), &mut model) },
        FdpoStatus::Io
    );
    assert!(model.is_null());

    let dir = tempfile::tempdir().unwrap();
    let path = small_checkpoint(&dir);
    let p = path.to_str().unwrap();
    let mut bytes = std::fs::read(p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(p, bytes).unwrap();
    assert_eq!(
        unsafe { fdpo_model_load(path.as_ptr(), &mut model) },
        FdpoStatus::CorruptCheckpoint
    );
    assert!(last_error().contains("digest"));

    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { fdpo_model_load(bad.as_ptr().cast(), &mut model) },
        FdpoStatus::InvalidUtf8
    );
}

#[test]
fn objective_helpers() {
    let mut v = 0.0;
    assert_eq!(
        unsafe { fdpo_dpo_loss(-3.0, -3.0, -5.0, -5.0, 0.1, &mut v) },
        FdpoStatus::Ok
    );
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(
        unsafe { fdpo_dpo_loss(f64::NAN, -3.0, -5.0, -5.0, 0.1, &mut v) },
        FdpoStatus::Data
    );
    assert_eq!(
        unsafe { fdpo_improved_dpo_loss(-3.0, -3.0, -5.0, -5.0, 0.1, 0.0, 0.0, 1.0, 1.0, &mut v) },
        FdpoStatus::Ok
    );
    assert_eq!(v, 0.0);

    let (mut m1, mut m2) = (1.0, 0.5);
    assert_eq!(
        unsafe { fdpo_update_multipliers(&mut m1, &mut m2, 0.1, -0.1, 0.1) },
        FdpoStatus::Ok
    );
    assert!((m1 - 0.99).abs() < 1e-15 && (m2 - 0.51).abs() < 1e-15);

    let mut n = 0;
    assert_eq!(
        unsafe { fdpo_sample_count(5, 10, 1, 10, &mut n) },
        FdpoStatus::Ok
    );
    assert_eq!(n, 5);
    assert_eq!(
        unsafe { fdpo_sample_count(11, 10, 1, 10, &mut n) },
        FdpoStatus::InvalidArgument
    );
    assert!(unsafe { CStr::from_ptr(fdpo_version()) }
        .to_str()
        .unwrap()
        .starts_with("0."));
}

#[test]
fn header_is_generated() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/factdpo.h")).unwrap();
    for name in [
        "FACTDPO_H",
        "typedef struct FdpoModel FdpoModel;",
        "FDPO_STATUS_OK = 0",
        "FDPO_STATUS_CORRUPT_CHECKPOINT",
        "FDPO_LABEL_UNPARSED = -1",
        "fdpo_model_load",
        "fdpo_model_predict",
        "fdpo_last_error_message",
        "fdpo_string_free",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
