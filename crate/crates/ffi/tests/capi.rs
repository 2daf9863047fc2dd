use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use upit::model::{perplexity, DenseModel, GateMode, LanguageModel, ModelConfig};
use upit::numerics::RngState;
use upit::pipeline::checkpoint::{save_dense, save_moe, CheckpointInfo};
use upit::upcycle::vanilla_upcycle;
use upit_ffi::*;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_h: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq: 10,
        lora_rank: 0,
        lora_scaling: 2.0,
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn load(p: &Path) -> (UpitStatus, *mut UpitModel) {
    let mut m = ptr::null_mut();
    let s = unsafe { upit_model_load(cpath(p).as_ptr(), &mut m) };
    (s, m)
}

fn last_error() -> String {
    let p = upit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dense_forward_matches_rust() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.upck");
    let mut model = DenseModel::new(config(), &RngState::new(3)).unwrap();
    model.narrow_to_f32();
    save_dense(&path, &model, CheckpointInfo::dense(&config())).unwrap();

    let (s, m) = load(&path);
    assert_eq!(s, UpitStatus::Ok);
    let (mut vocab, mut n) = (0usize, 9usize);
    assert_eq!(unsafe { upit_model_info(m, &mut vocab, &mut n) }, UpitStatus::Ok);
    assert_eq!((vocab, n), (12, 0));

    let toks = [1u32, 4, 2, 7];
    let mut logits = vec![0.0; toks.len() * 12];
    let s = unsafe { upit_model_forward(m, toks.as_ptr(), toks.len(), logits.as_mut_ptr(), logits.len()) };
    assert_eq!(s, UpitStatus::Ok);
    let want = model.logits(&[1, 4, 2, 7]).unwrap();
    assert_eq!(logits.as_slice(), want.data());

    let mut ppl = 0.0;
    assert_eq!(unsafe { upit_model_perplexity(m, toks.as_ptr(), toks.len(), &mut ppl) }, UpitStatus::Ok);
    assert_eq!(ppl, perplexity(&model, &[1, 4, 2, 7]).unwrap());

    let mut small = vec![0.0; 5];
    let s = unsafe { upit_model_forward(m, toks.as_ptr(), toks.len(), small.as_mut_ptr(), small.len()) };
    assert_eq!(s, UpitStatus::BufferTooSmall);

    let bad = [40u32, 1];
    let s = unsafe { upit_model_forward(m, bad.as_ptr(), 2, logits.as_mut_ptr(), logits.len()) };
    assert_ne!(s, UpitStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe { upit_model_free(m) };
}

#[test]
fn moe_checkpoint_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.upck");
    let dense = DenseModel::new(config(), &RngState::new(1)).unwrap();
    let mut moe = vanilla_upcycle(&dense, 4, 2, GateMode::TopKSoftmax, &RngState::new(2)).unwrap();
    moe.narrow_to_f32();
    save_moe(&path, &moe, CheckpointInfo::moe(&config(), *moe.layout())).unwrap();

    let (s, m) = load(&path);
    assert_eq!(s, UpitStatus::Ok);
    let (mut vocab, mut n) = (0usize, 0usize);
    unsafe { upit_model_info(m, &mut vocab, &mut n) };
    assert_eq!(n, 4);
    let toks = [3u32, 3, 5];
    let mut ppl = 0.0;
    assert_eq!(unsafe { upit_model_perplexity(m, toks.as_ptr(), 3, &mut ppl) }, UpitStatus::Ok);
    assert_eq!(ppl, perplexity(&moe, &[3, 3, 5]).unwrap());
    unsafe { upit_model_free(m) };
}

#[test]
fn corrupt_files_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("g.upck");
    let model = DenseModel::new(config(), &RngState::new(3)).unwrap();
    save_dense(&good, &model, CheckpointInfo::dense(&config())).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut version = bytes.clone();
    version[4] = 7;
    let truncated = bytes[..bytes.len() - 3].to_vec();
    let cases = [
        (magic, UpitStatus::BadMagic),
        (version, UpitStatus::VersionMismatch),
        (truncated, UpitStatus::Truncated),
    ];
    for (i, (data, want)) in cases.into_iter().enumerate() {
        let p = dir.path().join(format!("bad{i}.upck"));
        std::fs::write(&p, data).unwrap();
        let (s, m) = load(&p);
        assert_eq!(s, want);
        assert!(m.is_null());
    }
    let (s, _) = load(&dir.path().join("missing.upck"));
    assert_eq!(s, UpitStatus::Io);
}

#[test]
fn null_pointers_rejected() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { upit_model_load(ptr::null(), &mut m) }, UpitStatus::NullPointer);
    let mut out = 0.0;
    let toks = [1u32, 2];
    assert_eq!(
        unsafe { upit_model_perplexity(ptr::null(), toks.as_ptr(), 2, &mut out) },
        UpitStatus::NullPointer
    );
    assert_eq!(
        unsafe { upit_load_balance_loss(ptr::null(), ptr::null(), 2, &mut out) },
        UpitStatus::NullPointer
    );
    assert!(last_error().contains("null"));
    unsafe { upit_model_free(ptr::null_mut()) };
}

#[test]
fn dare_is_seeded_and_rescaled() {
    let delta: Vec<f64> = (0..200).map(|i| i as f64 * 0.01 + 0.5).collect();
    let mut a = vec![0.0; 200];
    let mut b = vec![0.0; 200];
    unsafe {
        assert_eq!(upit_dare(delta.as_ptr(), 200, 0.75, 11, a.as_mut_ptr()), UpitStatus::Ok);
        assert_eq!(upit_dare(delta.as_ptr(), 200, 0.75, 11, b.as_mut_ptr()), UpitStatus::Ok);
    }
    assert_eq!(a, b);
    for (x, d) in a.iter().zip(&delta) {
        assert!(*x == 0.0 || (x - d * 4.0).abs() < 1e-12);
    }
    let mut c = vec![0.0; 1];
    assert_eq!(unsafe { upit_dare(delta.as_ptr(), 1, 1.5, 0, c.as_mut_ptr()) }, UpitStatus::InvalidArgument);
}

#[test]
fn load_balance_and_buckets() {
    let f = [0.5, 0.5];
    let p = [0.5, 0.5];
    let mut out = 0.0;
    assert_eq!(unsafe { upit_load_balance_loss(f.as_ptr(), p.as_ptr(), 2, &mut out) }, UpitStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);

    // three samples, two experts, capacity one: the third is dropped
    let ppl = [1.0, 5.0, 2.0, 9.0, 3.0, 4.0];
    let mut assign = [7i64; 3];
    let mut dropped = 0usize;
    let s = unsafe { upit_assign_buckets(ppl.as_ptr(), 3, 2, 1, assign.as_mut_ptr(), &mut dropped) };
    assert_eq!(s, UpitStatus::Ok);
    assert_eq!(dropped, 1);
    assert_eq!(assign.iter().filter(|&&a| a == -1).count(), 1);
    assert_eq!(assign[0], 0);
}

#[test]
fn header_is_current() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/upit.h")).unwrap();
    for f in ["upit_model_load", "upit_model_free", "upit_dare", "upit_assign_buckets", "UPIT_STATUS_BAD_MAGIC = 10"] {
        assert!(h.contains(f), "{f} missing from header");
    }
}
