//! The C ABI called from Rust: handles, status codes and error messages.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use mmvc_ffi::*;

fn last_error() -> String {
    let p = mmvc_last_error();
    assert!(!p.is_null(), "no error message recorded");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn config(preset: Option<&str>, toml: Option<&str>, set: &[&str]) -> (MmvcStatus, *mut MmvcConfig) {
    let preset = preset.map(|s| CString::new(s).unwrap());
    let toml = toml.map(|s| CString::new(s).unwrap());
    let owned: Vec<CString> = set.iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<*const c_char> = owned.iter().map(|s| s.as_ptr()).collect();
    let mut out = ptr::null_mut();
    let st = unsafe {
        mmvc_config_new(
            preset.as_ref().map_or(ptr::null(), |s| s.as_ptr()),
            toml.as_ref().map_or(ptr::null(), |s| s.as_ptr()),
            ptrs.as_ptr(),
            ptrs.len(),
            &mut out,
        )
    };
    (st, out)
}

const QUICK: [&str; 6] = [
    "schedule.total_steps=3",
    "schedule.warmup_steps=1",
    "train.batch_size=4",
    "eval.retrieval_items=8",
    "eval.probe_samples=32",
    "eval.probe.steps=10",
];

fn take_string(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { mmvc_string_free(p) };
    s
}

#[test]
fn config_round_trips_through_toml() {
    let (st, cfg) = config(Some("ht-like"), Some("seed = 7\n"), &["graph.topology=\"disjoint\""]);
    assert_eq!(st, MmvcStatus::Ok);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { mmvc_config_to_toml(cfg, &mut text) }, MmvcStatus::Ok);
    let text = take_string(text);
    assert!(text.contains("seed = 7") && text.contains("lambda_va = 0.1") && text.contains("disjoint"));
    unsafe { mmvc_config_free(cfg) };

    let (st, cfg) = config(None, None, &["graph.colour=1"]);
    assert_eq!(st, MmvcStatus::Config);
    assert!(cfg.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(config(Some("nope"), None, &[]).0, MmvcStatus::Config);
}

#[test]
fn null_and_non_utf8_arguments_are_rejected() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mmvc_config_to_toml(ptr::null(), &mut out) }, MmvcStatus::NullPointer);
    assert!(last_error().contains("cfg"));
    assert_eq!(unsafe { mmvc_model_load(ptr::null(), &mut ptr::null_mut()) }, MmvcStatus::NullPointer);
    let (_, cfg) = config(None, None, &[]);
    assert_eq!(unsafe { mmvc_model_new(cfg, 0, ptr::null_mut()) }, MmvcStatus::NullPointer);

    let bad = [0xffu8, 0xfe, 0];
    let st = unsafe { mmvc_config_new(bad.as_ptr().cast(), ptr::null(), ptr::null(), 0, &mut ptr::null_mut()) };
    assert_eq!(st, MmvcStatus::Utf8);
    let st = unsafe { mmvc_model_load(bad.as_ptr().cast(), &mut ptr::null_mut()) };
    assert_eq!(st, MmvcStatus::Utf8);

    // A success clears the previous message; freeing null is a no-op.
    let mut dims = MmvcDims::default();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mmvc_model_new(cfg, 0, &mut model) }, MmvcStatus::Ok);
    assert!(mmvc_last_error().is_null());
    assert_eq!(unsafe { mmvc_model_dims(model, &mut dims) }, MmvcStatus::Ok);
    unsafe {
        mmvc_model_free(model);
        mmvc_config_free(cfg);
        mmvc_model_free(ptr::null_mut());
        mmvc_config_free(ptr::null_mut());
        mmvc_string_free(ptr::null_mut());
    }
}

#[test]
fn embeddings_follow_the_graph() {
    let (_, cfg) = config(None, None, &["graph.topology=\"fac\""]);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mmvc_model_new(cfg, 1, &mut model) }, MmvcStatus::Ok);
    let mut dims = MmvcDims::default();
    unsafe { mmvc_model_dims(model, &mut dims) };
    assert_eq!(dims.seq_len, 16);
    let mut d_vat = 0;
    assert_eq!(unsafe { mmvc_model_space_dim(model, MmvcSpace::Vat, &mut d_vat) }, MmvcStatus::Ok);
    assert_eq!(unsafe { mmvc_model_space_dim(model, MmvcSpace::Vt, &mut d_vat) }, MmvcStatus::UnreachablePair);
    unsafe { mmvc_model_space_dim(model, MmvcSpace::Vat, &mut d_vat) };

    let (t, c) = (dims.frames, dims.crop);
    let frames: Vec<f32> = (0..t * c * c * 3).map(|i| (i % 7) as f32 / 7.0).collect();
    let mut z = vec![0f32; d_vat];
    let st = unsafe { mmvc_model_embed_video(model, frames.as_ptr(), t, c, c, MmvcSpace::Vat, z.as_mut_ptr(), z.len()) };
    assert_eq!(st, MmvcStatus::Ok, "{}", last_error());
    let norm: f32 = z.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");

    let wave: Vec<f32> = (0..dims.audio_samples).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
    let st = unsafe { mmvc_model_embed_audio(model, wave.as_ptr(), wave.len(), MmvcSpace::Vat, z.as_mut_ptr(), z.len()) };
    assert_eq!(st, MmvcStatus::Ok, "{}", last_error());

    let ids = [3u32, 4, 5];
    let st = unsafe { mmvc_model_embed_text(model, ids.as_ptr(), ids.len(), MmvcSpace::Vat, z.as_mut_ptr(), z.len()) };
    assert_eq!(st, MmvcStatus::Ok, "{}", last_error());
    // Text never reaches the audio-visual space.
    let st = unsafe { mmvc_model_embed_text(model, ids.as_ptr(), ids.len(), MmvcSpace::Va, z.as_mut_ptr(), z.len()) };
    assert_eq!(st, MmvcStatus::UnreachablePair);
    assert!(last_error().contains("cannot reach"));
    let oov = [dims.vocab_size as u32];
    let st = unsafe { mmvc_model_embed_text(model, oov.as_ptr(), 1, MmvcSpace::Vat, z.as_mut_ptr(), z.len()) };
    assert_eq!(st, MmvcStatus::OutOfVocabulary);
    let st = unsafe { mmvc_model_embed_text(model, ids.as_ptr(), ids.len(), MmvcSpace::Vat, z.as_mut_ptr(), d_vat - 1) };
    assert_eq!(st, MmvcStatus::BufferTooSmall);
    let st = unsafe { mmvc_model_embed_video(model, frames.as_ptr(), 0, c, c, MmvcSpace::Vat, z.as_mut_ptr(), z.len()) };
    assert_eq!(st, MmvcStatus::ShapeMismatch);
    unsafe {
        mmvc_model_free(model);
        mmvc_config_free(cfg);
    }
}

#[test]
fn train_save_load_eval_and_deflate() {
    let dir = tempfile::tempdir().unwrap();
    let (st, cfg) = config(None, None, &QUICK);
    assert_eq!(st, MmvcStatus::Ok, "{}", last_error());
    let run = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mmvc_train(cfg, run.as_ptr(), &mut model) }, MmvcStatus::Ok, "{}", last_error());
    assert!(dir.path().join("run/final.mmvc").exists());

    let path = CString::new(dir.path().join("copy.mmvc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmvc_model_save(model, path.as_ptr()) }, MmvcStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mmvc_model_load(path.as_ptr(), &mut loaded) }, MmvcStatus::Ok);

    let ids = [7u32, 8];
    let (mut a, mut b) = (vec![0f32; 64], vec![0f32; 64]);
    unsafe {
        mmvc_model_embed_text(model, ids.as_ptr(), 2, MmvcSpace::Vat, a.as_mut_ptr(), a.len());
        mmvc_model_embed_text(loaded, ids.as_ptr(), 2, MmvcSpace::Vat, b.as_mut_ptr(), b.len());
    }
    assert_eq!(a, b);

    let task = CString::new("retrieval-t2v").unwrap();
    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { mmvc_eval(loaded, task.as_ptr(), &mut csv) }, MmvcStatus::Ok, "{}", last_error());
    assert!(take_string(csv).contains("R@10,"));
    let task = CString::new("retrieval-v2x").unwrap();
    assert_eq!(unsafe { mmvc_eval(loaded, task.as_ptr(), &mut csv) }, MmvcStatus::Config);

    let mut image = ptr::null_mut();
    let mut report = MmvcDeflateReport::default();
    assert_eq!(unsafe { mmvc_model_deflate(loaded, false, 8, &mut image, &mut report) }, MmvcStatus::Ok, "{}", last_error());
    assert!(report.naive_gap > 0.0 && report.gap == report.naive_gap && report.epochs == 0);
    let mut dims = MmvcDims::default();
    unsafe { mmvc_model_dims(image, &mut dims) };
    let pixels = vec![0.5f32; dims.crop * dims.crop * 3];
    let st = unsafe { mmvc_model_embed_image(image, pixels.as_ptr(), dims.crop, dims.crop, MmvcSpace::Va, a.as_mut_ptr(), a.len()) };
    assert_eq!(st, MmvcStatus::Ok, "{}", last_error());

    let missing = CString::new(dir.path().join("none.mmvc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmvc_model_load(missing.as_ptr(), &mut ptr::null_mut()) }, MmvcStatus::Io);
    let junk = dir.path().join("junk.mmvc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mmvc_model_load(junk.as_ptr(), &mut ptr::null_mut()) }, MmvcStatus::CorruptFile);
    unsafe {
        mmvc_model_free(image);
        mmvc_model_free(loaded);
        mmvc_model_free(model);
        mmvc_config_free(cfg);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mmvc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
