//! C ABI for `mmvc`.
//!
//! Every function returns an [`MmvcStatus`]. On failure the message is kept in
//! thread-local storage and read with [`mmvc_last_error`]. Handles are opaque
//! and owned by the caller until passed to their `*_free` function. Strings
//! returned through `char**` are released with [`mmvc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmvc::config::{Preset, RunConfig};
use mmvc::deflation::{calibration_images, recalibrate, Method};
use mmvc::encoders::text::{TokenSeq, SEQ_LEN};
use mmvc::encoders::{AudioWave, VideoClip};
use mmvc::eval::{run_task, Task};
use mmvc::graph::{Modality, Space};
use mmvc::model::{audio_features, embed_features, image_features, text_features, video_features, Model};
use mmvc::train::{load_model, model_checkpoint, train};
use mmvc::{Error, Tensor};

/// Result code of every call. `Ok` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmvcStatus {
    Ok = 0,
    NullPointer = 1,
    Utf8 = 2,
    InvalidArgument = 3,
    ShapeMismatch = 4,
    Config = 5,
    UnreachablePair = 6,
    UnreachableTask = 7,
    SpaceMismatch = 8,
    OutOfVocabulary = 9,
    NonFinite = 10,
    CorruptFile = 11,
    VersionMismatch = 12,
    Io = 13,
    BufferTooSmall = 14,
    Internal = 15,
    Panic = 16,
}

/// Embedding space selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmvcSpace {
    Va = 0,
    Vt = 1,
    Vat = 2,
}

impl From<MmvcSpace> for Space {
    fn from(s: MmvcSpace) -> Self {
        match s {
            MmvcSpace::Va => Space::Va,
            MmvcSpace::Vt => Space::Vt,
            MmvcSpace::Vat => Space::Vat,
        }
    }
}

/// Input sizes a model expects.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MmvcDims {
    pub d_v: usize,
    pub d_a: usize,
    pub d_t: usize,
    pub frames: usize,
    pub crop: usize,
    pub audio_samples: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
}

/// Held-out gaps of a deflation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MmvcDeflateReport {
    pub naive_gap: f64,
    pub gap: f64,
    pub epochs: usize,
}

/// A resolved run configuration.
pub struct MmvcConfig {
    cfg: RunConfig,
}

/// Model parameters together with the configuration that shaped them.
pub struct MmvcModel {
    cfg: RunConfig,
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MmvcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ShapeMismatch { .. } | Error::LossNotScalar(_) => MmvcStatus::ShapeMismatch,
            Error::NonFinite { .. } => MmvcStatus::NonFinite,
            Error::UnknownOp(_) | Error::LossNotOnTape => MmvcStatus::Internal,
            Error::InvalidArgument(_) => MmvcStatus::InvalidArgument,
            Error::UnreachablePair { .. } => MmvcStatus::UnreachablePair,
            Error::SpaceMismatch(..) => MmvcStatus::SpaceMismatch,
            Error::UnreachableTask { .. } => MmvcStatus::UnreachableTask,
            Error::OutOfVocabulary { .. } => MmvcStatus::OutOfVocabulary,
            Error::Config(_) => MmvcStatus::Config,
            Error::CorruptFile(_) => MmvcStatus::CorruptFile,
            Error::VersionMismatch { .. } => MmvcStatus::VersionMismatch,
            Error::Io(_) => MmvcStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn fail<T>(code: MmvcStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(code, msg.into()))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> MmvcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmvcStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            MmvcStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().map_or_else(|| fail(MmvcStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().map_or_else(|| fail(MmvcStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(MmvcStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(MmvcStatus::Utf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(MmvcStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s).map(CString::into_raw).or_else(|_| fail(MmvcStatus::Internal, "string contains a NUL byte"))
}

fn copy_embedding(z: &Tensor<f64>, out: *mut f32, out_len: usize) -> FfiResult<()> {
    let data = z.data();
    if out_len < data.len() {
        return fail(MmvcStatus::BufferTooSmall, format!("output holds {out_len} floats, embedding needs {}", data.len()));
    }
    if out.is_null() {
        return fail(MmvcStatus::NullPointer, "out is null");
    }
    let dst = unsafe { std::slice::from_raw_parts_mut(out, data.len()) };
    for (d, s) in dst.iter_mut().zip(data) {
        *d = *s as f32;
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn mmvc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmvc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mmvc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Resolve a configuration from an optional preset name, an optional TOML
/// document and `n_overrides` `key=value` strings.
///
/// # Safety
/// Non-null strings must be NUL-terminated; `overrides` must hold `n_overrides` pointers.
#[no_mangle]
pub unsafe extern "C" fn mmvc_config_new(
    preset: *const c_char,
    toml: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut MmvcConfig,
) -> MmvcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let preset = opt_str(preset, "preset")?.map(Preset::parse).transpose()?;
        let toml = opt_str(toml, "toml")?;
        let set = slice_arg(overrides, n_overrides, "overrides")?
            .iter()
            .map(|&p| str_arg(p, "override").map(String::from))
            .collect::<FfiResult<Vec<_>>>()?;
        let cfg = RunConfig::resolve(preset, toml, &set)?;
        *out = Box::into_raw(Box::new(MmvcConfig { cfg }));
        Ok(())
    })
}

/// The fully resolved configuration as TOML.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmvc_config_to_toml(cfg: *const MmvcConfig, out: *mut *mut c_char) -> MmvcStatus {
    guard(|| {
        let cfg = non_null(cfg, "cfg")?;
        let out = out_ptr(out, "out")?;
        *out = into_c_string(cfg.cfg.to_toml()?)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmvc_config_free(cfg: *mut MmvcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Freshly initialised model for `cfg`.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_new(cfg: *const MmvcConfig, seed: u64, out: *mut *mut MmvcModel) -> MmvcStatus {
    guard(|| {
        let cfg = &non_null(cfg, "cfg")?.cfg;
        let out = out_ptr(out, "out")?;
        let model = Model::new(cfg.model_config(), seed)?;
        *out = Box::into_raw(Box::new(MmvcModel { cfg: cfg.clone(), model }));
        Ok(())
    })
}

/// Train with `cfg`. Checkpoints and metrics go to `out_dir` when it is not null.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmvc_train(cfg: *const MmvcConfig, out_dir: *const c_char, out: *mut *mut MmvcModel) -> MmvcStatus {
    guard(|| {
        let cfg = &non_null(cfg, "cfg")?.cfg;
        let out = out_ptr(out, "out")?;
        let dir = opt_str(out_dir, "out_dir")?.map(Path::new);
        let outcome = train::<f32>(cfg, dir)?;
        *out = Box::into_raw(Box::new(MmvcModel {
            cfg: cfg.clone(),
            model: outcome.state.model,
        }));
        Ok(())
    })
}

/// Load the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_load(path: *const c_char, out: *mut *mut MmvcModel) -> MmvcStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        let (cfg, model) = load_model::<f32>(path)?;
        *out = Box::into_raw(Box::new(MmvcModel { cfg, model }));
        Ok(())
    })
}

/// Write the model and its configuration to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_save(model: *const MmvcModel, path: *const c_char) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let path = str_arg(path, "path")?;
        model_checkpoint(&m.cfg, &m.model.params)?.save(path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_free(model: *mut MmvcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Backbone widths and input sizes.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_dims(model: *const MmvcModel, out: *mut MmvcDims) -> MmvcStatus {
    guard(|| {
        let enc = non_null(model, "model")?.model.encoders();
        let out = out_ptr(out, "out")?;
        let (d_v, d_a, d_t) = enc.dims();
        *out = MmvcDims {
            d_v,
            d_a,
            d_t,
            frames: enc.frames,
            crop: enc.crop,
            audio_samples: enc.audio_samples(),
            seq_len: SEQ_LEN,
            vocab_size: enc.vocab_size,
        };
        Ok(())
    })
}

/// Width of `space`. Fails when the model's graph has no such space.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_space_dim(model: *const MmvcModel, space: MmvcSpace, out: *mut usize) -> MmvcStatus {
    guard(|| {
        let graph = non_null(model, "model")?.model.graph();
        let out = out_ptr(out, "out")?;
        let s = Space::from(space);
        // Video reaches every space a graph has.
        graph.check(Modality::Video, s)?;
        *out = graph.space_dim(s);
        Ok(())
    })
}

fn embed(m: &MmvcModel, feats: Tensor<f64>, modality: Modality, space: MmvcSpace, out: *mut f32, out_len: usize) -> FfiResult<()> {
    let z = embed_features(&m.model, &feats, modality, space.into())?;
    copy_embedding(&z, out, out_len)
}

/// Embed one clip of `t` RGB frames, `h x w x 3` row-major floats in `[0, 1]`.
///
/// # Safety
/// `model` must be a live handle; `frames` must hold `t*h*w*3` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_embed_video(
    model: *const MmvcModel,
    frames: *const f32,
    t: usize,
    h: usize,
    w: usize,
    space: MmvcSpace,
    out: *mut f32,
    out_len: usize,
) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let data = slice_arg(frames, t * h * w * 3, "frames")?;
        let clip = VideoClip::new(Tensor::new([t, h, w, 3], data.to_vec())?, m.model.encoders().fps as f32)?;
        embed(m, video_features(&m.model, &[&clip])?, Modality::Video, space, out, out_len)
    })
}

/// Embed one still image, `h x w x 3` row-major floats in `[0, 1]`.
/// Meant for models returned by [`mmvc_model_deflate`].
///
/// # Safety
/// `model` must be a live handle; `pixels` must hold `h*w*3` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_embed_image(
    model: *const MmvcModel,
    pixels: *const f32,
    h: usize,
    w: usize,
    space: MmvcSpace,
    out: *mut f32,
    out_len: usize,
) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let data = slice_arg(pixels, h * w * 3, "pixels")?;
        let image = Tensor::new([h, w, 3], data.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        embed(m, image_features(&m.model, &[image])?, Modality::Video, space, out, out_len)
    })
}

/// Embed one mono waveform at the model's sample rate.
///
/// # Safety
/// `model` must be a live handle; `samples` must hold `n` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_embed_audio(
    model: *const MmvcModel,
    samples: *const f32,
    n: usize,
    space: MmvcSpace,
    out: *mut f32,
    out_len: usize,
) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let wave = AudioWave {
            samples: slice_arg(samples, n, "samples")?.to_vec(),
            sample_rate: m.model.encoders().sample_rate as f32,
        };
        embed(m, audio_features(&m.model, &[&wave])?, Modality::Audio, space, out, out_len)
    })
}

/// Embed one token sequence. Longer inputs are truncated, shorter ones padded.
///
/// # Safety
/// `model` must be a live handle; `ids` must hold `n` ids and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_embed_text(
    model: *const MmvcModel,
    ids: *const u32,
    n: usize,
    space: MmvcSpace,
    out: *mut f32,
    out_len: usize,
) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let seq = TokenSeq::new(slice_arg(ids, n, "ids")?);
        seq.check_vocab(m.model.encoders().vocab_size)?;
        embed(m, text_features(&m.model, &[&seq])?, Modality::Text, space, out, out_len)
    })
}

/// Run an evaluation task (`probe-video`, `retrieval-t2v`, ...) and return its CSV report.
///
/// # Safety
/// `model` must be a live handle; `task` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmvc_eval(model: *const MmvcModel, task: *const c_char, out_csv: *mut *mut c_char) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let task = Task::parse(str_arg(task, "task")?)?;
        let out = out_ptr(out_csv, "out_csv")?;
        *out = into_c_string(run_task(&m.model, &m.cfg, task)?.to_csv())?;
        Ok(())
    })
}

/// Turn the video network into an image network, calibrated on `n_images`
/// synthetic frames. `recalibrated` selects the trained correction over plain
/// temporal summation.
///
/// # Safety
/// `model` must be a live handle; `report` may be null.
#[no_mangle]
pub unsafe extern "C" fn mmvc_model_deflate(
    model: *const MmvcModel,
    recalibrated: bool,
    n_images: usize,
    out: *mut *mut MmvcModel,
    report: *mut MmvcDeflateReport,
) -> MmvcStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let out = out_ptr(out, "out")?;
        let mut cfg = m.cfg.clone();
        cfg.deflate.method = if recalibrated { Method::Recalibrated } else { Method::Naive };
        let (images, _) = calibration_images(&cfg, n_images)?;
        let result = recalibrate(&m.model, &images, &cfg.deflate, cfg.seed)?;
        if let Some(r) = report.as_mut() {
            *r = MmvcDeflateReport {
                naive_gap: result.naive_gap,
                gap: result.gap,
                epochs: result.history.len(),
            };
        }
        *out = Box::into_raw(Box::new(MmvcModel { cfg, model: result.model }));
        Ok(())
    })
}
