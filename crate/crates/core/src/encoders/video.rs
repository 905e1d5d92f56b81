//! Miniature video backbones.
//!
//! `conv3d-mini`: `conv3d -> BN -> ReLU` blocks with stride-2 spatial
//! downsampling, then spatiotemporal average pooling.
//! `shift-mini`: residual conv2d blocks applied per frame, with a temporal
//! channel shift at the entry of each block's residual branch.

use rand::Rng;

use super::{EncoderConfig, VideoArch, VideoClip};
use crate::autodiff::{Padding, ShiftConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Forward, Mode, PoolKind};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Output channels of every block.
pub fn block_widths(cfg: &EncoderConfig) -> Vec<usize> {
    let mut w = cfg.video_widths.clone();
    w.push(cfg.d_v);
    w
}

pub fn block_prefix(i: usize) -> String {
    format!("video.b{i}")
}

pub fn init<F: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore<F>, rng: &mut R) {
    let mut cin = 3;
    for (i, &cout) in block_widths(cfg).iter().enumerate() {
        let p = block_prefix(i);
        match cfg.video_arch {
            VideoArch::Conv3dMini => {
                nn::init_conv3d(store, &format!("{p}.conv"), [cfg.video_kt, 3, 3, cin, cout], rng);
                if cfg.video_bn {
                    store.remove(&format!("{p}.conv.bias"));
                    nn::init_batch_norm(store, &format!("{p}.bn"), cout);
                }
            }
            VideoArch::ShiftMini => {
                nn::init_conv2d(store, &format!("{p}.conv1"), [3, 3, cin, cout], rng);
                nn::init_conv2d(store, &format!("{p}.conv2"), [3, 3, cout, cout], rng);
                nn::init_conv2d(store, &format!("{p}.skip"), [1, 1, cin, cout], rng);
                if cfg.video_bn {
                    store.remove(&format!("{p}.conv1.bias"));
                    store.remove(&format!("{p}.conv2.bias"));
                    nn::init_batch_norm(store, &format!("{p}.bn1"), cout);
                    nn::init_batch_norm(store, &format!("{p}.bn2"), cout);
                }
            }
        }
        cin = cout;
    }
}

fn conv_bias<F: Scalar>(fwd: &mut Forward<'_, '_, F>, name: &str) -> Result<Option<Var>> {
    let key = format!("{name}.bias");
    if fwd.store.contains(&key) {
        Ok(Some(fwd.param(&key)?))
    } else {
        Ok(None)
    }
}

fn bn_relu<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, bn: &str, x: Var, relu: bool) -> Result<Var> {
    let y = if cfg.video_bn { fwd.batch_norm(bn, x)? } else { x };
    if relu {
        fwd.tape.relu(y)
    } else {
        Ok(y)
    }
}

/// `f_v` on `[N, T, H, W, 3]`, returning `[N, d_v]`.
pub fn forward<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    forward_with_shift(fwd, cfg, x, cfg.shift)
}

pub fn forward_with_shift<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, x: Var, shift: ShiftConfig) -> Result<Var> {
    let s = fwd.tape.shape(x).to_vec();
    if s.len() != 5 || s[4] != 3 {
        return Err(Error::shape("video encoder", format!("expected [N, T, H, W, 3], got {s:?}")));
    }
    let mut h = x;
    for i in 0..block_widths(cfg).len() {
        let p = block_prefix(i);
        h = match cfg.video_arch {
            VideoArch::Conv3dMini => {
                let w = fwd.param(&format!("{p}.conv.weight"))?;
                let b = conv_bias(fwd, &format!("{p}.conv"))?;
                let y = fwd.tape.conv3d(h, w, b, (2, 2), cfg.temporal_padding, Padding::Zero)?;
                bn_relu(fwd, cfg, &format!("{p}.bn"), y, true)?
            }
            VideoArch::ShiftMini => shift_block(fwd, cfg, &p, h, shift)?,
        };
    }
    nn::pool_var(fwd.tape, h, PoolKind::SpatiotemporalAvg)
}

fn shift_block<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, p: &str, x: Var, shift: ShiftConfig) -> Result<Var> {
    let s = fwd.tape.shape(x).to_vec();
    let (n, t) = (s[0], s[1]);
    let shifted = fwd.tape.temporal_shift(x, shift)?;
    let frames = fwd.tape.reshape(shifted, &[n * t, s[2], s[3], s[4]])?;

    let w1 = fwd.param(&format!("{p}.conv1.weight"))?;
    let b1 = conv_bias(fwd, &format!("{p}.conv1"))?;
    let a = fwd.tape.conv2d(frames, w1, b1, (2, 2), Padding::Zero)?;
    let a = bn_relu(fwd, cfg, &format!("{p}.bn1"), a, true)?;
    let w2 = fwd.param(&format!("{p}.conv2.weight"))?;
    let b2 = conv_bias(fwd, &format!("{p}.conv2"))?;
    let a = fwd.tape.conv2d(a, w2, b2, (1, 1), Padding::Zero)?;
    let a = bn_relu(fwd, cfg, &format!("{p}.bn2"), a, false)?;

    let plain = fwd.tape.reshape(x, &[n * t, s[2], s[3], s[4]])?;
    let skip = fwd.conv2d(&format!("{p}.skip"), plain, (2, 2), Padding::Zero)?;
    let y = fwd.tape.add(a, skip)?;
    let y = fwd.tape.relu(y)?;
    let ys = fwd.tape.shape(y).to_vec();
    fwd.tape.reshape(y, &[n, t, ys[1], ys[2], ys[3]])
}

/// Image path of a deflated network on `[N, H, W, 3]`.
///
/// For `conv3d-mini` the store must hold 2D filters `[K_h, K_w, C_in, C_out]`;
/// for `shift-mini` the frames run through the video path with `T = 1` and
/// the shift disabled.
pub fn forward_image<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let s = fwd.tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("image encoder", format!("expected [N, H, W, 3], got {s:?}")));
    }
    match cfg.video_arch {
        VideoArch::Conv3dMini => {
            let mut h = x;
            for i in 0..block_widths(cfg).len() {
                let p = block_prefix(i);
                let w = fwd.param(&format!("{p}.conv.weight"))?;
                if fwd.tape.shape(w).len() != 4 {
                    return Err(Error::shape("image encoder", format!("{p}.conv.weight is not a 2D filter")));
                }
                let b = conv_bias(fwd, &format!("{p}.conv"))?;
                let y = fwd.tape.conv2d(h, w, b, (2, 2), Padding::Zero)?;
                h = bn_relu(fwd, cfg, &format!("{p}.bn"), y, true)?;
            }
            nn::pool_var(fwd.tape, h, PoolKind::SpatialAvg)
        }
        VideoArch::ShiftMini => {
            let clip = fwd.tape.reshape(x, &[s[0], 1, s[1], s[2], s[3]])?;
            let off = ShiftConfig {
                enabled: false,
                ..cfg.shift
            };
            forward_with_shift(fwd, cfg, clip, off)
        }
    }
}

/// Stack clips into `[N, T, H, W, 3]`.
pub fn clips_to_tensor<F: Scalar>(clips: &[&VideoClip]) -> Result<Tensor<F>> {
    let frames: Vec<Tensor<F>> = clips.iter().map(|c| c.frames.cast()).collect();
    Tensor::stack(&frames)
}

fn check_clip(cfg: &EncoderConfig, clip: &VideoClip) -> Result<()> {
    let s = clip.frames.shape();
    if s[0] != cfg.frames || s[1] != cfg.crop || s[2] != cfg.crop {
        return Err(Error::shape(
            "encode_video",
            format!("clip {s:?} does not match [{}, {}, {}, 3]", cfg.frames, cfg.crop, cfg.crop),
        ));
    }
    Ok(())
}

/// Eval-mode `f_v(x_v)` for one clip.
pub fn encode_video<F: Scalar>(clip: &VideoClip, cfg: &EncoderConfig, store: &ParamStore<F>) -> Result<Tensor<F>> {
    check_clip(cfg, clip)?;
    let out = encode_batch(&[clip], cfg, store)?;
    out.index_outer(0)
}

/// Eval-mode `f_v` for a batch of clips, `[N, d_v]`.
pub fn encode_batch<F: Scalar>(clips: &[&VideoClip], cfg: &EncoderConfig, store: &ParamStore<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let mut fwd = Forward::new(&mut tape, store, Mode::Eval);
    let x = fwd.tape.constant(clips_to_tensor(clips)?);
    let y = forward(&mut fwd, cfg, x)?;
    Ok(tape.value(y).clone())
}
