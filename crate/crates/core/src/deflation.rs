//! Turning a trained video network into an image network.
//!
//! `conv3d-mini` filters are summed over time; `shift-mini` simply runs
//! without its channel shift. Batch-norm `gamma` / `beta` can then be refit
//! so that the image network reproduces the video network's output on
//! static videos (one image repeated `T` times).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::encoders::{video, VideoArch, VideoClip};
use crate::error::{Error, Result};
use crate::eval::{eval_samples, EVAL_BASE};
use crate::graph::Modality;
use crate::model::{image_features, video_features, Model};
use crate::nn::{Conv3dFilter, Forward, Mode};
use crate::params::{is_bn_affine, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::train::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Recalibrated,
}

/// Where the calibration loss compares the two networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cut {
    /// Backbone output `f_v`.
    Backbone,
    /// Unit embedding in the va space.
    Head,
}

fn method_default() -> Method {
    Method::Recalibrated
}
fn cut_default() -> Cut {
    Cut::Backbone
}
fn epochs_default() -> usize {
    100
}
fn lr_default() -> f64 {
    1e-2
}
fn decay_every_default() -> usize {
    30
}
fn decay_default() -> f64 {
    0.1
}
fn batch_default() -> usize {
    32
}
fn images_default() -> usize {
    512
}
fn holdout_default() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeflateConfig {
    #[serde(default = "method_default")]
    pub method: Method,
    #[serde(default = "cut_default")]
    pub cut: Cut,
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default = "lr_default")]
    pub lr: f64,
    /// The learning rate is multiplied by `decay` every `decay_every` epochs.
    #[serde(default = "decay_every_default")]
    pub decay_every: usize,
    #[serde(default = "decay_default")]
    pub decay: f64,
    #[serde(default = "batch_default")]
    pub batch_size: usize,
    /// Generated calibration images when none are supplied.
    #[serde(default = "images_default")]
    pub calibration_images: usize,
    /// Fraction of calibration images held out to measure the gap.
    #[serde(default = "holdout_default")]
    pub holdout_frac: f64,
    /// Length of the static videos used as targets; 0 uses the encoder clip length.
    #[serde(default)]
    pub static_frames: usize,
}

impl Default for DeflateConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl DeflateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 || !(self.lr > 0.0) || !(self.decay > 0.0) {
            return Err(Error::Config("deflation batch_size, decay_every, lr and decay must be positive".into()));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::Config("holdout_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// `w'[h, w, i, o] = sum_t w[t, h, w, i, o]`.
pub fn deflate_weights<F: Scalar>(w: &Tensor<F>) -> Result<Tensor<F>> {
    if w.rank() != 5 {
        return Err(Error::shape("deflate_weights", format!("expected a 5-D filter, got {:?}", w.shape())));
    }
    let kt = w.shape()[0];
    let slice = w.numel() / kt;
    let mut out = vec![F::zero(); slice];
    for t in 0..kt {
        for (o, &v) in out.iter_mut().zip(&w.data()[t * slice..(t + 1) * slice]) {
            *o += v;
        }
    }
    Tensor::new(w.shape()[1..].to_vec(), out)
}

/// Temporal summation of a filter; the bias is kept.
pub fn deflate_filter<F: Scalar>(f: &Conv3dFilter<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    Ok((deflate_weights(&f.weights)?, f.bias.clone()))
}

/// Parameters of the image network derived from a video network.
///
/// `conv3d-mini` conv weights are summed over time. `shift-mini` weights are
/// reused unchanged: the image path never shifts channels.
pub fn deflate_params<F: Scalar>(model: &Model<F>) -> Result<ParamStore<F>> {
    let mut out = model.params.clone();
    if model.encoders().video_arch == VideoArch::Conv3dMini {
        for i in 0..video::block_widths(model.encoders()).len() {
            let name = format!("{}.conv.weight", video::block_prefix(i));
            let w = model.params.get(&name)?;
            out.insert(name, deflate_weights(w)?);
        }
    }
    Ok(out)
}

/// Image network with the same configuration as `model`.
pub fn deflate<F: Scalar>(model: &Model<F>) -> Result<Model<F>> {
    let params = deflate_params(model)?;
    Ok(Model {
        cfg: model.cfg.clone(),
        params,
        mel: model.mel.clone(),
    })
}

/// `image` repeated `frames` times.
pub fn static_video(image: &Tensor<f32>, frames: usize, fps: f32) -> Result<VideoClip> {
    if image.rank() != 3 || frames == 0 {
        return Err(Error::shape("static_video", format!("image {:?}, {frames} frames", image.shape())));
    }
    VideoClip::new(Tensor::stack(&vec![image.clone(); frames])?, fps)
}

fn head_embed<F: Scalar>(model: &Model<F>, feats: Tensor<f64>, cut: Cut) -> Result<Tensor<f64>> {
    match cut {
        Cut::Backbone => Ok(feats),
        Cut::Head => {
            let s = model.graph().va_space();
            crate::model::embed_features(model, &feats, Modality::Video, s)
        }
    }
}

/// Source-network outputs on static videos of `images`.
pub fn static_targets<F: Scalar>(source: &Model<F>, images: &[Tensor<f32>], frames: usize, cut: Cut) -> Result<Tensor<f64>> {
    let clips = images
        .iter()
        .map(|im| static_video(im, frames, source.encoders().fps as f32))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&VideoClip> = clips.iter().collect();
    head_embed(source, video_features(source, &refs)?, cut)
}

/// Image-network outputs.
pub fn image_outputs<F: Scalar>(deflated: &Model<F>, images: &[Tensor<f32>], cut: Cut) -> Result<Tensor<f64>> {
    head_embed(deflated, image_features(deflated, images)?, cut)
}

/// Mean absolute difference over every coordinate.
pub fn l1_gap(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::shape("l1_gap", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64)
}

/// Outcome of a deflation run.
#[derive(Clone, Debug)]
pub struct Deflated<F: Scalar> {
    pub model: Model<F>,
    /// Held-out L1 gap of plain temporal summation.
    pub naive_gap: f64,
    /// Held-out L1 gap of the returned model: `naive_gap` for the naive method, and
    /// never above it for the recalibrated one.
    pub gap: f64,
    /// Training-split L1 per epoch (empty for the naive method).
    pub history: Vec<f64>,
}

/// Whether `name` is refit during recalibration.
pub fn is_recalibrated(name: &str) -> bool {
    name.starts_with("video.") && is_bn_affine(name)
}

/// Deflate `source` and, for the recalibrated method, refit the video
/// batch-norm `gamma` / `beta` under an L1 loss to static-video targets.
///
/// Batch norm stays in eval mode with the source's moving statistics; all
/// other parameters are untouched.
pub fn recalibrate<F: Scalar>(source: &Model<F>, images: &[Tensor<f32>], cfg: &DeflateConfig, seed: u64) -> Result<Deflated<F>> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::invalid("recalibration needs at least 2 calibration images"));
    }
    let frames = if cfg.static_frames == 0 { source.encoders().frames } else { cfg.static_frames };
    let n_hold = ((images.len() as f64 * cfg.holdout_frac).round() as usize).clamp(1, images.len() - 1);
    let (train_imgs, hold_imgs) = images.split_at(images.len() - n_hold);

    let mut model = deflate(source)?;
    let hold_target = static_targets(source, hold_imgs, frames, cfg.cut)?;
    let naive_gap = l1_gap(&image_outputs(&model, hold_imgs, cfg.cut)?, &hold_target)?;
    if cfg.method == Method::Naive {
        return Ok(Deflated {
            model,
            naive_gap,
            gap: naive_gap,
            history: Vec::new(),
        });
    }

    let targets = static_targets(source, train_imgs, frames, cfg.cut)?;
    let d = targets.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::<F>::new();
    let mut order: Vec<usize> = (0..train_imgs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<Tensor<F>> = chunk.iter().map(|&i| train_imgs[i].cast()).collect();
            let mut t = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                t.extend(targets.row(i).iter().map(|&v| F::from_f64_lossy(v)));
            }
            let mut tape = Tape::new();
            tape.set_trainable(is_recalibrated);
            let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
            let xv = fwd.tape.constant(Tensor::stack(&x)?);
            let mut y = video::forward_image(&mut fwd, model.encoders(), xv)?;
            if cfg.cut == Cut::Head {
                y = model.graph().project(&mut fwd, y, Modality::Video, model.graph().va_space())?;
            }
            let tv = tape.constant(Tensor::new([chunk.len(), d], t)?);
            let diff = tape.sub(y, tv)?;
            let abs = tape.abs(diff)?;
            let loss = tape.mean(abs)?;
            total += tape.value(loss).item()?.to_f64_lossy() * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params, &grads, lr)?;
        }
        history.push(total / train_imgs.len() as f64);
    }
    let gap = l1_gap(&image_outputs(&model, hold_imgs, cfg.cut)?, &hold_target)?;
    if gap > naive_gap {
        // Already (near) exact: the fit only added optimizer noise, so keep plain summation.
        return Ok(Deflated {
            model: deflate(source)?,
            naive_gap,
            gap: naive_gap,
            history,
        });
    }
    Ok(Deflated {
        model,
        naive_gap,
        gap,
        history,
    })
}

/// Stream offset of generated calibration images, apart from probe and retrieval samples.
pub const CALIBRATION_OFFSET: u64 = 2 << 32;

/// Middle frame of each clip.
pub fn middle_frames(clips: &[&VideoClip]) -> Result<Vec<Tensor<f32>>> {
    clips.iter().map(|c| c.frames.index_outer(c.num_frames() / 2)).collect()
}

/// Generated calibration images with their labels.
pub fn calibration_images(cfg: &RunConfig, n: usize) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let samples = eval_samples(cfg, n, CALIBRATION_OFFSET)?;
    debug_assert!(CALIBRATION_OFFSET < EVAL_BASE);
    let clips: Vec<&VideoClip> = samples.iter().filter_map(|s| s.video.as_ref()).collect();
    Ok((middle_frames(&clips)?, samples.iter().map(|s| s.label).collect()))
}
