//! Training-time augmentation.
//!
//! Video order: temporal sampling, scale jitter, resize, random crop, flip,
//! colour jitter, clip to `[0, 1]`. One set of random parameters is drawn per
//! clip and shared by all its frames. Audio may receive Gaussian noise and,
//! as an ablation, a random offset against the video.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MultimodalSample;
use crate::encoders::{AudioWave, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum deltas / factor spreads of the colour jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    /// Hue rotation as a fraction of the colour wheel.
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            brightness: 32.0 / 255.0,
            saturation: 0.4,
            contrast: 0.4,
            hue: 0.2,
        }
    }
}

fn d_resize() -> usize {
    20
}
fn d_crop() -> usize {
    16
}
fn d_scale() -> (f64, f64) {
    (0.8, 1.2)
}
fn d_flip() -> f64 {
    0.5
}
fn d_true() -> bool {
    true
}
fn d_noise() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Frames kept by temporal sampling; 0 keeps all.
    #[serde(default)]
    pub clip_frames: usize,
    /// Base square size before scale jitter; 0 keeps the frame size.
    #[serde(default = "d_resize")]
    pub resize: usize,
    /// Square crop size; 0 disables cropping.
    #[serde(default = "d_crop")]
    pub crop: usize,
    /// Independent width / height scale factors are drawn from this range.
    #[serde(default = "d_scale")]
    pub scale_jitter: (f64, f64),
    #[serde(default = "d_flip")]
    pub flip_prob: f64,
    #[serde(default = "d_true")]
    pub color_jitter: bool,
    #[serde(default)]
    pub color: ColorJitter,
    /// Noise variance as a multiple of the clip's peak amplitude; 0 disables.
    #[serde(default = "d_noise")]
    pub audio_noise: f64,
    /// Ablation: maximum audio offset against the video, in seconds.
    #[serde(default)]
    pub temporal_offset_secs: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl AugmentConfig {
    /// Every stage off: [`augment`] returns its input unchanged.
    pub fn disabled() -> Self {
        AugmentConfig {
            clip_frames: 0,
            resize: 0,
            crop: 0,
            scale_jitter: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter: false,
            color: ColorJitter::default(),
            audio_noise: 0.0,
            temporal_offset_secs: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale_jitter {:?} must satisfy 0 < lo <= hi", self.scale_jitter)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        if self.audio_noise < 0.0 || self.temporal_offset_secs < 0.0 {
            return Err(Error::Config("audio_noise and temporal_offset_secs must be non-negative".into()));
        }
        if self.crop > 0 && self.resize > 0 && (self.resize as f64 * lo).round() < self.crop as f64 {
            return Err(Error::Config(format!(
                "crop {} is larger than the smallest jittered frame ({} x {lo})",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub(crate) fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d <= 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if mx <= 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

/// Bilinear resize of `[T, H, W, C]` with half-pixel centres.
pub fn resize(frames: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", format!("{s:?} -> {out_h}x{out_w}")));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(frames.clone());
    }
    let src = frames.data();
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| axis(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| axis(o, w, out_w)).collect();
    let mut out = Vec::with_capacity(t * out_h * out_w * c);
    for f in 0..t {
        let base = f * h * w * c;
        let px = |y: usize, x: usize, ch: usize| src[base + (y * w + x) * c + ch];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                    let bot = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::new([t, out_h, out_w, c], out)
}

/// Crop `[T, H, W, C]` to `size x size` at `(top, left)`.
pub fn crop(frames: &Tensor<f32>, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if top + size_h > h || left + size_w > w {
        return Err(Error::invalid(format!(
            "crop {size_h}x{size_w} at ({top}, {left}) exceeds a {h}x{w} frame"
        )));
    }
    let src = frames.data();
    let mut out = Vec::with_capacity(t * size_h * size_w * c);
    for f in 0..t {
        for y in top..top + size_h {
            let row = ((f * h + y) * w + left) * c;
            out.extend_from_slice(&src[row..row + size_w * c]);
        }
    }
    Tensor::new([t, size_h, size_w, c], out)
}

/// Mirror every frame left to right.
pub fn flip_horizontal(frames: &Tensor<f32>) -> Tensor<f32> {
    let s = frames.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = frames.data();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..t {
        for y in 0..h {
            for x in (0..w).rev() {
                let p = ((f * h + y) * w + x) * c;
                out.extend_from_slice(&src[p..p + c]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Apply one random colour jitter to a whole clip and clip to `[0, 1]`.
pub fn color_jitter<R: Rng + ?Sized>(frames: &Tensor<f32>, cj: &ColorJitter, rng: &mut R) -> Tensor<f32> {
    let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let bright = sym(rng, cj.brightness);
    let sat = 1.0 + sym(rng, cj.saturation);
    let con = 1.0 + sym(rng, cj.contrast);
    let hue = sym(rng, cj.hue);

    let n = frames.numel() / 3;
    let mut px: Vec<[f64; 3]> = frames
        .data()
        .chunks_exact(3)
        .map(|p| [p[0] as f64 + bright, p[1] as f64 + bright, p[2] as f64 + bright])
        .collect();
    for p in px.iter_mut() {
        let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for ch in p.iter_mut() {
            *ch = gray + sat * (*ch - gray);
        }
    }
    let mut mean = [0.0; 3];
    for p in &px {
        for ch in 0..3 {
            mean[ch] += p[ch] / n.max(1) as f64;
        }
    }
    for p in px.iter_mut() {
        for ch in 0..3 {
            p[ch] = mean[ch] + con * (p[ch] - mean[ch]);
        }
    }
    if hue != 0.0 {
        for p in px.iter_mut() {
            let clamped = [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)];
            let (h, s, v) = rgb_to_hsv(clamped);
            *p = hsv_to_rgb(h + hue, s, v);
        }
    }
    let data = px.iter().flat_map(|p| p.iter().map(|&v| v.clamp(0.0, 1.0) as f32)).collect();
    Tensor::new(frames.shape().to_vec(), data).expect("same shape")
}

/// Add Gaussian noise with variance `scale * max|x|`.
pub fn add_audio_noise<R: Rng + ?Sized>(wave: &AudioWave, scale: f64, rng: &mut R) -> AudioWave {
    let peak = wave.samples.iter().fold(0.0f32, |m, &v| m.max(v.abs())) as f64;
    let var = scale * peak;
    if var <= 0.0 {
        return wave.clone();
    }
    let noise = Normal::new(0.0, var.sqrt()).expect("positive std");
    AudioWave {
        samples: wave
            .samples
            .iter()
            .map(|&v| (v as f64 + noise.sample(rng)).clamp(-1.0, 1.0) as f32)
            .collect(),
        sample_rate: wave.sample_rate,
    }
}

/// Cut a `clip_len` window whose start is offset from centre by a uniform
/// amount in `[-max_offset, max_offset]` samples.
pub fn temporal_jitter<R: Rng + ?Sized>(wave: &AudioWave, clip_len: usize, max_offset: usize, rng: &mut R) -> Result<AudioWave> {
    let len = wave.samples.len();
    if clip_len == 0 || len < clip_len + 2 * max_offset {
        return Err(Error::invalid(format!(
            "audio of {len} samples cannot hold a {clip_len}-sample window offset by up to {max_offset}"
        )));
    }
    let centre = (len - clip_len) / 2;
    let offset = rng.gen_range(-(max_offset as i64)..=max_offset as i64);
    let start = (centre as i64 + offset) as usize;
    Ok(AudioWave {
        samples: wave.samples[start..start + clip_len].to_vec(),
        sample_rate: wave.sample_rate,
    })
}

/// Deterministic evaluation view: resize to `resize` (if non-zero) and centre-crop to `crop`.
pub fn center_view(clip: &VideoClip, resize_to: usize, crop_to: usize) -> Result<VideoClip> {
    let mut f = clip.frames.clone();
    if resize_to > 0 {
        f = resize(&f, resize_to, resize_to)?;
    }
    if crop_to > 0 {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        if crop_to > h || crop_to > w {
            return Err(Error::invalid(format!("crop {crop_to} larger than {h}x{w} frame")));
        }
        f = crop(&f, (h - crop_to) / 2, (w - crop_to) / 2, crop_to, crop_to)?;
    }
    VideoClip::new(f, clip.fps)
}

fn augment_video<R: Rng + ?Sized>(clip: &VideoClip, cfg: &AugmentConfig, rng: &mut R) -> Result<VideoClip> {
    let mut f = clip.frames.clone();
    let t = f.shape()[0];
    if cfg.clip_frames > 0 {
        if t < cfg.clip_frames {
            return Err(Error::invalid(format!("clip of {t} frames is shorter than {}", cfg.clip_frames)));
        }
        let start = rng.gen_range(0..=t - cfg.clip_frames);
        let frames: Vec<Tensor<f32>> = (start..start + cfg.clip_frames)
            .map(|i| f.index_outer(i))
            .collect::<Result<_>>()?;
        f = Tensor::stack(&frames)?;
    }
    let (lo, hi) = cfg.scale_jitter;
    let (sy, sx) = if lo == hi { (lo, lo) } else { (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)) };
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let (bh, bw) = if cfg.resize > 0 { (cfg.resize, cfg.resize) } else { (h, w) };
    let (th, tw) = (((bh as f64) * sy).round() as usize, ((bw as f64) * sx).round() as usize);
    f = resize(&f, th.max(1), tw.max(1))?;
    if cfg.crop > 0 {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        if cfg.crop > h || cfg.crop > w {
            return Err(Error::invalid(format!("crop {} larger than {h}x{w} frame", cfg.crop)));
        }
        let top = rng.gen_range(0..=h - cfg.crop);
        let left = rng.gen_range(0..=w - cfg.crop);
        f = crop(&f, top, left, cfg.crop, cfg.crop)?;
    }
    if cfg.flip_prob > 0.0 && rng.gen::<f64>() < cfg.flip_prob {
        f = flip_horizontal(&f);
    }
    if cfg.color_jitter {
        f = color_jitter(&f, &cfg.color, rng);
    }
    VideoClip::new(f, clip.fps)
}

/// Augment one sample. Labels and candidate narrations pass through untouched.
pub fn augment<R: Rng + ?Sized>(sample: &MultimodalSample, cfg: &AugmentConfig, rng: &mut R) -> Result<MultimodalSample> {
    let clip = sample
        .video
        .as_ref()
        .ok_or_else(|| Error::invalid("augmentation needs a video"))?;
    let video = augment_video(clip, cfg, rng)?;
    let audio = match &sample.audio {
        None => None,
        Some(a) => {
            let mut a = a.clone();
            if cfg.temporal_offset_secs > 0.0 {
                let max = (cfg.temporal_offset_secs * a.sample_rate as f64).round() as usize;
                let clip_len = a.samples.len().saturating_sub(2 * max);
                a = temporal_jitter(&a, clip_len, max, rng)?;
            }
            if cfg.audio_noise > 0.0 {
                a = add_audio_noise(&a, cfg.audio_noise, rng);
            }
            Some(a)
        }
    };
    Ok(MultimodalSample {
        video: Some(video),
        audio,
        text: sample.text.clone(),
        aligned: sample.aligned.clone(),
        label: sample.label,
    })
}
