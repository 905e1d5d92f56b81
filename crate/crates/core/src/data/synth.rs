//! Deterministic world of class-coded moving shapes, harmonic tones and narrations.
//!
//! Class `c` fixes an object hue, a shape, a motion direction, a fundamental
//! frequency and a block of keyword tokens. Everything else (position,
//! speed, background, detuning, phase, filler words) is per-sample noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::hsv_to_rgb;
use super::MultimodalSample;
use crate::encoders::{AudioWave, TokenSeq, VideoClip, SEQ_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

defaults! {
    d_classes: usize = 8;
    d_frames: usize = 8;
    d_size: usize = 32;
    d_fps: f64 = 10.0;
    d_radius: f64 = 5.0;
    d_speed: (f64, f64) = (1.0, 2.0);
    d_hue_jitter: f64 = 0.03;
    d_pixel_noise: f64 = 0.03;
    d_sample_rate: f64 = 8000.0;
    d_audio_secs: f64 = 1.0;
    d_base_freq: f64 = 200.0;
    d_freq_ratio: f64 = 1.25;
    d_harmonics: usize = 3;
    d_detune: f64 = 0.02;
    d_snr_db: f64 = 10.0;
    d_vocab: usize = 64;
    d_keywords: usize = 6;
    d_words: (usize, usize) = (6, 16);
    d_keyword_prob: f64 = 0.5;
    d_p_mis: f64 = 0.25;
    d_k: usize = 3;
    d_related: f64 = 0.5;
    d_rho: f64 = 0.5;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_size")]
    pub height: usize,
    #[serde(default = "d_size")]
    pub width: usize,
    #[serde(default = "d_fps")]
    pub fps: f64,
    /// Object radius in pixels.
    #[serde(default = "d_radius")]
    pub radius: f64,
    /// Speed range in pixels per frame.
    #[serde(default = "d_speed")]
    pub speed: (f64, f64),
    #[serde(default = "d_hue_jitter")]
    pub hue_jitter: f64,
    #[serde(default = "d_pixel_noise")]
    pub pixel_noise: f64,
    #[serde(default = "d_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "d_audio_secs")]
    pub audio_secs: f64,
    /// Fundamental of class 0; class `c` uses `base_freq * freq_ratio^c`.
    #[serde(default = "d_base_freq")]
    pub base_freq: f64,
    #[serde(default = "d_freq_ratio")]
    pub freq_ratio: f64,
    #[serde(default = "d_harmonics")]
    pub harmonics: usize,
    /// Relative per-sample detuning of the fundamental.
    #[serde(default = "d_detune")]
    pub detune: f64,
    #[serde(default = "d_snr_db")]
    pub snr_db: f64,
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_keywords")]
    pub keywords_per_class: usize,
    /// Inclusive range of narration lengths before padding.
    #[serde(default = "d_words")]
    pub words: (usize, usize),
    #[serde(default = "d_keyword_prob")]
    pub keyword_prob: f64,
    /// Probability that no candidate narration matches the clip.
    #[serde(default = "d_p_mis")]
    pub p_mis: f64,
    /// Size of the candidate window `P(x)`.
    #[serde(default = "d_k")]
    pub k: usize,
    /// Probability that a neighbouring narration shares the clip's class.
    #[serde(default = "d_related")]
    pub related_prob: f64,
    /// Fraction of samples without text.
    #[serde(default = "d_rho")]
    pub rho: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !prob(self.p_mis) || !prob(self.rho) || !prob(self.keyword_prob) || !prob(self.related_prob) {
            return bad("p_mis, rho, keyword_prob and related_prob must lie in [0, 1]".into());
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.k == 0 {
            return bad("frames, height, width and k must be positive".into());
        }
        if self.words.0 == 0 || self.words.0 > self.words.1 || self.words.1 > SEQ_LEN {
            return bad(format!("words range {:?} must satisfy 1 <= lo <= hi <= {SEQ_LEN}", self.words));
        }
        if self.keywords_per_class == 0 || self.vocab_size < 2 + self.num_classes * self.keywords_per_class {
            return bad(format!(
                "vocab_size {} too small for {} classes x {} keywords plus pad and filler",
                self.vocab_size, self.num_classes, self.keywords_per_class
            ));
        }
        if !(self.sample_rate > 0.0 && self.audio_secs > 0.0 && self.base_freq > 0.0 && self.freq_ratio > 0.0) {
            return bad("audio rates and frequencies must be positive".into());
        }
        let top = self.class_freq(self.num_classes - 1) * (1.0 + self.detune) * self.harmonics.max(1) as f64;
        if top >= self.sample_rate / 2.0 {
            return bad(format!("highest harmonic {top:.0} Hz exceeds Nyquist"));
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return bad(format!("speed range {:?} is invalid", self.speed));
        }
        Ok(())
    }

    pub fn class_freq(&self, c: usize) -> f64 {
        self.base_freq * self.freq_ratio.powi(c as i32)
    }

    pub fn class_hue(&self, c: usize) -> f64 {
        c as f64 / self.num_classes as f64
    }

    /// Motion direction in radians; spaced so neighbouring hues move differently.
    pub fn class_direction(&self, c: usize) -> f64 {
        let steps = (c * 3) % self.num_classes;
        2.0 * std::f64::consts::PI * steps as f64 / self.num_classes as f64
    }

    pub fn class_shape(&self, c: usize) -> usize {
        c % 4
    }

    pub fn keywords(&self, c: usize) -> std::ops::Range<u32> {
        let start = 1 + c * self.keywords_per_class;
        start as u32..(start + self.keywords_per_class) as u32
    }

    pub fn fillers(&self) -> std::ops::Range<u32> {
        (1 + self.num_classes * self.keywords_per_class) as u32..self.vocab_size as u32
    }

    pub fn audio_samples(&self) -> usize {
        (self.sample_rate * self.audio_secs).round() as usize
    }
}

/// The rng for sample `index`: one ChaCha stream per sample.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample `index` of the stream for `(spec, seed)`.
pub fn generate_sample(spec: &WorldSpec, seed: u64, index: u64) -> Result<MultimodalSample> {
    generate_sized(spec, seed, index, spec.frames, spec.audio_samples())
}

/// Like [`generate_sample`] but with explicit video and audio lengths.
pub fn generate_sized(spec: &WorldSpec, seed: u64, index: u64, frames: usize, audio_len: usize) -> Result<MultimodalSample> {
    spec.validate()?;
    let mut rng = sample_rng(seed, index);
    let label = rng.gen_range(0..spec.num_classes);
    let video = render_video(spec, label, frames, &mut rng)?;
    let audio = render_audio(spec, label, audio_len, &mut rng);
    let aligned = narration(spec, label, &mut rng);
    let text = candidates(spec, label, &aligned, &mut rng);
    let keep_text = rng.gen::<f64>() >= spec.rho;
    Ok(MultimodalSample {
        video: Some(video),
        audio: Some(audio),
        text: keep_text.then_some(text),
        aligned,
        label,
    })
}

/// The first `n` samples of the stream for `(spec, seed)`.
pub fn generate(spec: &WorldSpec, seed: u64, n: usize) -> Result<Vec<MultimodalSample>> {
    (0..n as u64).map(|i| generate_sample(spec, seed, i)).collect()
}

fn coverage(shape: usize, dx: f64, dy: f64, r: f64) -> f64 {
    let d = match shape {
        0 => dx.abs().max(dy.abs()) - 0.85 * r,
        1 => (dx * dx + dy * dy).sqrt() - r,
        2 => (dx.abs() + dy.abs()) / std::f64::consts::SQRT_2 - 0.8 * r,
        _ => ((dx / 1.6).powi(2) + (dy / 0.55).powi(2)).sqrt() - r,
    };
    (0.5 - d).clamp(0.0, 1.0)
}

fn render_video(spec: &WorldSpec, c: usize, frames: usize, rng: &mut ChaCha8Rng) -> Result<VideoClip> {
    let (h, w) = (spec.height, spec.width);
    let scale = h.min(w) as f64 / 32.0;
    let r = spec.radius * scale;
    let hue = (spec.class_hue(c) + rng.gen_range(-1.0..=1.0) * spec.hue_jitter).rem_euclid(1.0);
    let sat = rng.gen_range(0.7..0.95);
    let val = rng.gen_range(0.75..1.0);
    let obj = hsv_to_rgb(hue, sat, val);
    let bg_level = rng.gen_range(0.05..0.3);
    let bg = [bg_level, bg_level, bg_level];
    let angle = spec.class_direction(c);
    let speed = rng.gen_range(spec.speed.0..=spec.speed.1) * scale;
    let (vx, vy) = (angle.cos() * speed, angle.sin() * speed);
    // The trajectory passes near the centre at the middle frame.
    let mid = (frames as f64 - 1.0) / 2.0;
    let cx0 = w as f64 / 2.0 + rng.gen_range(-3.0..=3.0) * scale - vx * mid;
    let cy0 = h as f64 / 2.0 + rng.gen_range(-3.0..=3.0) * scale - vy * mid;
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let shape = spec.class_shape(c);

    let mut data = Vec::with_capacity(frames * h * w * 3);
    for t in 0..frames {
        let (cx, cy) = (cx0 + vx * t as f64, cy0 + vy * t as f64);
        for y in 0..h {
            for x in 0..w {
                let a = coverage(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                for ch in 0..3 {
                    let v = a * obj[ch] + (1.0 - a) * bg[ch] + noise.sample(rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    VideoClip::new(Tensor::new([frames, h, w, 3], data)?, spec.fps as f32)
}

fn render_audio(spec: &WorldSpec, c: usize, len: usize, rng: &mut ChaCha8Rng) -> AudioWave {
    let f0 = spec.class_freq(c) * (1.0 + rng.gen_range(-1.0..=1.0) * spec.detune);
    let amp = rng.gen_range(0.3..0.6);
    let sr = spec.sample_rate;
    let mut out = vec![0.0f64; len];
    for hmn in 1..=spec.harmonics {
        let a = amp / hmn as f64;
        let step = 2.0 * std::f64::consts::PI * f0 * hmn as f64 / sr;
        let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        // Rotating phasor instead of a sin() call per sample.
        let (sr_, si_) = (step.cos(), step.sin());
        let (mut re, mut im) = (phase.cos(), phase.sin());
        for o in out.iter_mut() {
            *o += a * im;
            let nr = re * sr_ - im * si_;
            im = re * si_ + im * sr_;
            re = nr;
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let std = rms / 10f64.powf(spec.snr_db / 20.0);
    if std > 0.0 {
        let noise = Normal::new(0.0, std).expect("positive std");
        for o in out.iter_mut() {
            *o += noise.sample(rng);
        }
    }
    AudioWave {
        samples: out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
        sample_rate: sr as f32,
    }
}

fn narration(spec: &WorldSpec, c: usize, rng: &mut ChaCha8Rng) -> TokenSeq {
    let n = rng.gen_range(spec.words.0..=spec.words.1);
    let kw = spec.keywords(c);
    let fill = spec.fillers();
    let mut ids: Vec<u32> = (0..n)
        .map(|i| {
            if i == 0 || fill.is_empty() || rng.gen::<f64>() < spec.keyword_prob {
                rng.gen_range(kw.clone())
            } else {
                rng.gen_range(fill.clone())
            }
        })
        .collect();
    // The guaranteed keyword should not always sit in the first slot.
    let j = rng.gen_range(0..n);
    ids.swap(0, j);
    TokenSeq::new(&ids)
}

fn other_class(spec: &WorldSpec, c: usize, rng: &mut ChaCha8Rng) -> usize {
    let o = rng.gen_range(0..spec.num_classes - 1);
    if o >= c {
        o + 1
    } else {
        o
    }
}

fn candidates(spec: &WorldSpec, c: usize, aligned: &TokenSeq, rng: &mut ChaCha8Rng) -> Vec<TokenSeq> {
    let misaligned = rng.gen::<f64>() < spec.p_mis;
    let slot = rng.gen_range(0..spec.k);
    (0..spec.k)
        .map(|i| {
            if misaligned {
                let o = other_class(spec, c, rng);
                narration(spec, o, rng)
            } else if i == slot {
                aligned.clone()
            } else {
                let related = rng.gen::<f64>() < spec.related_prob;
                let cls = if related { c } else { other_class(spec, c, rng) };
                narration(spec, cls, rng)
            }
        })
        .collect()
}
