//! Modality backbones `f_v`, `f_a`, `f_t`.

pub mod audio;
pub mod text;
pub mod video;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, ShiftConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub use audio::{log_mel, MelConfig, MelFrontend};
pub use text::{load_word_table, save_word_table, TokenSeq, PAD_ID, SEQ_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VideoArch {
    /// Stacked conv3d blocks, spatiotemporal average pool.
    Conv3dMini,
    /// Residual per-frame conv2d blocks with temporal channel shift.
    ShiftMini,
}

/// RGB frames `[T, H, W, 3]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: f32) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[0] == 0 || s[3] != 3 {
            return Err(Error::shape("video clip", format!("expected [T>=1, H, W, 3], got {s:?}")));
        }
        Ok(VideoClip {
            frames: frames.map(|v| v.clamp(0.0, 1.0)),
            fps,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Mono waveform in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioWave {
    pub samples: Vec<f32>,
    pub sample_rate: f32,
}

fn d_default() -> usize {
    64
}
fn frames_default() -> usize {
    8
}
fn crop_default() -> usize {
    16
}
fn widths_default() -> Vec<usize> {
    vec![8, 16, 32]
}
fn kt_default() -> usize {
    3
}
fn zero_pad() -> Padding {
    Padding::Zero
}
fn yes() -> bool {
    true
}
fn vocab_default() -> usize {
    64
}
fn word_dim_default() -> usize {
    32
}
fn sample_rate_default() -> f64 {
    8000.0
}
fn audio_secs_default() -> f64 {
    1.0
}
fn fps_default() -> f64 {
    10.0
}
fn arch_default() -> VideoArch {
    VideoArch::Conv3dMini
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "arch_default")]
    pub video_arch: VideoArch,
    /// Frames per training clip.
    #[serde(default = "frames_default")]
    pub frames: usize,
    /// Square spatial size of network input frames.
    #[serde(default = "crop_default")]
    pub crop: usize,
    /// Label only; synthetic motion is parameterised per frame.
    #[serde(default = "fps_default")]
    pub fps: f64,
    /// Widths of all but the last video block; the last block emits `d_v` channels.
    #[serde(default = "widths_default")]
    pub video_widths: Vec<usize>,
    #[serde(default = "kt_default")]
    pub video_kt: usize,
    #[serde(default = "zero_pad")]
    pub temporal_padding: Padding,
    #[serde(default = "yes")]
    pub video_bn: bool,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default = "d_default")]
    pub d_v: usize,

    #[serde(default = "sample_rate_default")]
    pub sample_rate: f64,
    #[serde(default = "audio_secs_default")]
    pub audio_secs: f64,
    #[serde(default)]
    pub mel: MelConfig,
    #[serde(default = "widths_default")]
    pub audio_widths: Vec<usize>,
    #[serde(default = "d_default")]
    pub d_a: usize,

    #[serde(default = "vocab_default")]
    pub vocab_size: usize,
    #[serde(default = "word_dim_default")]
    pub word_dim: usize,
    #[serde(default = "d_default")]
    pub d_t: usize,
    /// Seed of the frozen word table.
    #[serde(default)]
    pub word_table_seed: u64,
    /// Optional external word table replacing the seeded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_table: Option<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_v == 0 || self.d_a == 0 || self.d_t == 0 {
            return bad("d_v, d_a and d_t must be positive");
        }
        if self.frames == 0 || self.crop == 0 {
            return bad("frames and crop must be positive");
        }
        if self.video_widths.contains(&0) || self.audio_widths.contains(&0) {
            return bad("channel widths must be positive");
        }
        if self.video_kt == 0 {
            return bad("video_kt must be positive");
        }
        if !(0.0..=1.0).contains(&self.shift.shift_fraction) {
            return bad("shift_fraction must lie in [0, 1]");
        }
        if self.vocab_size < 2 || self.word_dim == 0 {
            return bad("vocab_size must be >= 2 and word_dim positive");
        }
        if !(self.sample_rate > 0.0) || !(self.audio_secs > 0.0) {
            return bad("sample_rate and audio_secs must be positive");
        }
        if self.audio_samples() < self.mel.window_samples(self.sample_rate) {
            return bad("audio clip shorter than one spectrogram window");
        }
        if self.video_arch == VideoArch::Conv3dMini && self.temporal_padding == Padding::Valid {
            let blocks = self.video_widths.len() + 1;
            if self.frames < blocks * (self.video_kt - 1) + 1 {
                return bad("valid temporal padding consumes every frame");
            }
        }
        Ok(())
    }

    pub fn audio_samples(&self) -> usize {
        (self.sample_rate * self.audio_secs).round() as usize
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_v, self.d_a, self.d_t)
    }

    /// Initialise every backbone parameter.
    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        video::init(self, store, rng);
        audio::init(self, store, rng);
        text::init(self, store, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d_v, c.d_a, c.d_t, c.word_dim), (64, 64, 64, 32));
        assert_eq!(c.mel.n_bins, 80);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<EncoderConfig>("d_q = 3").is_err());
    }
}
