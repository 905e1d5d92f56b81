//! Log-mel frontend and the 2D conv audio backbone.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioWave, EncoderConfig};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Forward, Mode, PoolKind};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const LOG_FLOOR: f64 = 1e-6;

fn bins_default() -> usize {
    80
}
fn window_default() -> f64 {
    25.0
}
fn hop_default() -> f64 {
    10.0
}
fn nfft_default() -> usize {
    512
}
fn fmin_default() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    #[serde(default = "bins_default")]
    pub n_bins: usize,
    #[serde(default = "window_default")]
    pub window_ms: f64,
    #[serde(default = "hop_default")]
    pub hop_ms: f64,
    /// FFT size; windows are zero-padded up to it.
    #[serde(default = "nfft_default")]
    pub n_fft: usize,
    #[serde(default = "fmin_default")]
    pub f_min: f64,
    /// Upper edge of the filterbank; Nyquist when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_bins: bins_default(),
            window_ms: window_default(),
            hop_ms: hop_default(),
            n_fft: nfft_default(),
            f_min: fmin_default(),
            f_max: None,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self, sample_rate: f64) -> usize {
        (self.window_ms * 1e-3 * sample_rate).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: f64) -> usize {
        (self.hop_ms * 1e-3 * sample_rate).round() as usize
    }

    pub fn num_frames(&self, len: usize, sample_rate: f64) -> usize {
        let win = self.window_samples(sample_rate);
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_samples(sample_rate).max(1)
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// The `n_bins + 2` filter edge frequencies, equally spaced on the mel scale.
pub fn mel_edges(cfg: &MelConfig, sample_rate: f64) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max.unwrap_or(sample_rate / 2.0));
    (0..cfg.n_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_bins + 1) as f64))
        .collect()
}

/// Centre frequency of every mel bin.
pub fn mel_centers(cfg: &MelConfig, sample_rate: f64) -> Vec<f64> {
    let e = mel_edges(cfg, sample_rate);
    e[1..e.len() - 1].to_vec()
}

struct Filter {
    start: usize,
    weights: Vec<f64>,
}

/// Reusable STFT + triangular mel filterbank.
pub struct MelFrontend {
    cfg: MelConfig,
    sample_rate: f64,
    window: Vec<f64>,
    hop: usize,
    filters: Vec<Filter>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: &MelConfig, sample_rate: f64) -> Result<Self> {
        let win = cfg.window_samples(sample_rate);
        let hop = cfg.hop_samples(sample_rate);
        let nyquist = sample_rate / 2.0;
        let f_max = cfg.f_max.unwrap_or(nyquist);
        if cfg.n_bins == 0 || win == 0 || hop == 0 || cfg.n_fft < win {
            return Err(Error::Config(format!(
                "mel frontend needs n_bins > 0, 0 < window <= n_fft and hop > 0 (window {win}, hop {hop}, n_fft {})",
                cfg.n_fft
            )));
        }
        if !(cfg.f_min >= 0.0 && cfg.f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!("mel range [{}, {f_max}] outside [0, {nyquist}]", cfg.f_min)));
        }
        // Periodic Hann window.
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let edges = mel_edges(cfg, sample_rate);
        let n_freq = cfg.n_fft / 2 + 1;
        let bin_hz = sample_rate / cfg.n_fft as f64;
        let mut filters = Vec::with_capacity(cfg.n_bins);
        for m in 0..cfg.n_bins {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_freq {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            let start = start.ok_or_else(|| {
                Error::Config(format!("mel bin {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; raise n_fft"))
            })?;
            filters.push(Filter { start, weights });
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(MelFrontend {
            cfg: cfg.clone(),
            sample_rate,
            window,
            hop,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// `log(mel(|STFT|^2) + 1e-6)` as `[frames, n_bins]`.
    pub fn compute(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let win = self.window.len();
        if samples.len() < win {
            return Err(Error::invalid(format!(
                "audio of {} samples is shorter than one {win}-sample window",
                samples.len()
            )));
        }
        let frames = 1 + (samples.len() - win) / self.hop;
        let n_bins = self.cfg.n_bins;
        let mut out = Vec::with_capacity(frames * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.cfg.n_fft / 2 + 1];
        for f in 0..frames {
            let seg = &samples[f * self.hop..f * self.hop + win];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < win {
                    Complex::new(seg[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt
                    .weights
                    .iter()
                    .zip(&power[filt.start..])
                    .map(|(w, p)| w * p)
                    .sum();
                out.push((e + LOG_FLOOR).ln() as f32);
            }
        }
        Tensor::new([frames, n_bins], out)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }
}

/// One-shot log-mel spectrogram.
pub fn log_mel(wave: &AudioWave, cfg: &MelConfig) -> Result<Tensor<f32>> {
    MelFrontend::new(cfg, wave.sample_rate as f64)?.compute(&wave.samples)
}

pub fn block_widths(cfg: &EncoderConfig) -> Vec<usize> {
    let mut w = cfg.audio_widths.clone();
    w.push(cfg.d_a);
    w
}

pub fn init<F: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore<F>, rng: &mut R) {
    let mut cin = 1;
    for (i, &cout) in block_widths(cfg).iter().enumerate() {
        let p = format!("audio.b{i}");
        nn::init_conv2d(store, &format!("{p}.conv"), [3, 3, cin, cout], rng);
        store.remove(&format!("{p}.conv.bias"));
        nn::init_batch_norm(store, &format!("{p}.bn"), cout);
        cin = cout;
    }
}

/// `f_a` on log-mel spectrograms `[N, frames, bins]`, returning `[N, d_a]`.
pub fn forward<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, spec: Var) -> Result<Var> {
    let s = fwd.tape.shape(spec).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("audio encoder", format!("expected [N, frames, bins], got {s:?}")));
    }
    let mut h = fwd.tape.reshape(spec, &[s[0], s[1], s[2], 1])?;
    for i in 0..block_widths(cfg).len() {
        let p = format!("audio.b{i}");
        let w = fwd.param(&format!("{p}.conv.weight"))?;
        let y = fwd.tape.conv2d(h, w, None, (2, 2), Padding::Zero)?;
        let y = fwd.batch_norm(&format!("{p}.bn"), y)?;
        h = fwd.tape.relu(y)?;
    }
    nn::pool_var(fwd.tape, h, PoolKind::SpatialAvg)
}

/// Log-mel spectrograms of equally long waves stacked into `[N, frames, bins]`.
pub fn spectrograms<F: Scalar>(waves: &[&AudioWave], cfg: &EncoderConfig, mel: &MelFrontend) -> Result<Tensor<F>> {
    let want = cfg.audio_samples();
    let mut specs = Vec::with_capacity(waves.len());
    for w in waves {
        if w.samples.len() != want || (w.sample_rate as f64 - cfg.sample_rate).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "audio of {} samples at {} Hz does not match the configured {want} samples at {} Hz",
                w.samples.len(),
                w.sample_rate,
                cfg.sample_rate
            )));
        }
        specs.push(mel.compute(&w.samples)?.cast::<F>());
    }
    Tensor::stack(&specs)
}

/// Eval-mode `f_a(x_a)` for one wave.
pub fn encode_audio<F: Scalar>(wave: &AudioWave, cfg: &EncoderConfig, store: &ParamStore<F>, mel: &MelFrontend) -> Result<Tensor<F>> {
    let spec = spectrograms::<F>(&[wave], cfg, mel)?;
    encode_spectrograms(&spec, cfg, store)?.index_outer(0)
}

/// Eval-mode conv stack on precomputed spectrograms.
pub fn encode_spectrograms<F: Scalar>(spec: &Tensor<F>, cfg: &EncoderConfig, store: &ParamStore<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let mut fwd = Forward::new(&mut tape, store, Mode::Eval);
    let x = fwd.tape.constant(spec.clone());
    let y = forward(&mut fwd, cfg, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, amp: f64, sr: f64, n: usize) -> AudioWave {
        AudioWave {
            samples: (0..n)
                .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()) as f32)
                .collect(),
            sample_rate: sr as f32,
        }
    }

    #[test]
    fn shape_is_frames_by_bins() {
        let cfg = MelConfig::default();
        let m = log_mel(&sine(440.0, 0.5, 8000.0, 8000), &cfg).unwrap();
        assert_eq!(m.shape(), &[98, 80]);
    }

    #[test]
    fn silence_hits_the_floor() {
        let m = log_mel(&sine(0.0, 0.0, 8000.0, 800), &MelConfig::default()).unwrap();
        let floor = (LOG_FLOOR).ln() as f32;
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_input_is_rejected() {
        assert!(log_mel(&sine(100.0, 0.5, 8000.0, 100), &MelConfig::default()).is_err());
    }

    #[test]
    fn audio_encoder_matches_spectrogram_path() {
        let cfg = EncoderConfig {
            audio_widths: vec![4],
            d_a: 5,
            audio_secs: 0.1,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mel = MelFrontend::new(&cfg.mel, cfg.sample_rate).unwrap();
        let w = sine(700.0, 0.3, 8000.0, cfg.audio_samples());
        let direct = encode_audio(&w, &cfg, &store, &mel).unwrap();
        assert_eq!(direct.shape(), &[5]);
        let spec = log_mel(&w, &cfg.mel).unwrap().cast::<f64>();
        let spec = Tensor::stack(&[spec]).unwrap();
        let staged = encode_spectrograms(&spec, &cfg, &store).unwrap().index_outer(0).unwrap();
        assert_eq!(direct, staged);
        let wrong = sine(700.0, 0.3, 8000.0, cfg.audio_samples() + 1);
        assert!(encode_audio(&wrong, &cfg, &store, &mel).is_err());
    }
}
