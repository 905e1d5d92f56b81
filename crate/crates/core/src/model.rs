//! Backbones plus embedding graph, and batch assembly for the loss.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::MultimodalSample;
use crate::encoders::{audio, text, video, AudioWave, EncoderConfig, MelFrontend, TokenSeq, VideoClip};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, Modality, Space};
use crate::losses::{EmbeddedBatch, PairTerm};
use crate::nn::{Forward, Mode};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Stream id of the initialisation rng, apart from the per-sample data streams.
const INIT_STREAM: u64 = u64::MAX - 1;

/// Rows per eval-mode forward pass when extracting features.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoders: EncoderConfig,
    #[serde(default)]
    pub graph: GraphConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoders.validate()?;
        self.graph.validate()
    }
}

/// Parameters of every backbone and head, with the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub mel: Arc<MelFrontend>,
}

impl<F: Scalar> Model<F> {
    /// Freshly initialised model; `seed` drives every random draw.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut params = ParamStore::new();
        cfg.encoders.init(&mut params, &mut rng)?;
        cfg.graph.init(&mut params, cfg.encoders.dims(), &mut rng);
        Self::from_params(cfg, params)
    }

    /// Wrap existing parameters (e.g. from a checkpoint).
    pub fn from_params(cfg: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let mel = Arc::new(MelFrontend::new(&cfg.encoders.mel, cfg.encoders.sample_rate)?);
        Ok(Model { cfg, params, mel })
    }

    pub fn encoders(&self) -> &EncoderConfig {
        &self.cfg.encoders
    }

    pub fn graph(&self) -> &GraphConfig {
        &self.cfg.graph
    }
}

/// Which loss terms a batch should feed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub va: bool,
    pub vt: bool,
}

impl Default for Needs {
    fn default() -> Self {
        Needs { va: true, vt: true }
    }
}

/// Embed a batch of (already augmented) samples for the combined loss.
///
/// The va term keeps samples holding video and audio, the vt term samples
/// holding video and text; the latter carries every candidate narration,
/// tagged with the index of its anchor.
pub fn make_batch<F: Scalar>(
    fwd: &mut Forward<'_, '_, F>,
    model: &Model<F>,
    samples: &[&MultimodalSample],
    needs: Needs,
) -> Result<EmbeddedBatch> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("a batch needs at least 2 samples, got {}", samples.len())));
    }
    let enc = model.encoders();
    let graph = model.graph();
    let with_video: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].has_video()).collect();
    let va_rows: Vec<usize> = if needs.va {
        (0..with_video.len()).filter(|&r| samples[with_video[r]].has_audio()).collect()
    } else {
        Vec::new()
    };
    let vt_rows: Vec<usize> = if needs.vt {
        (0..with_video.len()).filter(|&r| samples[with_video[r]].has_text()).collect()
    } else {
        Vec::new()
    };
    if va_rows.is_empty() && vt_rows.is_empty() {
        return Ok(EmbeddedBatch::default());
    }

    let clips: Vec<&VideoClip> = with_video.iter().map(|&i| samples[i].video.as_ref().unwrap()).collect();
    let x = fwd.tape.constant(video::clips_to_tensor(&clips)?);
    let fv = video::forward(fwd, enc, x)?;

    let mut spaces = Vec::new();
    if !va_rows.is_empty() {
        spaces.push(graph.va_space());
    }
    if !vt_rows.is_empty() && !spaces.contains(&graph.vt_space()) {
        spaces.push(graph.vt_space());
    }
    let zv_all = graph.project_many(fwd, fv, Modality::Video, &spaces)?;
    let zv_in = |s: Space| zv_all[spaces.iter().position(|&x| x == s).unwrap()];

    let mut batch = EmbeddedBatch::default();
    if !va_rows.is_empty() {
        let zv = fwd.tape.gather_rows(zv_in(graph.va_space()), &va_rows)?;
        let waves: Vec<&AudioWave> = va_rows.iter().map(|&r| samples[with_video[r]].audio.as_ref().unwrap()).collect();
        let spec = fwd.tape.constant(audio::spectrograms(&waves, enc, &model.mel)?);
        let fa = audio::forward(fwd, enc, spec)?;
        let za = graph.project(fwd, fa, Modality::Audio, graph.va_space())?;
        batch.va = Some(PairTerm {
            zv,
            zx: za,
            owner: (0..va_rows.len()).collect(),
        });
    }
    if !vt_rows.is_empty() {
        let zv = fwd.tape.gather_rows(zv_in(graph.vt_space()), &vt_rows)?;
        let mut seqs: Vec<&TokenSeq> = Vec::new();
        let mut owner = Vec::new();
        for (k, &r) in vt_rows.iter().enumerate() {
            for seq in samples[with_video[r]].text.as_ref().unwrap() {
                seqs.push(seq);
                owner.push(k);
            }
        }
        let ft = text::forward(fwd, enc, &seqs)?;
        let zt = graph.project(fwd, ft, Modality::Text, graph.vt_space())?;
        batch.vt = Some(PairTerm { zv, zx: zt, owner });
    }
    Ok(batch)
}

fn chunked<F: Scalar, T>(
    model: &Model<F>,
    items: &[T],
    mut run: impl FnMut(&mut Forward<'_, '_, F>, &[T]) -> Result<Var>,
) -> Result<Tensor<f64>> {
    let mut rows: Vec<Tensor<f64>> = Vec::new();
    for chunk in items.chunks(EVAL_CHUNK) {
        let mut tape = Tape::inference();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
        let y = run(&mut fwd, chunk)?;
        let y = tape.value(y).cast::<f64>();
        for i in 0..y.shape()[0] {
            rows.push(y.index_outer(i)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("no inputs to encode"));
    }
    Tensor::stack(&rows)
}

/// Eval-mode `f_v` for each clip, `[N, d_v]`.
pub fn video_features<F: Scalar>(model: &Model<F>, clips: &[&VideoClip]) -> Result<Tensor<f64>> {
    let enc = model.encoders();
    chunked(model, clips, |fwd, c| {
        let x = fwd.tape.constant(video::clips_to_tensor(c)?);
        video::forward(fwd, enc, x)
    })
}

/// Eval-mode `f_a` for each waveform, `[N, d_a]`.
pub fn audio_features<F: Scalar>(model: &Model<F>, waves: &[&AudioWave]) -> Result<Tensor<f64>> {
    let enc = model.encoders();
    chunked(model, waves, |fwd, w| {
        let spec = fwd.tape.constant(audio::spectrograms(w, enc, &model.mel)?);
        audio::forward(fwd, enc, spec)
    })
}

/// Eval-mode `f_t` for each token sequence, `[N, d_t]`.
pub fn text_features<F: Scalar>(model: &Model<F>, seqs: &[&TokenSeq]) -> Result<Tensor<f64>> {
    let enc = model.encoders();
    chunked(model, seqs, |fwd, s| text::forward(fwd, enc, s))
}

/// Eval-mode image features of a deflated video network, `[N, d_v]`.
pub fn image_features<F: Scalar>(model: &Model<F>, images: &[Tensor<f32>]) -> Result<Tensor<f64>> {
    let enc = model.encoders();
    chunked(model, images, |fwd, imgs| {
        let casted: Vec<Tensor<F>> = imgs.iter().map(|i| i.cast()).collect();
        let x = fwd.tape.constant(Tensor::stack(&casted)?);
        video::forward_image(fwd, enc, x)
    })
}

/// Eval-mode unit embeddings of `[N, d_m]` backbone features in space `s`.
pub fn embed_features<F: Scalar>(model: &Model<F>, features: &Tensor<f64>, m: Modality, s: Space) -> Result<Tensor<f64>> {
    model.graph().check(m, s)?;
    if features.rank() != 2 {
        return Err(Error::shape("embed_features", format!("expected [N, d], got {:?}", features.shape())));
    }
    let rows: Vec<usize> = (0..features.shape()[0]).collect();
    chunked(model, &rows, |fwd, r| {
        let d = features.shape()[1];
        let mut data = Vec::with_capacity(r.len() * d);
        for &i in r {
            data.extend(features.row(i).iter().map(|&x| F::from_f64_lossy(x)));
        }
        let x = fwd.tape.constant(Tensor::new([r.len(), d], data)?);
        model.graph().project(fwd, x, m, s)
    })
}

/// Feature extraction for one modality, returning `[N, d_m]`.
pub fn encode<F: Scalar>(model: &Model<F>, samples: &[&MultimodalSample], m: Modality) -> Result<Tensor<f64>> {
    let missing = || Error::invalid(format!("a sample lacks the {m} modality"));
    match m {
        Modality::Video => {
            let clips = samples.iter().map(|s| s.video.as_ref().ok_or_else(missing)).collect::<Result<Vec<_>>>()?;
            video_features(model, &clips)
        }
        Modality::Audio => {
            let waves = samples.iter().map(|s| s.audio.as_ref().ok_or_else(missing)).collect::<Result<Vec<_>>>()?;
            audio_features(model, &waves)
        }
        Modality::Text => {
            let seqs: Vec<&TokenSeq> = samples.iter().map(|s| &s.aligned).collect();
            text_features(model, &seqs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, WorldSpec};
    use crate::data::{augment::center_view, MultimodalSample};
    use crate::graph::Topology;
    use crate::losses::{combined_loss, LossConfig};

    fn tiny_cfg(t: Topology) -> ModelConfig {
        let encoders = EncoderConfig {
            frames: 4,
            crop: 8,
            video_widths: vec![4],
            audio_widths: vec![4],
            d_v: 8,
            d_a: 8,
            d_t: 8,
            word_dim: 8,
            audio_secs: 0.1,
            ..EncoderConfig::default()
        };
        let graph = GraphConfig {
            d_va: 6,
            d_vt: 6,
            d_vat: 4,
            d_hidden: 8,
            ..GraphConfig::new(t)
        };
        ModelConfig { encoders, graph }
    }

    fn tiny_samples(n: usize) -> Vec<MultimodalSample> {
        let spec = WorldSpec { frames: 4, height: 10, width: 10, audio_secs: 0.1, rho: 0.5, ..WorldSpec::default() };
        generate(&spec, 3, n)
            .unwrap()
            .into_iter()
            .map(|mut s| {
                s.video = Some(center_view(s.video.as_ref().unwrap(), 10, 8).unwrap());
                s
            })
            .collect()
    }

    #[test]
    fn batch_terms_follow_presence() {
        let samples = tiny_samples(6);
        let refs: Vec<&MultimodalSample> = samples.iter().collect();
        for t in [Topology::Shared, Topology::Disjoint, Topology::Fac] {
            let model = Model::<f64>::new(tiny_cfg(t), 0).unwrap();
            let mut tape = Tape::new();
            let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
            let b = make_batch(&mut fwd, &model, &refs, Needs::default()).unwrap();
            let va = b.va.as_ref().unwrap();
            assert_eq!(va.owner.len(), 6);
            let with_text = samples.iter().filter(|s| s.has_text()).count();
            let vt = b.vt.as_ref().unwrap();
            assert_eq!(tape.shape(vt.zv)[0], with_text);
            assert_eq!(vt.owner.len(), with_text * 3);
            let l = combined_loss(&mut tape, &b, &LossConfig::default()).unwrap();
            assert!(tape.value(l.total).item().unwrap().is_finite());
        }
    }

    #[test]
    fn fewer_than_two_samples_is_rejected() {
        let samples = tiny_samples(1);
        let model = Model::<f64>::new(tiny_cfg(Topology::Fac), 0).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
        assert!(make_batch(&mut fwd, &model, &[&samples[0]], Needs::default()).is_err());
    }

    #[test]
    fn features_have_backbone_dims() {
        let samples = tiny_samples(3);
        let refs: Vec<&MultimodalSample> = samples.iter().collect();
        let model = Model::<f32>::new(tiny_cfg(Topology::Fac), 1).unwrap();
        assert_eq!(encode(&model, &refs, Modality::Video).unwrap().shape(), &[3, 8]);
        assert_eq!(encode(&model, &refs, Modality::Audio).unwrap().shape(), &[3, 8]);
        let t = encode(&model, &refs, Modality::Text).unwrap();
        let z = embed_features(&model, &t, Modality::Text, Space::Vat).unwrap();
        for i in 0..3 {
            let n: f64 = z.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(embed_features(&model, &t, Modality::Text, Space::Va).is_err());
    }
}
