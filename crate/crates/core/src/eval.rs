//! Frozen-feature linear probes and zero-shot cross-modal retrieval.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::augment::center_view;
use crate::data::synth::generate_sample;
use crate::data::MultimodalSample;
use crate::encoders::{AudioWave, VideoClip};
use crate::error::{Error, Result};
use crate::graph::{Modality, Space};
use crate::model::{embed_features, encode, video_features, Model};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::Adam;

/// First stream index of evaluation samples; training streams stay far below it.
pub const EVAL_BASE: u64 = 1 << 40;

fn sweep_default() -> Vec<f64> {
    vec![0.0, 1e-4, 1e-3, 1e-2]
}
fn probe_steps_default() -> usize {
    300
}
fn probe_lr_default() -> f64 {
    0.05
}
fn train_frac_default() -> f64 {
    0.6
}
fn val_frac_default() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// L2 strengths tried; the best on the validation split wins.
    #[serde(default = "sweep_default")]
    pub l2_sweep: Vec<f64>,
    /// Full-batch Adam steps per fit.
    #[serde(default = "probe_steps_default")]
    pub steps: usize,
    #[serde(default = "probe_lr_default")]
    pub lr: f64,
    #[serde(default = "train_frac_default")]
    pub train_frac: f64,
    #[serde(default = "val_frac_default")]
    pub val_frac: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2_sweep.is_empty() || self.l2_sweep.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("l2_sweep must be a non-empty list of non-negative values".into()));
        }
        let (a, b) = (self.train_frac, self.val_frac);
        if !(a > 0.0 && b > 0.0 && a + b < 1.0) {
            return Err(Error::Config("train_frac and val_frac must be positive and sum below 1".into()));
        }
        if self.steps == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe steps and lr must be positive".into()));
        }
        Ok(())
    }
}

fn probe_samples_default() -> usize {
    800
}
fn items_default() -> usize {
    256
}
fn ks_default() -> Vec<usize> {
    vec![1, 5, 10]
}
fn clips_default() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Held-out samples feeding each probe.
    #[serde(default = "probe_samples_default")]
    pub probe_samples: usize,
    /// Corpus size for retrieval.
    #[serde(default = "items_default")]
    pub retrieval_items: usize,
    #[serde(default = "ks_default")]
    pub ks: Vec<usize>,
    /// Windows averaged by [`clip_averaged_embedding`].
    #[serde(default = "clips_default")]
    pub n_clips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        if self.retrieval_items == 0 || self.ks.is_empty() || self.ks.contains(&0) || self.n_clips == 0 {
            return Err(Error::Config("retrieval_items, ks and n_clips must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a probe fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub best_l2: f64,
    pub num_test: usize,
}

/// Train / val / test index split from a seeded permutation.
pub fn split_indices(n: usize, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_train = (n as f64 * cfg.train_frac).round() as usize;
    let n_val = (n as f64 * cfg.val_frac).round() as usize;
    let test = idx.split_off((n_train + n_val).min(n));
    let val = idx.split_off(n_train.min(idx.len()));
    (idx, val, test)
}

struct Softmax {
    w: Tensor<f64>,
    b: Tensor<f64>,
}

impl Softmax {
    fn predict(&self, x: &Tensor<f64>) -> Vec<usize> {
        let (d, c) = (self.w.shape()[0], self.w.shape()[1]);
        (0..x.shape()[0])
            .map(|i| {
                let row = x.row(i);
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..c {
                    let s = self.b.data()[k] + (0..d).map(|j| row[j] * self.w.data()[j * c + k]).sum::<f64>();
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect()
    }
}

fn fit_softmax(x: &Tensor<f64>, y: &[usize], classes: usize, l2: f64, cfg: &ProbeConfig) -> Result<Softmax> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut params = ParamStore::<f64>::new();
    params.insert("w", Tensor::zeros([d, classes]));
    params.insert("b", Tensor::zeros([classes]));
    let all = vec![true; n * classes];
    let onehot: Vec<bool> = (0..n).flat_map(|i| (0..classes).map(move |k| y[i] == k)).collect();
    let mut opt = Adam::new();
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.param("w", params.get("w")?);
        let b = tape.param("b", params.get("b")?);
        let logits = tape.matmul(xv, w)?;
        let logits = tape.add(logits, b)?;
        let lse = tape.masked_logsumexp(logits, &all)?;
        let picked = tape.masked_logsumexp(logits, &onehot)?;
        let ce = tape.sub(lse, picked)?;
        let mut loss = tape.mean(ce)?;
        if l2 > 0.0 {
            let sq = tape.mul(w, w)?;
            let sq = tape.sum(sq)?;
            let pen = tape.scale(sq, l2)?;
            loss = tape.add(loss, pen)?;
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &grads, cfg.lr)?;
    }
    Ok(Softmax {
        w: params.get("w")?.clone(),
        b: params.get("b")?.clone(),
    })
}

fn take_rows(x: &Tensor<f64>, rows: &[usize]) -> Result<Tensor<f64>> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new([rows.len(), d], data)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Multinomial logistic regression on standardized frozen features.
///
/// Features are standardized with train-split statistics; the L2 strength
/// with the best validation accuracy (first on ties) is scored on the test split.
pub fn linear_probe(features: &Tensor<f64>, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::shape("linear_probe", format!("{:?} features for {} labels", features.shape(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {l} >= {num_classes} classes")));
    }
    let (tr, va, te) = split_indices(labels.len(), cfg);
    if te.is_empty() || va.is_empty() {
        return Err(Error::invalid("too few samples for a train / val / test split"));
    }
    let present: Vec<bool> = (0..num_classes).map(|c| tr.iter().any(|&i| labels[i] == c)).collect();
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("the train split must hold at least 2 classes"));
    }
    let all_labels: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if let Some(c) = all_labels.iter().find(|&&c| !present[c]) {
        return Err(Error::invalid(format!("class {c} is absent from the train split")));
    }

    let d = features.shape()[1];
    let xtr = take_rows(features, &tr)?;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in 0..tr.len() {
        for (m, &v) in mean.iter_mut().zip(xtr.row(i)) {
            *m += v / tr.len() as f64;
        }
    }
    for i in 0..tr.len() {
        for j in 0..d {
            std[j] += (xtr.row(i)[j] - mean[j]).powi(2) / tr.len() as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardize = |x: &Tensor<f64>| x.data().chunks(d).flat_map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j])).collect::<Vec<_>>();
    let xtr = Tensor::new([tr.len(), d], standardize(&xtr))?;
    let xva = take_rows(features, &va)?;
    let xva = Tensor::new([va.len(), d], standardize(&xva))?;
    let xte = take_rows(features, &te)?;
    let xte = Tensor::new([te.len(), d], standardize(&xte))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (ytr, yva, yte) = (pick(&tr), pick(&va), pick(&te));

    let mut best: Option<(f64, f64, Softmax)> = None;
    for &l2 in &cfg.l2_sweep {
        let clf = fit_softmax(&xtr, &ytr, num_classes, l2, cfg)?;
        let acc = accuracy(&clf.predict(&xva), &yva);
        if best.as_ref().map_or(true, |b| acc > b.0) {
            best = Some((acc, l2, clf));
        }
    }
    let (val_accuracy, best_l2, clf) = best.expect("sweep is non-empty");
    Ok(ProbeResult {
        accuracy: accuracy(&clf.predict(&xte), &yte),
        val_accuracy,
        best_l2,
        num_test: te.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    /// 1-based rank of each query's ground truth.
    pub ranks: Vec<usize>,
}

/// Rank of the ground truth `gt` in `scores`, descending; equal scores rank by corpus index.
pub fn rank_of(scores: &[f64], gt: usize) -> usize {
    let s = scores[gt];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < gt))
        .count()
}

/// Metrics from a score matrix whose row `i` has ground truth `i`.
pub fn retrieval_from_scores(scores: &[Vec<f64>], ks: &[usize]) -> Result<RetrievalResult> {
    if scores.is_empty() {
        return Err(Error::invalid("retrieval needs at least one query"));
    }
    let m = scores[0].len();
    if m < scores.len() || scores.iter().any(|r| r.len() != m) {
        return Err(Error::shape("retrieval", "every query needs a full score row covering its ground truth"));
    }
    let ranks: Vec<usize> = scores.iter().enumerate().map(|(i, row)| rank_of(row, i)).collect();
    let q = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / q))
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median_rank = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    Ok(RetrievalResult {
        recall_at,
        median_rank,
        ranks,
    })
}

/// Rank corpus items by dot product with each query; query `i` matches item `i`.
pub fn zero_shot_retrieval(
    queries: &Tensor<f64>,
    query_space: Space,
    corpus: &Tensor<f64>,
    corpus_space: Space,
    ks: &[usize],
) -> Result<RetrievalResult> {
    if query_space != corpus_space {
        return Err(Error::SpaceMismatch(query_space, corpus_space));
    }
    if corpus.rank() != 2 || corpus.shape()[0] == 0 {
        return Err(Error::invalid("retrieval corpus is empty"));
    }
    if queries.rank() != 2 || queries.shape()[1] != corpus.shape()[1] {
        return Err(Error::shape("retrieval", format!("{:?} vs {:?}", queries.shape(), corpus.shape())));
    }
    let scores: Vec<Vec<f64>> = (0..queries.shape()[0])
        .map(|i| {
            let q = queries.row(i);
            (0..corpus.shape()[0]).map(|j| q.iter().zip(corpus.row(j)).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    retrieval_from_scores(&scores, ks)
}

/// Expected R@K when the ground-truth rank is uniform over `m` items.
pub fn chance_recall(k: usize, m: usize) -> f64 {
    k.min(m) as f64 / m as f64
}

/// Start frames of `n` linearly spaced windows of `len` frames in a `total`-frame clip.
pub fn window_starts(total: usize, len: usize, n: usize) -> Result<Vec<usize>> {
    if len == 0 || n == 0 || total < len {
        return Err(Error::invalid(format!("a {total}-frame sample cannot hold {n} windows of {len} frames")));
    }
    let span = (total - len) as f64;
    Ok((0..n)
        .map(|k| if n == 1 { 0 } else { (span * k as f64 / (n - 1) as f64).round() as usize })
        .collect())
}

/// Mean eval-mode `f_v` over `n_clips` linearly spaced windows of a long clip.
pub fn clip_averaged_embedding<F: Scalar>(model: &Model<F>, clip: &VideoClip, n_clips: usize) -> Result<Tensor<f64>> {
    let len = model.encoders().frames;
    let starts = window_starts(clip.num_frames(), len, n_clips)?;
    let windows = starts
        .iter()
        .map(|&s| {
            let frames = (s..s + len).map(|t| clip.frames.index_outer(t)).collect::<Result<Vec<_>>>()?;
            VideoClip::new(Tensor::stack(&frames)?, clip.fps)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&VideoClip> = windows.iter().collect();
    let feats = video_features(model, &refs)?;
    let d = feats.shape()[1];
    let mut mean = vec![0.0; d];
    for i in 0..n_clips {
        for (m, &v) in mean.iter_mut().zip(feats.row(i)) {
            *m += v;
        }
    }
    Tensor::new([d], mean.into_iter().map(|v| v / n_clips as f64).collect())
}

/// Deterministic test-time view: centre temporal window, resize and centre crop, no jitter.
pub fn eval_view(sample: &MultimodalSample, cfg: &RunConfig) -> Result<MultimodalSample> {
    let mut out = sample.clone();
    if let Some(v) = &sample.video {
        let t = v.num_frames();
        let len = cfg.clip_frames();
        let start = (t - len.min(t)) / 2;
        let frames = (start..start + len).map(|i| v.frames.index_outer(i)).collect::<Result<Vec<_>>>()?;
        let clip = VideoClip::new(Tensor::stack(&frames)?, v.fps)?;
        let a = &cfg.train.augment;
        out.video = Some(center_view(&clip, a.resize, a.crop)?);
    }
    if let Some(a) = &sample.audio {
        let want = cfg.encoders.audio_samples();
        let start = (a.samples.len() - want.min(a.samples.len())) / 2;
        out.audio = Some(AudioWave {
            samples: a.samples[start..start + want.min(a.samples.len())].to_vec(),
            sample_rate: a.sample_rate,
        });
    }
    Ok(out)
}

/// `n` held-out samples (disjoint from training streams) in their eval view.
pub fn eval_samples(cfg: &RunConfig, n: usize, offset: u64) -> Result<Vec<MultimodalSample>> {
    (0..n as u64)
        .map(|i| eval_view(&generate_sample(&cfg.world, cfg.seed, EVAL_BASE + offset + i)?, cfg))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    ProbeVideo,
    ProbeAudio,
    RetrievalT2v,
    RetrievalT2a,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::ProbeVideo, Task::ProbeAudio, Task::RetrievalT2v, Task::RetrievalT2a];

    pub fn name(self) -> &'static str {
        match self {
            Task::ProbeVideo => "probe-video",
            Task::ProbeAudio => "probe-audio",
            Task::RetrievalT2v => "retrieval-t2v",
            Task::RetrievalT2a => "retrieval-t2a",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named metric values from one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub metrics: Vec<(String, f64)>,
}

impl Report {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (n, v) in &self.metrics {
            out.push_str(&format!("{n},{v}\n"));
        }
        out
    }
}

fn probe_report(feats: &Tensor<f64>, samples: &[MultimodalSample], cfg: &RunConfig) -> Result<Report> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let r = linear_probe(feats, &labels, cfg.world.num_classes, &cfg.eval.probe)?;
    Ok(Report {
        metrics: vec![
            ("top1".into(), r.accuracy),
            ("val_top1".into(), r.val_accuracy),
            ("best_l2".into(), r.best_l2),
            ("chance".into(), 1.0 / cfg.world.num_classes as f64),
        ],
    })
}

fn retrieval_report(r: &RetrievalResult, m: usize) -> Report {
    let mut metrics: Vec<(String, f64)> = r.recall_at.iter().map(|(k, v)| (format!("R@{k}"), *v)).collect();
    metrics.push(("MedR".into(), r.median_rank));
    for k in r.recall_at.keys() {
        metrics.push((format!("chance_R@{k}"), chance_recall(*k, m)));
    }
    Report { metrics }
}

/// Run one downstream task on held-out samples.
pub fn run_task<F: Scalar>(model: &Model<F>, cfg: &RunConfig, task: Task) -> Result<Report> {
    let graph = model.graph();
    match task {
        Task::ProbeVideo | Task::ProbeAudio => {
            let samples = eval_samples(cfg, cfg.eval.probe_samples, 0)?;
            let refs: Vec<&MultimodalSample> = samples.iter().collect();
            let m = if task == Task::ProbeVideo { Modality::Video } else { Modality::Audio };
            probe_report(&encode(model, &refs, m)?, &samples, cfg)
        }
        Task::RetrievalT2v | Task::RetrievalT2a => {
            let (target, space) = if task == Task::RetrievalT2v {
                (Modality::Video, graph.vt_space())
            } else {
                let s = graph.at_space().ok_or_else(|| Error::UnreachableTask {
                    task: task.name().into(),
                    topology: graph.topology.name(),
                })?;
                (Modality::Audio, s)
            };
            let n = cfg.eval.retrieval_items;
            let samples = eval_samples(cfg, n, 1 << 32)?;
            let refs: Vec<&MultimodalSample> = samples.iter().collect();
            let q = embed_features(model, &encode(model, &refs, Modality::Text)?, Modality::Text, space)?;
            let c = embed_features(model, &encode(model, &refs, target)?, target, space)?;
            let r = zero_shot_retrieval(&q, space, &c, space, &cfg.eval.ks)?;
            Ok(retrieval_report(&r, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> ProbeConfig {
        ProbeConfig { steps: 150, ..ProbeConfig::default() }
    }

    #[test]
    fn one_hot_features_are_perfectly_probed() {
        let c = 5;
        let labels: Vec<usize> = (0..100).map(|i| i % c).collect();
        let data: Vec<f64> = labels.iter().flat_map(|&l| (0..c).map(move |k| (k == l) as u8 as f64)).collect();
        let x = Tensor::new([100, c], data).unwrap();
        assert_eq!(linear_probe(&x, &labels, c, &cfg()).unwrap().accuracy, 1.0);
    }

    #[test]
    fn separable_two_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| [if l == 1 { 3.0 } else { -3.0 } + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let x = Tensor::new([80, 2], data).unwrap();
        assert_eq!(linear_probe(&x, &labels, 2, &cfg()).unwrap().accuracy, 1.0);
    }

    #[test]
    fn absent_class_is_rejected() {
        let labels = vec![0usize; 20];
        let x = Tensor::zeros([20, 2]);
        assert!(linear_probe(&x, &labels, 3, &cfg()).is_err());
    }

    #[test]
    fn tie_break_and_median() {
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 3);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 1);
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.5, 0.4, 0.0], vec![0.7, 0.8, 0.6]];
        let r = retrieval_from_scores(&scores, &[1, 3]).unwrap();
        assert_eq!(r.ranks, vec![1, 2, 3]);
        assert_eq!(r.median_rank, 2.0);
        assert_eq!(r.recall_at[&3], 1.0);
    }

    #[test]
    fn windows() {
        assert_eq!(window_starts(8, 8, 10).unwrap(), vec![0; 10]);
        assert_eq!(window_starts(12, 4, 3).unwrap(), vec![0, 4, 8]);
        assert!(window_starts(3, 4, 1).is_err());
    }

    #[test]
    fn task_names() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()).unwrap(), t);
        }
        assert!(Task::parse("probe-text").is_err());
    }
}
