//! Training loop: sample, augment, embed, combined loss, backprop, Adam.

pub mod adam;
pub mod checkpoint;
pub mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::synth::generate_sized;
use crate::data::{augment, AugmentConfig, MultimodalSample};
use crate::error::{Error, Result};
use crate::losses::combined_loss;
use crate::model::{make_batch, Model, Needs};
use crate::nn::{apply_bn_updates, Forward, Mode};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Stored};
pub use schedule::Schedule;

/// Stream id of the batch-sampling and augmentation rng; sample streams use small ids.
const TRAIN_STREAM: u64 = u64::MAX;

fn batch_default() -> usize {
    32
}
fn every_default() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "batch_default")]
    pub batch_size: usize,
    /// Size of a fixed sample pool drawn with replacement; 0 streams fresh samples.
    #[serde(default)]
    pub pool_size: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "every_default")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// One metrics line. Absent loss terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_va: Option<f64>,
    pub loss_vt: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_va,loss_vt";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.lr, r.loss_total, opt(r.loss_va), opt(r.loss_vt));
    }
    out
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<F: Scalar> {
    pub model: Model<F>,
    pub opt: Adam<F>,
    pub rng: ChaCha8Rng,
    /// Updates applied so far.
    pub step: usize,
}

impl<F: Scalar> TrainState<F> {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(TrainState {
            model: Model::new(cfg.model_config(), cfg.seed)?,
            opt: Adam::new(),
            rng,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            config: cfg.to_toml()?,
            ..Checkpoint::default()
        };
        for (name, t) in self.model.params.iter() {
            ck.tensors.insert(format!("param/{name}"), store_tensor(t));
        }
        for (name, t) in &self.opt.m {
            ck.tensors.insert(format!("adam.m/{name}"), store_tensor(t));
        }
        for (name, t) in &self.opt.v {
            ck.tensors.insert(format!("adam.v/{name}"), store_tensor(t));
        }
        ck.tensors.insert("adam.step".into(), u64s(vec![self.opt.step]));
        ck.tensors.insert("train.step".into(), u64s(vec![self.step as u64]));
        ck.tensors.insert("rng".into(), u64s(rng_words(&self.rng)));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Self)> {
        let cfg = RunConfig::from_toml(&ck.config)?;
        let params = params_from_checkpoint(ck)?;
        let model = Model::from_params(cfg.model_config(), params)?;
        let mut opt = Adam::new();
        for (name, t) in &ck.tensors {
            if let Some(p) = name.strip_prefix("adam.m/") {
                opt.m.insert(p.to_string(), load_tensor(t)?);
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                opt.v.insert(p.to_string(), load_tensor(t)?);
            }
        }
        opt.step = single_u64(ck.get("adam.step")?)?;
        let step = single_u64(ck.get("train.step")?)? as usize;
        let rng = rng_from_words(ck.get("rng")?)?;
        Ok((cfg, TrainState { model, opt, rng, step }))
    }
}

/// Model parameters stored under `param/` in a checkpoint.
pub fn params_from_checkpoint<F: Scalar>(ck: &Checkpoint) -> Result<ParamStore<F>> {
    let mut params = ParamStore::new();
    for (name, t) in &ck.tensors {
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p.to_string(), load_tensor(t)?);
        }
    }
    if params.is_empty() {
        return Err(Error::CorruptFile("checkpoint holds no parameters".into()));
    }
    Ok(params)
}

/// Load a checkpoint's configuration and model.
pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<(RunConfig, Model<F>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_toml(&ck.config)?;
    let model = Model::from_params(cfg.model_config(), params_from_checkpoint(&ck)?)?;
    Ok((cfg, model))
}

/// Checkpoint holding only a configuration and model parameters.
pub fn model_checkpoint<F: Scalar>(cfg: &RunConfig, params: &ParamStore<F>) -> Result<Checkpoint> {
    let mut ck = Checkpoint {
        config: cfg.to_toml()?,
        ..Checkpoint::default()
    };
    for (name, t) in params.iter() {
        ck.tensors.insert(format!("param/{name}"), store_tensor(t));
    }
    Ok(ck)
}

pub fn store_tensor<F: Scalar>(t: &Tensor<F>) -> Stored {
    match F::DTYPE {
        DType::F32 => Stored::F32(t.cast()),
        DType::F64 => Stored::F64(t.cast()),
    }
}

pub fn load_tensor<F: Scalar>(s: &Stored) -> Result<Tensor<F>> {
    match s {
        Stored::F32(t) => Ok(t.cast()),
        Stored::F64(t) => Ok(t.cast()),
        Stored::U64 { .. } => Err(Error::CorruptFile("expected a float tensor".into())),
    }
}

fn u64s(data: Vec<u64>) -> Stored {
    Stored::U64 {
        shape: vec![data.len()],
        data,
    }
}

fn single_u64(s: &Stored) -> Result<u64> {
    match s {
        Stored::U64 { data, .. } if data.len() == 1 => Ok(data[0]),
        _ => Err(Error::CorruptFile("expected a single u64".into())),
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut out: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    out.push(rng.get_stream());
    out.push(pos as u64);
    out.push((pos >> 64) as u64);
    out
}

fn rng_from_words(s: &Stored) -> Result<ChaCha8Rng> {
    let Stored::U64 { data, .. } = s else {
        return Err(Error::CorruptFile("rng state must be u64".into()));
    };
    if data.len() != 7 {
        return Err(Error::CorruptFile(format!("rng state has {} words, expected 7", data.len())));
    }
    let mut seed = [0u8; 32];
    for (i, w) in data[..4].iter().enumerate() {
        seed[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(data[4]);
    rng.set_word_pos(data[5] as u128 | (data[6] as u128) << 64);
    Ok(rng)
}

/// Where training samples come from.
pub enum DataSource {
    /// Fresh generated samples: step `s` uses stream indices `s * B .. (s + 1) * B`.
    Stream,
    /// A fixed pool sampled uniformly with replacement.
    Pool(Vec<MultimodalSample>),
}

impl DataSource {
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        if let Some(path) = &cfg.corpus {
            let pool = crate::data::read_corpus(path)?;
            if pool.is_empty() {
                return Err(Error::Config(format!("corpus {path} is empty")));
            }
            return Ok(DataSource::Pool(pool));
        }
        if cfg.train.pool_size > 0 {
            let pool = (0..cfg.train.pool_size as u64)
                .map(|i| raw_sample(cfg, i))
                .collect::<Result<Vec<_>>>()?;
            return Ok(DataSource::Pool(pool));
        }
        Ok(DataSource::Stream)
    }

    fn batch<R: Rng>(&self, cfg: &RunConfig, step: usize, rng: &mut R) -> Result<Vec<MultimodalSample>> {
        let b = cfg.train.batch_size;
        (0..b)
            .map(|k| {
                let raw = match self {
                    DataSource::Stream => raw_sample(cfg, (step * b + k) as u64)?,
                    DataSource::Pool(pool) => pool[rng.gen_range(0..pool.len())].clone(),
                };
                augment(&raw, &cfg.train.augment, rng)
            })
            .collect()
    }
}

/// Training sample `index`, with extra audio margin when temporal jitter is on.
pub fn raw_sample(cfg: &RunConfig, index: u64) -> Result<MultimodalSample> {
    generate_sized(&cfg.world, cfg.seed, index, cfg.world.frames, cfg.training_audio_len())
}

/// Result of a training run.
pub struct TrainOutcome<F: Scalar> {
    pub state: TrainState<F>,
    pub metrics: Vec<MetricRow>,
}

/// Train from scratch.
pub fn train<F: Scalar>(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<F>> {
    train_with(cfg, TrainState::fresh(cfg)?, out_dir, &mut |_| {})
}

/// Continue from `state` until the schedule ends, calling `on_step` per row.
///
/// With an output directory, checkpoints land in `ckpt_<step>.mmvc` plus
/// `final.mmvc`, metrics in `metrics.csv` and the resolved configuration in
/// `config.resolved.toml`.
pub fn train_with<F: Scalar>(
    cfg: &RunConfig,
    mut state: TrainState<F>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&MetricRow),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;
    }
    let data = DataSource::for_config(cfg)?;
    let needs = Needs {
        va: cfg.loss.lambda_va != 0.0,
        vt: cfg.loss.lambda_vt != 0.0,
    };
    let total = cfg.schedule.total_steps;
    let mut metrics = Vec::with_capacity(total.saturating_sub(state.step));
    while state.step < total {
        let lr = cfg.schedule.lr_at(state.step + 1)?;
        let samples = data.batch(cfg, state.step, &mut state.rng)?;
        let refs: Vec<&MultimodalSample> = samples.iter().collect();

        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &state.model.params, Mode::Train);
        let batch = make_batch(&mut fwd, &state.model, &refs, needs)?;
        let bn = fwd.take_bn_updates();
        let loss = combined_loss(&mut tape, &batch, &cfg.loss)?;
        let grads = tape.backward(loss.total)?;
        let value = |v: Option<crate::autodiff::Var>| -> Result<Option<f64>> {
            v.map(|v| tape.value(v).item().map(|x| x.to_f64_lossy())).transpose()
        };
        let row = MetricRow {
            step: state.step,
            lr,
            loss_total: tape.value(loss.total).item()?.to_f64_lossy(),
            loss_va: value(loss.va)?,
            loss_vt: value(loss.vt)?,
        };
        state.opt.step(&mut state.model.params, &grads, lr)?;
        apply_bn_updates(&mut state.model.params, &bn)?;
        state.step += 1;
        on_step(&row);
        metrics.push(row);

        if let Some(dir) = out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < total {
                state.to_checkpoint(cfg)?.save(dir.join(format!("ckpt_{:06}.mmvc", state.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.to_checkpoint(cfg)?.save(dir.join("final.mmvc"))?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
    }
    Ok(TrainOutcome { state, metrics })
}

/// Mean of `loss_total` over the last `window` rows.
pub fn smoothed_final_loss(rows: &[MetricRow], window: usize) -> Option<f64> {
    if rows.is_empty() || window == 0 {
        return None;
    }
    let tail = &rows[rows.len().saturating_sub(window)..];
    Some(tail.iter().map(|r| r.loss_total).sum::<f64>() / tail.len() as f64)
}
