//! Run configuration: one TOML document, named presets and `--set` overrides.
//!
//! Layers apply in order defaults, preset, file, overrides; the merged
//! document is then checked against the schema, so unknown keys fail.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data::WorldSpec;
use crate::deflation::DeflateConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::graph::GraphConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::train::{Schedule, TrainConfig};

/// Environment variable naming the root that relative output directories live under.
pub const OUTPUT_ROOT_ENV: &str = "MMVC_OUTPUT_ROOT";

fn output_default() -> String {
    "runs/default".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "output_default")]
    pub output_dir: String,
    /// Corpus file to train on instead of generated samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub encoders: EncoderConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub deflate: DeflateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Named loss-weight and corpus-mix settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Narrated-video corpus: every clip has text, `lambda_vt : lambda_va = 10 : 1`.
    HtLike,
    /// Mixed corpus where half the clips lack text, weights `1 : 1`.
    HtAsLike,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ht-like" => Ok(Preset::HtLike),
            "ht+as-like" => Ok(Preset::HtAsLike),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected ht-like or ht+as-like)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::HtLike => "ht-like",
            Preset::HtAsLike => "ht+as-like",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Preset::HtLike => {
                cfg.loss.lambda_va = 0.1;
                cfg.loss.lambda_vt = 1.0;
                cfg.world.rho = 0.0;
            }
            Preset::HtAsLike => {
                cfg.loss.lambda_va = 1.0;
                cfg.loss.lambda_vt = 1.0;
                cfg.world.rho = 0.5;
            }
        }
    }
}

impl RunConfig {
    /// Merge the layers and validate.
    pub fn resolve(preset: Option<Preset>, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut base = RunConfig::default();
        if let Some(p) = preset {
            p.apply(&mut base);
        }
        let mut doc = Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = file {
            let layer: Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut doc, layer);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved document, every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoders: self.encoders.clone(),
            graph: self.graph.clone(),
        }
    }

    /// Audio samples per training clip, including room for temporal jitter.
    pub fn training_audio_len(&self) -> usize {
        let margin = (self.train.augment.temporal_offset_secs * self.world.sample_rate).round() as usize;
        self.world.audio_samples() + 2 * margin
    }

    /// Frames the network sees after temporal sampling.
    pub fn clip_frames(&self) -> usize {
        match self.train.augment.clip_frames {
            0 => self.world.frames,
            n => n,
        }
    }

    /// Spatial size the network sees after resize and crop.
    pub fn view_size(&self) -> (usize, usize) {
        let a = &self.train.augment;
        match (a.crop, a.resize) {
            (0, 0) => (self.world.height, self.world.width),
            (0, r) => (r, r),
            (c, _) => (c, c),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoders.validate()?;
        self.graph.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.train.augment.validate()?;
        self.eval.validate()?;
        self.deflate.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.train.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.train.batch_size));
        }
        if self.clip_frames() > self.world.frames {
            return bad(format!("clip_frames {} exceeds generated frames {}", self.clip_frames(), self.world.frames));
        }
        if self.clip_frames() != self.encoders.frames {
            return bad(format!(
                "clips hold {} frames but the video encoder expects {}",
                self.clip_frames(),
                self.encoders.frames
            ));
        }
        let (h, w) = self.view_size();
        if h != self.encoders.crop || w != self.encoders.crop {
            return bad(format!("augmented frames are {h}x{w} but the video encoder expects {0}x{0}", self.encoders.crop));
        }
        if self.world.sample_rate != self.encoders.sample_rate {
            return bad("world and encoder sample rates differ".into());
        }
        if self.world.audio_samples() != self.encoders.audio_samples() {
            return bad(format!(
                "world audio has {} samples but the audio encoder expects {}",
                self.world.audio_samples(),
                self.encoders.audio_samples()
            ));
        }
        if self.world.vocab_size != self.encoders.vocab_size {
            return bad("world and encoder vocabulary sizes differ".into());
        }
        Ok(())
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Table(b), Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply `dotted.key=value`; the value is read as TOML, falling back to a bare string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
