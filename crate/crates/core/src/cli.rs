//! Command-line front end. [`run`] returns the process exit code so that
//! tests can drive it in-process.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a check ran and failed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{Preset, RunConfig, OUTPUT_ROOT_ENV};
use crate::data::{read_corpus, write_corpus};
use crate::deflation::{calibration_images, middle_frames, recalibrate, Method};
use crate::encoders::VideoClip;
use crate::error::{Error, Result};
use crate::eval::{eval_view, run_task, Task};
use crate::gradsuite::{self, Scope, THRESHOLD};
use crate::train::{load_model, model_checkpoint, raw_sample, train_with, Checkpoint, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "mmvc", version, about = "Multimodal contrastive video, audio and text representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the file: ht-like or ht+as-like.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set graph.topology="shared"`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let preset = self.preset.as_deref().map(Preset::parse).transpose()?;
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?),
            None => None,
        };
        RunConfig::resolve(preset, text.as_deref(), &self.set)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, metrics.csv and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `output_dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long, conflicts_with_all = ["config", "preset", "set"])]
        resume: Option<PathBuf>,
        /// Print a progress line every N steps (0 silences it).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Run a downstream task on a checkpoint and write a metric CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// probe-video, probe-audio, retrieval-t2v or retrieval-t2a.
        #[arg(long)]
        task: String,
        /// Metric CSV path (stdout only when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra overrides for the evaluation section, e.g. `eval.probe_samples=400`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Collapse the video network to a single-image network.
    Deflate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// naive or recalibrated.
        #[arg(long, default_value = "recalibrated")]
        method: String,
        /// Corpus file whose middle video frames serve as calibration images.
        #[arg(long, conflicts_with = "synthetic_images")]
        images: Option<PathBuf>,
        /// Generate this many calibration images instead.
        #[arg(long)]
        synthetic_images: Option<usize>,
        /// Directory receiving `deflated.mmvc` and `report.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// ops, losses or end-to-end.
        #[arg(long, default_value = "ops")]
        scope: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Corrupt the analytic gradients; the check must then fail.
        #[arg(long)]
        tamper: bool,
    },
    /// Write a synthetic corpus file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Relative paths land under `$MMVC_OUTPUT_ROOT` when it is set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::UnreachablePair { .. }
        | Error::UnreachableTask { .. }
        | Error::SpaceMismatch(..)
        | Error::OutOfVocabulary { .. } => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { cfg, out, resume, log_every } => cmd_train(&cfg, out, resume, log_every),
        Command::Eval { checkpoint, task, out, set } => cmd_eval(&checkpoint, &task, out, &set),
        Command::Deflate { checkpoint, method, images, synthetic_images, out, set } => {
            cmd_deflate(&checkpoint, &method, images, synthetic_images, &out, &set)
        }
        Command::Gradcheck { scope, seeds, tamper } => cmd_gradcheck(&scope, seeds, tamper),
        Command::GenData { cfg, seed, n, out } => cmd_gen_data(&cfg, seed, n, &out),
        Command::Config { cfg } => {
            print!("{}", cfg.resolve()?.to_toml()?);
            Ok(EXIT_OK)
        }
    }
}

fn cmd_train(args: &ConfigArgs, out: Option<PathBuf>, resume: Option<PathBuf>, log_every: usize) -> Result<i32> {
    let (cfg, state) = match resume {
        Some(path) => TrainState::<f32>::from_checkpoint(&Checkpoint::load(&path)?)?,
        None => {
            let cfg = args.resolve()?;
            let state = TrainState::fresh(&cfg)?;
            (cfg, state)
        }
    };
    let dir = output_path(&out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir)));
    let total = cfg.schedule.total_steps;
    let mut log = |row: &crate::train::MetricRow| {
        if log_every > 0 && ((row.step + 1) % log_every == 0 || row.step + 1 == total) {
            eprintln!("step {:>6}/{total}  lr {:.2e}  loss {:.4}", row.step + 1, row.lr, row.loss_total);
        }
    };
    train_with(&cfg, state, Some(&dir), &mut log)?;
    println!("{}", dir.display());
    Ok(EXIT_OK)
}

/// Checkpoint config with evaluation overrides layered on top.
fn checkpoint_config(ck_config: &str, set: &[String]) -> Result<RunConfig> {
    RunConfig::resolve(None, Some(ck_config), set)
}

fn cmd_eval(checkpoint: &Path, task: &str, out: Option<PathBuf>, set: &[String]) -> Result<i32> {
    let task = Task::parse(task)?;
    let (stored, model) = load_model::<f32>(checkpoint)?;
    let cfg = checkpoint_config(&stored.to_toml()?, set)?;
    let report = run_task(&model, &cfg, task)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = out {
        let path = output_path(&path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, csv)?;
    }
    Ok(EXIT_OK)
}

fn cmd_deflate(checkpoint: &Path, method: &str, images: Option<PathBuf>, synthetic: Option<usize>, out: &Path, set: &[String]) -> Result<i32> {
    let method = match method {
        "naive" => Method::Naive,
        "recalibrated" => Method::Recalibrated,
        other => return Err(Error::Config(format!("unknown deflation method `{other}` (expected naive or recalibrated)"))),
    };
    let (stored, model) = load_model::<f32>(checkpoint)?;
    let mut cfg = checkpoint_config(&stored.to_toml()?, set)?;
    cfg.deflate.method = method;
    let imgs = match (images, synthetic) {
        (Some(path), _) => {
            let samples = read_corpus(&path)?;
            let views = samples
                .iter()
                .filter(|s| s.video.is_some())
                .map(|s| eval_view(s, &cfg))
                .collect::<Result<Vec<_>>>()?;
            let clips: Vec<&VideoClip> = views.iter().filter_map(|s| s.video.as_ref()).collect();
            middle_frames(&clips)?
        }
        (None, Some(n)) => calibration_images(&cfg, n)?.0,
        (None, None) => return Err(Error::invalid("missing calibration data: pass --images or --synthetic-images")),
    };
    if imgs.len() < 2 {
        return Err(Error::invalid(format!("missing calibration data: {} usable images", imgs.len())));
    }
    let result = recalibrate(&model, &imgs, &cfg.deflate, cfg.seed)?;
    let dir = output_path(out);
    std::fs::create_dir_all(&dir)?;
    model_checkpoint(&cfg, &result.model.params)?.save(dir.join("deflated.mmvc"))?;
    let report = format!(
        "metric,value\nnaive_gap,{}\ngap,{}\nepochs,{}\nimages,{}\n",
        result.naive_gap,
        result.gap,
        result.history.len(),
        imgs.len()
    );
    std::fs::write(dir.join("report.csv"), &report)?;
    print!("{report}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(scope: &str, seeds: usize, tamper: bool) -> Result<i32> {
    let scope = Scope::parse(scope)?;
    if seeds == 0 {
        return Err(Error::invalid("--seeds must be positive"));
    }
    let lines = gradsuite::run(scope, seeds, tamper)?;
    let mut ok = true;
    for l in &lines {
        ok &= l.passed();
        println!(
            "{:<28} seeds {:>3}  coords {:>7}  kinks {:>3}  max_rel_error {:.3e}  {}{}",
            l.name,
            l.seeds,
            l.coordinates,
            l.kinks,
            l.max_rel_error,
            if l.passed() { "ok" } else { "FAIL" },
            match (&l.worst, l.passed()) {
                (Some((seed, name, i)), false) => format!("  (seed {seed}, {name}[{i}])"),
                _ => String::new(),
            }
        );
    }
    println!("threshold {THRESHOLD:e}: {}", if ok { "pass" } else { "fail" });
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_gen_data(args: &ConfigArgs, seed: Option<u64>, n: usize, out: &Path) -> Result<i32> {
    let mut cfg = args.resolve()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = (0..n as u64).map(|i| raw_sample(&cfg, i)).collect::<Result<Vec<_>>>()?;
    let path = output_path(out);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_corpus(&path, &samples)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}
