//! Same config and seed, same bytes.

use std::fs;

use mmvc::config::RunConfig;
use mmvc::data::{read_corpus, write_corpus};
use mmvc::train::{raw_sample, train, train_with, Checkpoint, TrainState};

fn quick(extra: &[&str]) -> RunConfig {
    let mut set: Vec<String> = [
        "schedule.total_steps=6",
        "schedule.warmup_steps=2",
        "train.batch_size=4",
        "train.checkpoint_every=3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    set.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, None, &set).unwrap()
}

#[test]
fn identical_runs_write_identical_files() {
    let cfg = quick(&["seed=5"]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train::<f32>(&cfg, Some(a.path())).unwrap();
    train::<f32>(&cfg, Some(b.path())).unwrap();
    for f in ["metrics.csv", "final.mmvc", "ckpt_000003.mmvc", "config.resolved.toml"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = tempfile::tempdir().unwrap();
    train::<f32>(&quick(&["seed=6"]), Some(other.path())).unwrap();
    assert_ne!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(other.path().join("metrics.csv")).unwrap());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let cfg = quick(&["seed=9", "graph.topology=\"shared\""]);
    let a = tempfile::tempdir().unwrap();
    train::<f32>(&cfg, Some(a.path())).unwrap();
    let dumped = fs::read_to_string(a.path().join("config.resolved.toml")).unwrap();
    let again = RunConfig::from_toml(&dumped).unwrap();
    assert_eq!(again, cfg);
    let b = tempfile::tempdir().unwrap();
    train::<f32>(&again, Some(b.path())).unwrap();
    assert_eq!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(b.path().join("metrics.csv")).unwrap());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = quick(&["seed=3"]);
    let full = tempfile::tempdir().unwrap();
    train::<f32>(&cfg, Some(full.path())).unwrap();

    let ck = Checkpoint::load(full.path().join("ckpt_000003.mmvc")).unwrap();
    let (stored, state) = TrainState::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(stored, cfg);
    assert_eq!(state.step, 3);
    let resumed = tempfile::tempdir().unwrap();
    train_with(&stored, state, Some(resumed.path()), &mut |_| {}).unwrap();
    assert_eq!(fs::read(full.path().join("final.mmvc")).unwrap(), fs::read(resumed.path().join("final.mmvc")).unwrap());
    let tail: Vec<String> = fs::read_to_string(full.path().join("metrics.csv")).unwrap().lines().skip(4).map(String::from).collect();
    let got: Vec<String> = fs::read_to_string(resumed.path().join("metrics.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(tail, got);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = quick(&["seed=4"]);
    let dir = tempfile::tempdir().unwrap();
    train::<f32>(&cfg, Some(dir.path())).unwrap();
    let path = dir.path().join("final.mmvc");
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let (_, state) = TrainState::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(state.to_checkpoint(&cfg).unwrap().to_bytes(), bytes);
}

#[test]
fn a_written_corpus_trains_without_regeneration() {
    let cfg = quick(&["seed=2"]);
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("pool.mmvd");
    let samples: Vec<_> = (0..12).map(|i| raw_sample(&cfg, i).unwrap()).collect();
    write_corpus(&corpus, &samples).unwrap();
    assert_eq!(read_corpus(&corpus).unwrap(), samples);

    let mut with_file = cfg.clone();
    with_file.corpus = Some(corpus.to_string_lossy().into_owned());
    let a = train::<f32>(&with_file, None).unwrap();
    let b = train::<f32>(&with_file, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert!(a.metrics.iter().all(|r| r.loss_total.is_finite()));

    // The same pool generated in memory gives the same run.
    let mut pooled = cfg.clone();
    pooled.train.pool_size = 12;
    let c = train::<f32>(&pooled, None).unwrap();
    assert_eq!(a.metrics, c.metrics);
}
