//! The `mmvc` binary end to end: files written, exit codes returned.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: [&str; 8] = [
    "--set",
    "schedule.total_steps=4",
    "--set",
    "schedule.warmup_steps=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.checkpoint_every=2",
];

fn mmvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvc")).args(args).env_remove("MMVC_OUTPUT_ROOT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_quick(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out, "--log-every", "0"];
    args.extend(QUICK);
    args.extend(extra);
    mmvc(&args)
}

#[test]
fn train_from_a_config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fac.toml");
    fs::write(&cfg, "seed = 3\n[graph]\ntopology = \"fac\"\n").unwrap();
    let run = dir.path().join("run");
    let o = train_quick(&run, &["--config", cfg.to_str().unwrap(), "--set", "seed=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["final.mmvc", "ckpt_000002.mmvc", "metrics.csv", "config.resolved.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 1"));
    // Every default is spelled out.
    assert!(resolved.contains("lambda_vt") && resolved.contains("warmup_steps") && resolved.contains("shift_fraction"));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,lr,loss_total,loss_va,loss_vt"));

    // Rerun: identical metrics.
    let again = dir.path().join("again");
    assert_eq!(code(&train_quick(&again, &["--config", cfg.to_str().unwrap(), "--set", "seed=1"])), 0);
    assert_eq!(csv, fs::read_to_string(again.join("metrics.csv")).unwrap());

    // Resume the interrupted run from its middle checkpoint.
    let resumed = dir.path().join("resumed");
    let o = mmvc(&["train", "--resume", run.join("ckpt_000002.mmvc").to_str().unwrap(), "--out", resumed.to_str().unwrap(), "--log-every", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(run.join("final.mmvc")).unwrap(), fs::read(resumed.join("final.mmvc")).unwrap());
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_quick(dir.path(), &["--set", "graph.topology=\"ring\""]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("topology"), "{}", stderr(&o));
    let o = train_quick(dir.path(), &["--set", "graph.colour=1"]);
    assert_eq!(code(&o), 1);
    let o = train_quick(dir.path(), &["--preset", "nope"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&mmvc(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&mmvc(&["eval", "--checkpoint", "x.mmvc", "--task", "retrieval-v2t"])), 1);
    // A missing checkpoint is a runtime failure.
    assert_eq!(code(&mmvc(&["eval", "--checkpoint", "/nonexistent/x.mmvc", "--task", "probe-video"])), 2);
}

#[test]
fn eval_tasks_follow_the_topology() {
    let dir = tempfile::tempdir().unwrap();
    let disjoint = dir.path().join("disjoint");
    assert_eq!(code(&train_quick(&disjoint, &["--set", "graph.topology=\"disjoint\""])), 0);
    let fac = dir.path().join("fac");
    assert_eq!(code(&train_quick(&fac, &[])), 0);
    let small = ["--set", "eval.retrieval_items=16", "--set", "eval.probe_samples=64", "--set", "eval.probe.steps=20"];

    let ck = disjoint.join("final.mmvc");
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--task", "retrieval-t2a"];
    args.extend(small);
    let o = mmvc(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not available"), "{}", stderr(&o));

    let ck = fac.join("final.mmvc");
    let csv = dir.path().join("t2a.csv");
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--task", "retrieval-t2a", "--out", csv.to_str().unwrap()];
    args.extend(small);
    let o = mmvc(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("metric,value\n") && text.contains("R@10,") && text.contains("MedR,"));

    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--task", "probe-video"];
    args.extend(small);
    let o = mmvc(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("top1,"));
}

#[test]
fn deflate_reports_both_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train_quick(&run, &[])), 0);
    let ck = run.join("final.mmvc");
    let out = dir.path().join("naive");
    let o = mmvc(&["deflate", "--checkpoint", ck.to_str().unwrap(), "--method", "naive", "--synthetic-images", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.contains("naive_gap,") && report.contains("\ngap,") && report.contains("epochs,0"));
    assert!(out.join("deflated.mmvc").exists());

    let corpus = dir.path().join("imgs.mmvd");
    assert_eq!(code(&mmvc(&["gen-data", "--n", "12", "--out", corpus.to_str().unwrap()])), 0);
    let out = dir.path().join("recal");
    let o = mmvc(&[
        "deflate", "--checkpoint", ck.to_str().unwrap(), "--images", corpus.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--set", "deflate.epochs=3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let get = |k: &str| -> f64 { report.lines().find_map(|l| l.strip_prefix(&format!("{k},"))).unwrap().parse().unwrap() };
    assert!(get("gap") <= get("naive_gap"));

    let o = mmvc(&["deflate", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("calibration"));
}

#[test]
fn gradcheck_passes_and_catches_tampering() {
    let o = mmvc(&["gradcheck", "--scope", "losses", "--seeds", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = mmvc(&["gradcheck", "--scope", "ops", "--seeds", "2", "--tamper"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(code(&mmvc(&["gradcheck", "--scope", "everything"])), 1);
}

#[test]
fn gen_data_is_deterministic_and_handles_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mmvd");
    let b = dir.path().join("b.mmvd");
    for p in [&a, &b] {
        assert_eq!(code(&mmvc(&["gen-data", "--seed", "4", "--n", "5", "--out", p.to_str().unwrap()])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(mmvc::data::read_corpus(&a).unwrap().len(), 5);

    let empty = dir.path().join("empty.mmvd");
    assert_eq!(code(&mmvc(&["gen-data", "--n", "0", "--out", empty.to_str().unwrap()])), 0);
    assert!(mmvc::data::read_corpus(&empty).unwrap().is_empty());

    // Training straight from the generated file.
    let run = dir.path().join("run");
    let o = train_quick(&run, &["--set", &format!("corpus=\"{}\"", a.display())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // An empty corpus is rejected as a configuration problem.
    let o = train_quick(&run, &["--set", &format!("corpus=\"{}\"", empty.display())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn output_root_prefixes_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mmvc"))
        .args(["gen-data", "--n", "1", "--out", "nested/one.mmvd"])
        .env("MMVC_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.path().join("nested/one.mmvd").exists());
}

#[test]
fn config_command_dumps_presets() {
    let o = mmvc(&["config", "--preset", "ht-like"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("lambda_va = 0.1"));
    assert!(text.contains("rho = 0.0"));
}
