//! End-to-end runs of the `cbgan` binary on a tiny toy corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbgan_core::audio::{read_wav, write_wav};
use cbgan_core::dataset::toy_tone;
use cbgan_core::training::load_checkpoint;

fn cbgan(args: &[&str]) -> Output {
    cbgan_env(args, None)
}

fn cbgan_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cbgan"));
    cmd.args(args).env_remove("CBGAN_SEED");
    if let Some(s) = seed {
        cmd.env("CBGAN_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_corpus(dir: &Path) -> PathBuf {
    let corpus = dir.join("toy");
    let o = cbgan(&["prepare", "--toy", "3", "--out-dir", s(&corpus), "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    corpus
}

fn quick_train(manifest: &Path, out: &Path, extra: &[&str], seed_env: Option<&str>) -> Output {
    let mut args = vec![
        "train",
        "--variant",
        "m1",
        "--desk",
        "--manifest",
        s(manifest),
        "--out-dir",
        s(out),
        "--steps",
        "2",
        "--ckpt-every",
        "1",
        "--batch-size",
        "2",
        "--crop-frames",
        "32",
    ];
    args.extend_from_slice(extra);
    cbgan_env(&args, seed_env)
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&cbgan(&["--help"])), 0);
    assert_eq!(code(&cbgan(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cbgan(&["train", "--bogus"])), 1);
    assert_eq!(code(&cbgan(&[])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = cbgan(&["train", "--variant", "m9", "--manifest", "x.tsv", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&cbgan(&["prepare", "--out-dir", s(dir.path())])), 1);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let o = cbgan(&["train", "--variant", "m1", "--manifest", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = cbgan(&["eval", "--source", s(&missing), "--transferred", s(&missing)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_transfer_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path());
    let run = dir.path().join("run");
    let o = quick_train(&corpus.join("manifest.tsv"), &run, &["--seed", "4"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(String::from).collect();
    let expected: Vec<PathBuf> = ["m1_step0001.ckpt", "m1_step0002.ckpt"].iter().map(|n| run.join(n)).collect();
    assert_eq!(printed, expected.iter().map(|p| p.display().to_string()).collect::<Vec<_>>());
    assert!(run.join("m1_loss.log").is_file());
    assert_eq!(load_checkpoint(&expected[1]).unwrap().step, 2);

    // A 7 s input comes back exactly 7 s long.
    let input = dir.path().join("seven.wav");
    write_wav(&input, &toy_tone(150.0, 0.0, 7 * 44_100, 44_100)).unwrap();
    let output = dir.path().join("out.wav");
    let dump = dir.path().join("out.spec");
    let o = cbgan(&[
        "transfer",
        "--ckpt",
        s(&expected[1]),
        "--direction",
        "a2b",
        "--in",
        s(&input),
        "--out",
        s(&output),
        "--gl-iters",
        "3",
        "--dump",
        s(&dump),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("spectral_convergence="));
    assert_eq!(read_wav(&output).unwrap().len(), 7 * 44_100);

    let report = dir.path().join("report.txt");
    let o = cbgan(&["eval", "--source", s(&input), "--transferred", s(&output), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&report).unwrap().lines().count() >= 3);

    for src in [&input, &dump] {
        let pgm = dir.path().join("plot.pgm");
        let o = cbgan(&["plot", "--in", s(src), "--out", s(&pgm)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
    }

    let o = cbgan(&["transfer", "--ckpt", s(&expected[1]), "--direction", "sideways", "--in", s(&input), "--out", s(&output)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn seed_precedence_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path());
    let manifest = corpus.join("manifest.tsv");

    let from_env = dir.path().join("env");
    assert_eq!(code(&quick_train(&manifest, &from_env, &[], Some("11"))), 0);
    assert_eq!(load_checkpoint(from_env.join("m1_step0001.ckpt")).unwrap().seed, 11);

    let from_flag = dir.path().join("flag");
    assert_eq!(code(&quick_train(&manifest, &from_flag, &["--seed", "12"], Some("11"))), 0);
    assert_eq!(load_checkpoint(from_flag.join("m1_step0001.ckpt")).unwrap().seed, 12);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed=13\n").unwrap();
    let from_file = dir.path().join("file");
    let o = quick_train(&manifest, &from_file, &["--config", s(&cfg)], Some("11"));
    assert_eq!(code(&o), 0);
    assert_eq!(load_checkpoint(from_file.join("m1_step0001.ckpt")).unwrap().seed, 13);

    assert_eq!(code(&quick_train(&manifest, &dir.path().join("bad"), &[], Some("minus one"))), 1);
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path());
    let o = quick_train(
        &corpus.join("manifest.tsv"),
        &dir.path().join("run"),
        &["--learning-rate", "1e30"],
        None,
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
