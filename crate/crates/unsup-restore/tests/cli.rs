use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unsup_restore::audio::load_wav;
use unsup_restore::checkpoint::{file_digest, load_bundle};
use unsup_restore::manifest::{Manifest, Split};
use unsup_restore_core::dsp::DspConfig;

const BIN: &str = env!("CARGO_BIN_EXE_unsup-restore");

const CONFIG: &str = r#"
seed = 3

[model]
levels = 2
blocks_per_level = 1
analysis_width = 6
channel_width = 4
channel_dim = 6
channel_head_hidden = 6
vocoder_width = 8
reference_iterations = 4

[loss]
windows = [512, 128]

[train]
max_epochs = 2
clip_seconds = 0.25

[vocoder_train]
steps = 3

[eval.split]
val = 2
test = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env_remove("UNSUP_RESTORE_CACHE").args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A config file plus a corpus and a band-limited dataset.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    ok(d, &["--config", "cfg.toml", "make-corpus", "--out-dir", "corpus", "--count", "8", "--seconds", "0.4"]);
    ok(d, &["--config", "cfg.toml", "build-dataset", "--kind", "band_limited", "--clean-manifest", "corpus/manifest.csv", "--out-dir", "data"]);
    tmp
}

#[test]
fn help_for_every_subcommand() {
    let dir = std::env::temp_dir();
    let top = run(&dir, &["--help"]);
    assert!(top.status.success());
    let text = String::from_utf8_lossy(&top.stdout).into_owned();
    for sub in ["degrade", "build-dataset", "make-corpus", "train-vocoder", "pretrain", "train", "restore", "transfer", "evaluate"] {
        assert!(text.contains(sub), "{sub} missing from top-level help");
        let out = run(&dir, &[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn invalid_beta_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[train]\nbeta = 1.5\n").unwrap();
    let out = run(tmp.path(), &["--config", "bad.toml", "make-corpus", "--out-dir", "c", "--count", "4", "--seconds", "0.2"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("train.beta"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(!tmp.path().join("c").exists());
}

#[test]
fn unknown_keys_and_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = run(tmp.path(), &["--config", "bad.toml", "make-corpus", "--out-dir", "c"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    let out = run(tmp.path(), &["make-corpus", "--out-dir", "c", "--bogus"]);
    assert!(!out.status.success());
    let out = run(tmp.path(), &["degrade", "--kind", "clipped", "--cutoff-hz", "3000", "--in-manifest", "m.csv", "--out-dir", "o"]);
    assert!(!out.status.success());
}

#[test]
fn end_to_end_pipeline() {
    let tmp = workspace();
    let d = tmp.path();
    let cfg = ["--config", "cfg.toml"];
    let with = |args: &[&str]| -> Vec<String> { cfg.iter().chain(args).map(|s| s.to_string()).collect() };
    let go = |args: &[&str]| {
        let a = with(args);
        ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>());
    };

    let m = Manifest::read(d.join("data/manifest.csv")).unwrap();
    assert_eq!(m.len(), 8);
    assert_eq!(m.split(Split::Test).count(), 2);
    assert!(m.items.iter().all(|it| it.degraded_path.as_ref().is_some_and(|p| p.exists())));

    go(&["train-vocoder", "--clean-manifest", "corpus/manifest.csv", "--out-dir", "voc"]);
    go(&["pretrain", "--clean-manifest", "corpus/manifest.csv", "--out-dir", "pre", "--max-epochs", "1"]);
    go(&[
        "train",
        "--task",
        "dual",
        "--train-manifest",
        "data/manifest.csv",
        "--clean-manifest",
        "corpus/manifest.csv",
        "--vocoder-ckpt",
        "voc/vocoder.ckpt",
        "--init-ckpt",
        "pre/ckpt_best",
        "--out-dir",
        "dual",
    ]);
    for run_dir in ["voc", "pre", "dual"] {
        for f in ["config.toml", "command.txt", "seed"] {
            assert!(d.join(run_dir).join(f).exists(), "{run_dir}/{f}");
        }
    }
    assert_eq!(std::fs::read_to_string(d.join("dual/seed")).unwrap().trim(), "3");
    let history = std::fs::read_to_string(d.join("dual/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");
    assert!(history.starts_with("epoch,train_loss,val_loss,lr"));

    let bundle = load_bundle(d.join("dual/ckpt_best")).unwrap().bundle;
    let (voc, _) = unsup_restore::checkpoint::load_vocoder(d.join("voc/vocoder.ckpt"), &DspConfig::default()).unwrap();
    assert_eq!(bundle.synthesis.params.checksum(), voc.params.checksum());

    let input = m.items[0].degraded_path.clone().unwrap();
    let input = input.to_str().unwrap();
    let dsp = DspConfig::default();
    let len = load_wav(input, &dsp).unwrap().len();
    for (vocoder, out) in [("toy-neural", "toy.wav"), ("reference", "ref.wav")] {
        go(&["restore", "--in", input, "--out", out, "--ckpt", "dual/ckpt_best", "--vocoder", vocoder]);
        assert_eq!(load_wav(d.join(out), &dsp).unwrap().len(), len);
    }
    go(&["restore", "--in", input, "--out", "ext.wav", "--ckpt", "dual/ckpt_best", "--vocoder", "external", "--vocoder-ckpt", "voc/vocoder.ckpt"]);
    assert_eq!(file_digest(d.join("ext.wav")).unwrap(), file_digest(d.join("toy.wav")).unwrap());
    go(&["restore", "--in", input, "--out", "chunk.wav", "--ckpt", "dual/ckpt_best", "--chunk-seconds", "0.1"]);
    assert_eq!(load_wav(d.join("chunk.wav"), &dsp).unwrap().len(), len);

    let clean = m.items[1].clean_path.to_str().unwrap().to_string();
    go(&["transfer", "--reference", input, "--in", &clean, "--out", "moved.wav", "--ckpt", "dual/ckpt_best"]);
    assert_eq!(load_wav(d.join("moved.wav"), &dsp).unwrap().len(), load_wav(&clean, &dsp).unwrap().len());

    go(&["evaluate", "--manifest", "data/manifest.csv", "--ckpt", "dual/ckpt_best", "--metrics", "mcd,msd", "--out", "report.csv"]);
    go(&["evaluate", "--manifest", "data/manifest.csv", "--out", "inputs.csv"]);
    let report = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.starts_with("id,mcd,spectral_distance"));
    assert_eq!(report.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.summary.json")).unwrap()).unwrap();
    assert!(summary["mcd"]["mean"].as_f64().unwrap() > 0.0);

    // every output stayed where it was asked to go
    let mut top: Vec<String> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    let expected = [
        "cfg.toml", "chunk.wav", "corpus", "data", "dual", "ext.wav", "inputs.csv", "inputs.summary.json", "moved.wav", "pre",
        "ref.wav", "report.csv", "report.summary.json", "toy.wav", "voc",
    ];
    assert_eq!(top, expected);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = workspace();
    let d = tmp.path();
    let base = ["--config", "cfg.toml", "train", "--task", "forward_only", "--train-manifest", "data/manifest.csv"];
    let args = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let go = |a: Vec<String>| ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>());
    go(args(&["--out-dir", "full", "--max-epochs", "3"]));
    go(args(&["--out-dir", "part", "--max-epochs", "1"]));
    go(args(&["--out-dir", "resumed", "--max-epochs", "3", "--resume", "part/ckpt_1"]));
    assert!(!d.join("resumed/ckpt_1").exists());
    for f in ["ckpt_2", "ckpt_3", "ckpt_best", "history.csv"] {
        assert_eq!(file_digest(d.join("full").join(f)).unwrap(), file_digest(d.join("resumed").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn guards_report_one_line_causes() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["--config", "cfg.toml", "train", "--task", "forward_only", "--train-manifest", "data/manifest.csv", "--out-dir", "r", "--max-epochs", "1"]);
    let input: PathBuf = Manifest::read(d.join("data/manifest.csv")).unwrap().items[0].degraded_path.clone().unwrap();
    let input = input.to_str().unwrap();

    let out = run(d, &["restore", "--in", input, "--out", "x.wav", "--ckpt", "r/ckpt_best", "--vocoder", "external"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing vocoder checkpoint"), "{}", stderr(&out));

    // a config describing a different architecture cannot load the checkpoint
    let out = run(d, &["restore", "--in", input, "--out", "x.wav", "--ckpt", "r/ckpt_best"]);
    assert!(out.status.success(), "{}", stderr(&out));
    std::fs::write(d.join("other.toml"), CONFIG.replace("analysis_width = 6", "analysis_width = 10")).unwrap();
    let out = run(d, &["--config", "other.toml", "restore", "--in", input, "--out", "x.wav", "--ckpt", "r/ckpt_best"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("fingerprint"), "{}", stderr(&out));

    let out = run(d, &["--config", "cfg.toml", "restore", "--in", "missing.wav", "--out", "y.wav", "--ckpt", "r/ckpt_best"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.wav"), "{}", stderr(&out));
    assert!(!d.join("y.wav").exists());

    let out = run(d, &["--config", "cfg.toml", "train", "--task", "dual", "--train-manifest", "data/manifest.csv", "--out-dir", "z"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("clean-manifest"), "{}", stderr(&out));
}
