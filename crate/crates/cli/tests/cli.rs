use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn vidiff(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidiff"))
        .args(args)
        .env("VIDIFF_RUNS", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) {
    let out = vidiff(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

/// Every file under `dir` with its bytes, sorted by path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: [&str; 3] = ["--set", "data.size=[16, 32]", "--set=denoiser.image_size=[16, 32]"];

#[test]
fn synth_twice_gives_identical_manifests() {
    let root = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(root.path(), &["--name", name, "synth", "--n-ids", "4", "--per-id", "4", "--seed", "1"]);
    }
    for split in ["dataset", "eval"] {
        let rel = format!("{split}/manifest.csv");
        let a = fs::read(root.path().join("a/images").join(&rel)).unwrap();
        let b = fs::read(root.path().join("b/images").join(&rel)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{rel}");
    }
    assert_eq!(
        snapshot(&root.path().join("a/images")),
        snapshot(&root.path().join("b/images"))
    );
}

#[test]
fn invalid_config_exits_2_with_key_path() {
    let root = tempfile::tempdir().unwrap();
    let out = vidiff(root.path(), &["--name", "x", "--set", "train.stepz=3", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("train.stepz"), "{err}");

    let out = vidiff(root.path(), &["--name", "x", "--set", "train.learning_rate=-1", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("train"));

    let out = vidiff(root.path(), &["--config", "/nonexistent/run.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoints_exit_3() {
    let root = tempfile::tempdir().unwrap();
    for cmd in ["translate", "eval"] {
        let out = vidiff(root.path(), &["--name", "empty", cmd]);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        assert_eq!(error_json(&out)["error"], "checkpoint");
    }
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = root.path().join("c/ckpt/denoiser");
    fs::create_dir_all(&ckpt).unwrap();
    fs::write(ckpt.join("manifest.json"), "{not json").unwrap();
    fs::write(ckpt.join("params.bin"), b"garbage").unwrap();
    let out = vidiff(root.path(), &["--name", "c", "translate"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reduced_pipeline_emits_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let run = |extra: &[&str]| {
        let mut args = vec!["--name", "p"];
        args.extend_from_slice(&SMALL);
        args.extend_from_slice(extra);
        ok(r, &args);
    };
    run(&["synth", "--n-ids", "3", "--per-id", "2"]);
    run(&["train-diff", "--steps", "4"]);
    run(&["translate", "--set", "sampler.ddim_steps=4"]);
    run(&["train-reid", "--steps", "10"]);
    run(&["eval"]);
    run(&["gap-plot"]);
    run(&["ablate", "--set", "reid.steps=5", "--set", "sampler.ddim_steps=4", "--limit", "3"]);
    let dir = r.join("p");
    for f in [
        "config.toml",
        "logs/commands.log",
        "logs/train_diff.csv",
        "logs/train_reid.csv",
        "logs/train_diff_nocond.csv",
        "ckpt/denoiser/params.bin",
        "ckpt/denoiser_nocond/params.bin",
        "ckpt/reid/params.bin",
        "images/dataset/manifest.csv",
        "images/eval/manifest.csv",
        "images/translated/manifest.csv",
        "images/translate_grid.png",
        "images/eval_embeddings.png",
        "images/gap_highpass.png",
        "images/gap_lowpass.png",
        "images/ablation_condition.png",
        "metrics/synth.csv",
        "metrics/train_diff.csv",
        "metrics/translate.csv",
        "metrics/train_reid.csv",
        "metrics/eval.csv",
        "metrics/eval_accuracy.csv",
        "metrics/gap.csv",
        "metrics/ablation_loss.csv",
        "metrics/ablation_condition.csv",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let ablation = fs::read_to_string(dir.join("metrics/ablation_loss.csv")).unwrap();
    let lines: Vec<&str> = ablation.lines().collect();
    assert_eq!(lines[0], "GCE,LSR,accuracy");
    assert_eq!(lines.len(), 5);
    let flags: Vec<&str> = lines[1..].iter().map(|l| &l[..3]).collect();
    assert_eq!(flags, ["0,0", "1,0", "0,1", "1,1"]);
    let log = fs::read_to_string(dir.join("logs/train_diff.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let translated = fs::read_to_string(dir.join("images/translated/manifest.csv")).unwrap();
    assert_eq!(translated.lines().count(), 7);
    assert!(translated.lines().skip(1).all(|l| l.ends_with(",infrared")));
}

#[test]
fn config_snapshot_replays_bit_for_bit() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let mut args = vec!["--name", "a"];
    args.extend_from_slice(&SMALL);
    ok(r, &[&args[..], &["train-diff", "--steps", "3"]].concat());
    let cfg = r.join("a/config.toml");
    let cfg = cfg.to_str().unwrap();
    ok(r, &["--name", "b", "--config", cfg, "train-diff"]);
    let a = fs::read(r.join("a/ckpt/denoiser/params.bin")).unwrap();
    let b = fs::read(r.join("b/ckpt/denoiser/params.bin")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(r.join("a/logs/train_diff.csv")).unwrap(),
        fs::read(r.join("b/logs/train_diff.csv")).unwrap()
    );
}

#[test]
fn input_dataset_directory_is_not_modified() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let mut args = vec!["--name", "src"];
    args.extend_from_slice(&SMALL);
    ok(r, &[&args[..], &["synth", "--n-ids", "2", "--per-id", "2"]].concat());
    let data = r.join("src/images/dataset");
    let before = snapshot(&data);
    let data_arg = data.to_str().unwrap();
    let mut args = vec!["--name", "dst"];
    args.extend_from_slice(&SMALL);
    ok(r, &[&args[..], &["train-diff", "--steps", "2", "--data", data_arg]].concat());
    ok(r, &[&args[..], &["translate", "--data", data_arg, "--set", "sampler.ddim_steps=2"]].concat());
    assert_eq!(snapshot(&data), before);
    assert!(r.join("dst/images/translated/manifest.csv").is_file());
}

#[test]
fn default_run_name_is_a_timestamp() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["synth", "--n-ids", "2", "--per-id", "1"]);
    let names: Vec<String> = fs::read_dir(root.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 1);
    let name = &names[0];
    assert!(name.starts_with("20") && name.chars().all(|c| c.is_ascii_digit() || c == '-'), "{name}");
}

#[test]
#[ignore = "full 500-step toy pipeline; several minutes of CPU"]
fn full_toy_pipeline_under_ten_minutes() {
    let root = tempfile::tempdir().unwrap();
    let start = Instant::now();
    for cmd in ["synth", "train-diff", "translate", "train-reid", "eval"] {
        ok(root.path(), &["--name", "toy", cmd]);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "{elapsed:?}");
    let dir = root.path().join("toy");
    for f in ["metrics/translate.csv", "metrics/eval.csv", "ckpt/reid/params.bin", "images/translate_grid.png"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(dir.join("logs/train_diff.csv")).unwrap();
    assert_eq!(log.lines().count(), 501);
}
