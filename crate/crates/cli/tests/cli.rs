use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tsception::dsp::{preprocess_pipeline, ContinuousRecording, PreprocessConfig, Profile};
use tsception::formats::{
    load_checkpoint, load_eegc, load_eege, read_label_track, save_eegc, write_eege, write_label_track, Fixture, Role,
};
use tsception::model::{build_model, ModelConfig};
use tsception::tensor::Tensor;
use tsception::train::evaluate;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsception"))
        .args(args)
        .current_dir(dir)
        .env_remove("TSCEPTION_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Small two-class set at the 17-channel, 200 Hz geometry.
fn synth(dir: &Path, per_class: &str) {
    let o = run(dir, &["synth", "--out", "d", "--seed", "7", "--epochs-per-class", per_class]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_writes_files_and_manifest_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "10");
    let d = tmp.path().join("d");
    let names = ["synth.eege", "synth.eegc", "synth.labels.csv", "synth.manifest.toml"];
    let first: Vec<String> = names.iter().map(|n| digest(&d.join(n))).collect();
    assert_eq!(load_eege(&d.join("synth.eege")).unwrap().class_counts(), vec![10, 10]);

    synth(tmp.path(), "10");
    let second: Vec<String> = names.iter().map(|n| digest(&d.join(n))).collect();
    assert_eq!(first, second);

    let manifest: toml::Table = std::fs::read_to_string(d.join("synth.manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["command"].as_str(), Some("synth"));
    assert_eq!(manifest["seed"].as_integer(), Some(7));
    let mut h = Sha256::new();
    for (k, v) in manifest["config"].as_table().unwrap() {
        h.update(format!("{k}={}\n", v.as_str().unwrap()).as_bytes());
    }
    assert_eq!(manifest["config_digest"].as_str().unwrap(), hex::encode(h.finalize()));
}

#[test]
fn output_directory_defaults_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tsception"))
        .args(["synth", "--epochs-per-class", "3"])
        .current_dir(tmp.path())
        .env("TSCEPTION_OUT", "from_env")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("from_env/synth.eege").exists());
}

#[test]
fn invalid_band_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["synth", "--out", "d", "--centers", "10,120"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("classes[1].center"), "{}", stderr(&o));
    assert!(!tmp.path().join("d/synth.eege").exists());
}

#[test]
fn preprocess_matches_the_library_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    // 30 s of 17-channel data at 400 Hz, which the profile halves to 200 Hz.
    let n = 400 * 30;
    let samples: Vec<f64> = (0..17 * n)
        .map(|i| ((i % n) as f64 * (0.05 + 0.01 * (i / n) as f64)).sin() * 20.0)
        .collect();
    let rec = ContinuousRecording::new(17, 400.0, samples).unwrap();
    save_eegc(&rec, &tmp.path().join("rec.eegc")).unwrap();
    let track: Vec<(f64, f64)> = (0..=30).map(|t| (t as f64, if t % 4 < 2 { 0.2 } else { 0.8 })).collect();
    std::fs::write(tmp.path().join("perclos.csv"), write_label_track(&track)).unwrap();

    let o = run(
        tmp.path(),
        &["preprocess", "--profile", "seedvig", "--in", "rec.eegc", "--labels", "perclos.csv", "--out", "out/d.eege"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got = load_eege(&tmp.path().join("out/d.eege")).unwrap();
    assert_eq!((got.sampling_rate, got.epoch_len, got.len()), (200.0, 200, 30));
    assert!(tmp.path().join("out/preprocess.manifest.toml").exists());

    let stored = load_eegc(&tmp.path().join("rec.eegc")).unwrap().with_label_track(track).unwrap();
    let cfg = PreprocessConfig::for_profile(Profile::Seedvig, 400.0).unwrap();
    let expected = preprocess_pipeline(&stored, &cfg).unwrap();
    assert_eq!(write_eege(&got).unwrap(), write_eege(&expected).unwrap());
}

#[test]
fn preprocess_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "5");
    let o = run(tmp.path(), &["preprocess", "--profile", "stew", "--in", "d/synth.eegc", "--out", "x.eege"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("channels"));

    std::fs::remove_file(tmp.path().join("d/synth.labels.csv")).unwrap();
    let o = run(tmp.path(), &["preprocess", "--profile", "seedvig", "--in", "d/synth.eegc", "--out", "x.eege"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = run(tmp.path(), &["preprocess", "--in", "missing.eegc"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_with_zero_rate_keeps_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "15");
    let o = run(
        tmp.path(),
        &["train", "--in", "d/synth.eege", "--lr", "0", "--epochs", "3", "--seed", "4", "--out", "t"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = load_checkpoint(&tmp.path().join("t/model.tsck")).unwrap();
    let init = build_model(&ModelConfig::seedvig(), 4).unwrap().quantized_f32();
    assert_eq!(ckpt.params, init);

    let report: toml::Table = std::fs::read_to_string(tmp.path().join("t/train.toml")).unwrap().parse().unwrap();
    let val: Vec<f64> = report["history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["val_accuracy"].as_float().unwrap())
        .collect();
    assert_eq!(val.len(), 3);
    assert!(val.iter().all(|&v| v == val[0]));
    assert_eq!(report["best_epoch"].as_integer(), Some(1));
    assert!(tmp.path().join("t/train.manifest.toml").exists());
}

#[test]
fn eval_reports_accuracy_and_confusion() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "15");
    let o = run(tmp.path(), &["train", "--in", "d/synth.eege", "--epochs", "2", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(tmp.path(), &["eval", "--ckpt", "t/model.tsck", "--in", "d/synth.eege"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let ckpt = load_checkpoint(&tmp.path().join("t/model.tsck")).unwrap();
    let ds = load_eege(&tmp.path().join("d/synth.eege")).unwrap();
    let e = evaluate(&ckpt.params, &ckpt.config, &ds).unwrap();
    let out = stdout(&o);
    let correct = (e.accuracy * ds.len() as f64).round() as usize;
    assert!(out.starts_with(&format!("accuracy {:.4} ({correct}/30)", e.accuracy)), "{out}");
    for row in &e.confusion {
        let line: String = row.iter().map(|c| format!("{c:>6}")).collect();
        assert!(out.contains(&line), "{out}");
    }

    let o = run(tmp.path(), &["eval", "--ckpt", "d/synth.eege", "--in", "d/synth.eege"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn kfold_reports_every_fold() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "15");
    let args = ["kfold", "--in", "d/synth.eege", "--folds", "5", "--seed", "1", "--epochs", "1", "--out", "k"];
    let o = run(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("k/kfold.toml")).unwrap();
    let report: toml::Table = text.parse().unwrap();
    let acc = report["per_fold_accuracy"].as_array().unwrap();
    assert_eq!(acc.len(), 5);
    let mean = acc.iter().map(|v| v.as_float().unwrap()).sum::<f64>() / 5.0;
    assert!((report["mean"].as_float().unwrap() - mean).abs() < 1e-12);
    assert!(stdout(&o).contains("95% CI, 5 folds"));

    let o = run(tmp.path(), &args);
    assert_eq!(std::fs::read_to_string(tmp.path().join("k/kfold.toml")).unwrap(), text);
    assert_eq!(code(&o), 0);
}

#[test]
fn training_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "15");
    let o = run(tmp.path(), &["train", "--in", "d/synth.eege", "--epochs", "1", "--lr", "1e300", "--out", "t"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = run(tmp.path(), &["train", "--in", "d/synth.eege", "--batch", "0"]);
    assert_eq!(code(&o), 2);
    let o = run(tmp.path(), &["kfold", "--in", "d/synth.eege", "--folds", "1"]);
    assert_eq!(code(&o), 2);
    let o = run(tmp.path(), &["train", "--in", "d/synth.eegc"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let o = run(tmp.path(), &["gradcheck", "--seed", &seed.to_string()]);
        assert_eq!(code(&o), 0, "seed {seed}: {}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
    let o = run(tmp.path(), &["gradcheck", "--tol", "1e-12"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_replays_golden_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("golden");
    std::fs::create_dir(&dir).unwrap();
    let x = Tensor::new(vec![1, 1, 1, 4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
    let mut fx = Fixture::new("leaky_relu", "hand", 0);
    fx.push("x", Role::Input, x)
        .push("attr.alpha", Role::Input, Tensor::new(vec![1], vec![0.01]).unwrap())
        .push("out", Role::Expected, Tensor::new(vec![1, 1, 1, 4], vec![-0.02, -0.005, 0.5, 3.0]).unwrap())
        .push("grad.x", Role::Gradient, Tensor::new(vec![1, 1, 1, 4], vec![0.01, 0.01, 1.0, 1.0]).unwrap());
    fx.save(&dir.join("a.gfix")).unwrap();
    let o = run(tmp.path(), &["gradcheck", "--golden", "golden"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("golden/hand"));

    fx.tensors[2].tensor.data_mut()[3] = 3.1;
    fx.save(&dir.join("a.gfix")).unwrap();
    let o = run(tmp.path(), &["gradcheck", "--golden", "golden"]);
    assert_eq!(code(&o), 1);

    std::fs::remove_file(dir.join("a.gfix")).unwrap();
    let o = run(tmp.path(), &["gradcheck", "--golden", "golden"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn label_sidecar_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "4");
    let text = std::fs::read_to_string(tmp.path().join("d/synth.labels.csv")).unwrap();
    let track = read_label_track(&text).unwrap();
    assert_eq!(track.len(), 9);
    assert_eq!(track[0], (0.0, 0.25));
    assert_eq!(track[1], (1.0, 0.75));
}
