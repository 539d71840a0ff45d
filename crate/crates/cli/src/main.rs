//! `tsception`: synthesize, preprocess, train, evaluate and check gradients.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration, 3 data or
//! format, 4 training divergence.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use manifest::RunManifest;
use tsception::dsp::{preprocess_pipeline, EpochDataset, LabelMode, PreprocessConfig, Profile};
use tsception::formats::{
    load_checkpoint, load_eegc, load_eege, read_label_track, save_checkpoint, save_eegc, save_eege, write_label_track,
};
use tsception::model::{build_model, ModelConfig, Variant};
use tsception::synth::{generate, generate_continuous, SynthConfig};
use tsception::train::{evaluate, run_kfold, split_train_val_test, train, CiMethod, TrainConfig};
use tsception::verify::{check_dir, end_to_end, op_suite, END_TO_END_STEP};
use tsception::{Error, Result};

/// Fallback for `--out` when neither the flag nor `TSCEPTION_OUT` is set.
const DEFAULT_OUT: &str = "out";

#[derive(Parser)]
#[command(name = "tsception", version, about = "Modified TSception EEG classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic band-power dataset.
    Synth(SynthArgs),
    /// Filter, resample, segment and label a continuous recording.
    Preprocess(PreprocessArgs),
    /// Train on a train/validation/test split and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an epoch file.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Kfold(TrainArgs),
    /// Finite-difference gradient checks, optionally replaying golden fixtures.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthProfile {
    Demo2class,
    Chance2class,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "demo2class")]
    profile: SynthProfile,
    #[arg(long, env = "TSCEPTION_OUT")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs_per_class: Option<usize>,
    /// Class band centers in Hz, one per class.
    #[arg(long, value_delimiter = ',')]
    centers: Option<Vec<f64>>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    mixing: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelKind {
    Perclos,
    Rating,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long, default_value = "custom")]
    profile: Profile,
    #[arg(long = "in")]
    input: PathBuf,
    /// `time_s,value` label track; defaults to `<in>.labels.csv`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output EEGE file; defaults to `<out dir>/<in stem>.eege`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    decimate: Option<usize>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    scale: Option<bool>,
    #[arg(long, value_enum)]
    label_mode: Option<LabelKind>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    reject_mad: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CiKind {
    Normal,
    StudentT,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "modified")]
    variant: Variant,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
    split: Vec<f64>,
    #[arg(long, value_enum, default_value = "normal")]
    ci: CiKind,
    #[arg(long, env = "TSCEPTION_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tolerance of the sampled whole-model check.
    #[arg(long, default_value_t = 1e-3)]
    model_tol: f64,
    /// Directory of `.gfix` fixtures to replay.
    #[arg(long)]
    golden: Option<PathBuf>,
}

enum Outcome {
    Ok,
    ChecksFailed,
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<Outcome> {
    let mut cfg = match a.profile {
        SynthProfile::Demo2class => SynthConfig::demo2class(a.seed),
        SynthProfile::Chance2class => SynthConfig::chance2class(a.seed),
    };
    if let Some(n) = a.epochs_per_class {
        cfg.epochs_per_class = n;
    }
    if let Some(centers) = &a.centers {
        let template = cfg.classes[0].clone();
        cfg.classes = centers.iter().map(|&center| tsception::synth::BandProfile { center, ..template.clone() }).collect();
    }
    for c in cfg.classes.iter_mut() {
        c.bandwidth = a.bandwidth.unwrap_or(c.bandwidth);
        c.amplitude = a.amplitude.unwrap_or(c.amplitude);
    }
    cfg.mixing = a.mixing.unwrap_or(cfg.mixing);
    cfg.validate()?;

    let dir = out_dir(a.out)?;
    let (eege, eegc, labels) = (dir.join("synth.eege"), dir.join("synth.eegc"), dir.join("synth.labels.csv"));
    let ds = generate(&cfg)?;
    save_eege(&ds, &eege)?;
    let rec = generate_continuous(&cfg)?;
    save_eegc(&rec, &eegc)?;
    std::fs::write(&labels, write_label_track(rec.label_track.as_deref().unwrap_or_default()))?;

    let mut m = RunManifest::new("synth", a.seed);
    m.output(&eege).output(&eegc).output(&labels);
    m.set("synth.channels", cfg.channels)
        .set("synth.fs", cfg.fs)
        .set("synth.epoch_len", cfg.epoch_len)
        .set("synth.epochs_per_class", cfg.epochs_per_class)
        .set("synth.noise_exponent", cfg.noise.exponent)
        .set("synth.noise_level", cfg.noise.level)
        .set("synth.mixing", cfg.mixing)
        .set("synth.seed", cfg.seed);
    for (i, c) in cfg.classes.iter().enumerate() {
        m.set(format!("synth.class{i}"), format!("{}Hz±{}/{}", c.center, c.bandwidth / 2.0, c.amplitude));
    }
    m.write(&dir)?;
    println!("wrote {} epochs ({} classes) to {}", ds.len(), cfg.classes.len(), dir.display());
    Ok(Outcome::Ok)
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<Outcome> {
    let rec = load_eegc(&a.input)?;
    let label_path = a.labels.clone().unwrap_or_else(|| a.input.with_extension("labels.csv"));
    let text = std::fs::read_to_string(&label_path)
        .map_err(|e| Error::Data(format!("label track {}: {e}", label_path.display())))?;
    let rec = rec.with_label_track(read_label_track(&text)?)?;

    let mut cfg = PreprocessConfig::for_profile(a.profile, rec.sampling_rate)?;
    match (a.low, a.high) {
        (Some(l), Some(h)) => cfg.band = Some((l, h)),
        (None, None) => {}
        _ => return Err(Error::Config { field: "band".into(), detail: "--low and --high go together".into() }),
    }
    cfg.order = a.order.unwrap_or(cfg.order);
    if let Some(d) = a.decimate {
        cfg.decimate = (d > 1).then_some(d);
    }
    cfg.window = a.window.unwrap_or(cfg.window);
    cfg.step = a.step.unwrap_or(cfg.step);
    cfg.scale = a.scale.unwrap_or(cfg.scale);
    cfg.reject_mad = a.reject_mad.or(cfg.reject_mad);
    match (a.label_mode, a.thresholds) {
        (Some(LabelKind::Perclos), _) => cfg.labels = LabelMode::Perclos,
        (Some(LabelKind::Rating), t) => {
            cfg.labels = LabelMode::Rating {
                thresholds: t.unwrap_or_else(|| vec![3.0, 6.0]),
            }
        }
        (None, Some(t)) => cfg.labels = LabelMode::Rating { thresholds: t },
        (None, None) => {}
    }

    let out = match a.out {
        Some(p) => {
            std::fs::create_dir_all(parent_dir(&p))?;
            p
        }
        None => {
            let stem = a.input.file_stem().map_or_else(|| "epochs".into(), |s| s.to_string_lossy().into_owned());
            out_dir(None)?.join(format!("{stem}.eege"))
        }
    };
    let ds = preprocess_pipeline(&rec, &cfg)?;
    save_eege(&ds, &out)?;

    let mut m = RunManifest::new("preprocess", 0);
    m.input(&a.input).input(&label_path).output(&out).set("preprocess.profile", a.profile);
    for (k, v) in cfg.describe() {
        m.set(format!("preprocess.{k}"), v);
    }
    m.write(&parent_dir(&out))?;
    println!(
        "{} epochs of {} channels × {} samples at {} Hz, class counts {:?}",
        ds.len(),
        ds.channels,
        ds.epoch_len,
        ds.sampling_rate,
        ds.class_counts()
    );
    Ok(Outcome::Ok)
}

/// Model geometry taken from the data, everything else from the defaults.
fn model_for(ds: &EpochDataset, variant: Variant) -> ModelConfig {
    ModelConfig {
        num_channels: ds.channels,
        sampling_rate: ds.sampling_rate,
        num_classes: ds.num_classes,
        ..ModelConfig::seedvig()
    }
    .with_variant(variant)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let split: [f64; 3] = a
        .split
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config { field: "split".into(), detail: "expects three fractions".into() })?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        folds: a.folds,
        split_ratios: split,
        ci: match a.ci {
            CiKind::Normal => CiMethod::Normal,
            CiKind::StudentT => CiMethod::StudentT,
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_manifest(command: &str, a: &TrainArgs, model: &ModelConfig, cfg: &TrainConfig) -> RunManifest {
    let mut m = RunManifest::new(command, cfg.seed);
    m.input(&a.input);
    m.set_kv_text("model", &model.to_kv_text()).set_kv_text("train", &cfg.to_kv_text());
    m
}

fn print_confusion(confusion: &[Vec<usize>]) {
    println!("confusion (rows true, columns predicted):");
    for row in confusion {
        println!("  {}", row.iter().map(|c| format!("{c:>6}")).collect::<String>());
    }
}

#[derive(serde::Serialize)]
struct TrainReport {
    best_epoch: usize,
    best_val_accuracy: f64,
    test_accuracy: Option<f64>,
    train_size: usize,
    val_size: usize,
    test_size: usize,
    history: Vec<tsception::train::EpochRecord>,
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    let cfg = train_config(&a)?;
    let ds = load_eege(&a.input)?;
    let model = model_for(&ds, a.variant);
    model.validate()?;
    let [tr, va, te] = split_train_val_test(&ds.labels, cfg.split_ratios, cfg.seed)?;
    let (train_set, val_set) = (ds.subset(&tr), ds.subset(&va));
    train_set.check_all_classes()?;

    let init = build_model(&model, cfg.seed)?;
    let outcome = train(&model, init, &train_set, &val_set, &cfg)?;
    for r in &outcome.history {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy
        );
    }
    let test_accuracy = if te.is_empty() {
        None
    } else {
        let e = evaluate(&outcome.params, &model, &ds.subset(&te))?;
        println!("test accuracy {:.4} ({} epochs)", e.accuracy, te.len());
        print_confusion(&e.confusion);
        Some(e.accuracy)
    };

    let dir = out_dir(a.out.clone())?;
    let (ckpt, report_path) = (dir.join("model.tsck"), dir.join("train.toml"));
    save_checkpoint(&outcome.params, &model, &ckpt)?;
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        test_accuracy,
        train_size: tr.len(),
        val_size: va.len(),
        test_size: te.len(),
        history: outcome.history,
    };
    std::fs::write(&report_path, toml::to_string(&report).map_err(|e| Error::Format(e.to_string()))?)?;
    let mut m = run_manifest("train", &a, &model, &cfg);
    m.output(&ckpt).output(&report_path);
    m.write(&dir)?;
    println!("best epoch {} (val {:.4}); checkpoint {}", report.best_epoch, report.best_val_accuracy, ckpt.display());
    Ok(Outcome::Ok)
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let ds = load_eege(&a.input)?;
    let e = evaluate(&ckpt.params, &ckpt.config, &ds)?;
    let correct = e.predictions.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    println!("accuracy {:.4} ({correct}/{})", e.accuracy, ds.len());
    print_confusion(&e.confusion);
    Ok(Outcome::Ok)
}

fn cmd_kfold(a: TrainArgs) -> Result<Outcome> {
    let cfg = train_config(&a)?;
    let ds = load_eege(&a.input)?;
    let model = model_for(&ds, a.variant);
    model.validate()?;
    let report = run_kfold(&model, &ds, &cfg)?;
    for f in &report.folds {
        println!("fold {}  accuracy {:.4}  best epoch {}", f.fold, f.test_accuracy, f.best_epoch);
    }
    println!(
        "mean {:.4} ± {:.4} (95% CI, {} folds)",
        report.mean,
        report.ci95_half_width,
        report.per_fold_accuracy.len()
    );
    let dir = out_dir(a.out.clone())?;
    let path = dir.join("kfold.toml");
    std::fs::write(&path, report.to_toml()?)?;
    let mut m = run_manifest("kfold", &a, &model, &cfg);
    m.output(&path);
    m.write(&dir)?;
    Ok(Outcome::Ok)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let mut all_ok = true;
    println!("{:<32} {:>6} {:>12}  result", "check", "seed", "max rel err");
    for c in op_suite(a.seed, a.tol)? {
        all_ok &= c.report.passed();
        println!(
            "{:<32} {:>6} {:>12.3e}  {}",
            c.op,
            c.seed,
            c.report.max_rel_error,
            verdict(c.report.passed())
        );
    }
    for variant in [Variant::Modified, Variant::Original] {
        let config = ModelConfig::seedvig().with_variant(variant);
        let c = end_to_end(&config, a.seed, 2, 3, END_TO_END_STEP, a.model_tol)?;
        all_ok &= c.passed();
        println!(
            "{:<32} {:>6} {:>12.3e}  {}",
            format!("model/{variant} ({} samples)", c.samples.len()),
            c.seed,
            c.max_rel_error,
            verdict(c.passed())
        );
    }
    if let Some(dir) = &a.golden {
        for r in check_dir(dir)? {
            all_ok &= r.passed();
            let worst = r.comparisons.iter().map(|c| c.max_rel).fold(0.0, f64::max);
            println!("{:<32} {:>6} {:>12.3e}  {}", format!("golden/{}", r.name), "-", worst, verdict(r.passed()));
        }
    }
    Ok(if all_ok { Outcome::Ok } else { Outcome::ChecksFailed })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Kfold(a) => cmd_kfold(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
