//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. The learning criteria train on 2000 synthetic epochs and take
//! several minutes on one core.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsception::dsp::*;
use tsception::formats::{read_checkpoint, write_checkpoint};
use tsception::model::{build_model, predict, ModelConfig, Variant};
use tsception::synth::{generate, BandProfile, NoiseConfig, SynthConfig};
use tsception::tensor::Tensor;
use tsception::train::*;
use tsception::verify::{end_to_end, op_suite, END_TO_END_STEP};
use tsception::Error;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, v: Verdict) -> Verdict {
    let v = v?;
    check(
        elapsed <= limit,
        format!("{v}; {:.1} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn timed(limit_s: u64, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = f();
    within(start.elapsed(), Duration::from_secs(limit_s), v)
}

fn gradient_suite() -> Verdict {
    timed(120, || {
        let mut worst = 0.0f64;
        let mut failures = Vec::new();
        for seed in 0..5 {
            for c in op_suite(seed, 1e-4).map_err(|e| e.to_string())? {
                worst = worst.max(c.report.max_rel_error);
                if !c.report.passed() {
                    failures.push(format!("{}@{seed}", c.op));
                }
            }
        }
        let mut e2e = 0.0f64;
        for config in [ModelConfig::seedvig(), ModelConfig::stew(3)] {
            let c = end_to_end(&config, 0, 2, 3, END_TO_END_STEP, 1e-3).map_err(|e| e.to_string())?;
            e2e = e2e.max(c.max_rel_error);
            if !c.passed() {
                failures.push(format!("model C={}", config.num_channels));
            }
        }
        check(
            failures.is_empty(),
            format!("ops max rel {worst:.2e} over 5 seeds, model max rel {e2e:.2e}, failures {failures:?}"),
        )
    })
}

fn architecture_geometry() -> Verdict {
    timed(1, || {
        let run = |config: &ModelConfig, batch: usize| -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>), Error> {
            let params = build_model(config, 0)?;
            let x = Tensor::full(&[batch, 1, config.num_channels, config.sampling_rate as usize], 0.1);
            let out = predict(&x, &params, config)?.logits.shape().to_vec();
            let widths = (1..=5).map(|i| params.get(&format!("tception.{i}.weight")).map(|t| t.shape()[3])).collect::<Result<_, _>>()?;
            let full = params.get("sception.full.weight")?.shape()[2..].to_vec();
            let hemi = params.get("sception.hemi.weight")?.shape()[2..].to_vec();
            Ok((out, widths, full, hemi))
        };
        let a = run(&ModelConfig::seedvig(), 4).map_err(|e| e.to_string())?;
        let b = run(&ModelConfig::stew(3), 4).map_err(|e| e.to_string())?;
        let ok = a == (vec![4, 2], vec![100, 50, 25, 25, 12], vec![17, 1], vec![8, 1])
            && (b.0.clone(), b.2.clone(), b.3.clone()) == (vec![4, 3], vec![14, 1], vec![7, 1]);
        check(ok, format!("seedvig {a:?}, stew {b:?}"))
    })
}

fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

/// Least-squares amplitude of the `freq` component.
fn amplitude(x: &[f64], freq: f64, fs: f64) -> f64 {
    let (mut ss, mut cc, mut sc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let (s, c) = (2.0 * PI * freq * i as f64 / fs).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        xs += v * s;
        xc += v * c;
    }
    let det = ss * cc - sc * sc;
    ((xs * cc - xc * sc) / det).hypot((xc * ss - xs * sc) / det)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn filter_suite() -> Verdict {
    timed(30, || {
        let fs = 1000.0;
        let bp = butter_bandpass_design(1.0, 75.0, fs, 4).map_err(|e| e.to_string())?;
        let single: Vec<f64> = [1.0, 75.0].iter().map(|&f| bp.gain_db(f, fs)).collect();
        let mut double = Vec::new();
        for f in [1.0, 75.0] {
            let n = 20_000;
            let y = bp.filtfilt(&sine(f, fs, n)).map_err(|e| e.to_string())?;
            double.push(20.0 * amplitude(&y[5000..15000], f, fs).log10());
        }
        let n = 4000;
        let x = sine(10.0, fs, n);
        let y = bp.filtfilt(&x).map_err(|e| e.to_string())?;
        let xcorr = |lag: isize| -> f64 { (500..n - 500).map(|i| x[i] * y[(i as isize + lag) as usize]).sum() };
        let lag = (-40..=40).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        let amp = amplitude(&y[500..n - 500], 10.0, fs);
        let tone = sine(150.0, fs, 5000);
        let dec = decimate(&tone, fs, 5).map_err(|e| e.to_string())?;
        let atten = 20.0 * (rms(&dec[50..950]) / rms(&tone)).log10();
        let ok = single.iter().all(|g| (g + 3.0).abs() <= 0.5)
            && double.iter().all(|g| (g + 6.0).abs() <= 1.0)
            && lag == 0
            && (amp - 1.0).abs() <= 0.02
            && atten <= -40.0;
        check(
            ok,
            format!(
                "single-pass {single:.2?} dB, filtfilt {double:.2?} dB, lag {lag}, amplitude {amp:.4}, 150 Hz alias {atten:.1} dB"
            ),
        )
    })
}

fn pipeline_counts() -> Verdict {
    let count = |seconds: f64, fs: f64, step: f64| -> Result<usize, Error> {
        let n = (seconds * fs) as usize;
        let rec = ContinuousRecording::new(2, fs, vec![0.5; 2 * n])?;
        Ok(segment_epochs(&rec, 1.0, step)?.len())
    };
    let a = count(60.0, 200.0, 1.0).map_err(|e| e.to_string())?;
    let b = count(150.0, 128.0, 0.5).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = [0.3, 0.7, 0.5].iter().map(|&v| perclos_label(v)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    check(
        a == 60 && b == 299 && labels == [0, 1, 1],
        format!("{a} and {b} epochs, PERCLOS labels {labels:?}"),
    )
}

/// Train on a 70/15/15 split and return the test accuracy and test size.
fn split_and_train(ds: &EpochDataset, variant: Variant, seed: u64) -> Result<(f64, usize), Error> {
    let config = ModelConfig::seedvig().with_variant(variant);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 1e-4,
        seed,
        ..TrainConfig::default()
    };
    let [tr, va, te] = split_train_val_test(&ds.labels, cfg.split_ratios, seed)?;
    let init = build_model(&config, seed)?;
    let outcome = train(&config, init, &ds.subset(&tr), &ds.subset(&va), &cfg)?;
    Ok((evaluate(&outcome.params, &config, &ds.subset(&te))?.accuracy, te.len()))
}

const DATA_SEED: u64 = 1;
const TRAIN_SEED: u64 = 1;

fn synthetic_learning() -> Verdict {
    timed(600, || {
        let ds = generate(&SynthConfig::demo2class(DATA_SEED)).map_err(|e| e.to_string())?;
        let (acc, _) = split_and_train(&ds, Variant::Modified, TRAIN_SEED).map_err(|e| e.to_string())?;
        let chance = generate(&SynthConfig::chance2class(DATA_SEED)).map_err(|e| e.to_string())?;
        let (control, n) = split_and_train(&chance, Variant::Modified, TRAIN_SEED).map_err(|e| e.to_string())?;
        let half = 1.96 * (0.25 / n as f64).sqrt();
        check(
            acc >= 0.90 && (control - 0.5).abs() <= half,
            format!("separable {acc:.4} (need 0.90), control {control:.4} (band 0.5 ± {half:.4}, n = {n})"),
        )
    })
}

/// Epoch budget per fold of the cross-validation report.
const KFOLD_EPOCHS: usize = 5;

fn baseline_sanity() -> Verdict {
    let ds = generate(&SynthConfig::demo2class(DATA_SEED)).map_err(|e| e.to_string())?;
    let (acc, _) = split_and_train(&ds, Variant::Original, TRAIN_SEED).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: KFOLD_EPOCHS,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let report = run_kfold(&ModelConfig::seedvig(), &ds, &cfg).map_err(|e| e.to_string())?;
    let (mean, half) = confidence_interval_95(&report.per_fold_accuracy).map_err(|e| e.to_string())?;
    check(
        acc >= 0.85 && report.per_fold_accuracy.len() == 5 && half.is_finite() && half == report.ci95_half_width,
        format!(
            "original {acc:.4} (need 0.85); modified 5-fold {:.4?}, {mean:.4} ± {half:.4} ({KFOLD_EPOCHS} epochs per fold)",
            report.per_fold_accuracy
        ),
    )
}

fn statistics() -> Verdict {
    timed(5, || {
        let (mean, half) = confidence_interval_95(&[0.80, 0.82, 0.84]).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst = 0.0f64;
        for trial in 0..100u64 {
            let k = rng.gen_range(2..=4);
            let n = rng.gen_range(5 * k..=300);
            let mut labels: Vec<usize> = (0..n).map(|i| if i < 5 * k { i % k } else { rng.gen_range(0..k) }).collect();
            labels.rotate_left(rng.gen_range(0..n));
            let folds = stratified_kfold(&labels, 5, trial).map_err(|e| e.to_string())?;
            for c in 0..k {
                let total = labels.iter().filter(|&&l| l == c).count() as f64;
                for fold in &folds {
                    let got = fold.iter().filter(|&&i| labels[i] == c).count() as f64;
                    worst = worst.max((got - total / 5.0).abs());
                }
            }
        }
        // Sample s.d. of the three values is exactly 0.02.
        let oracle = 1.96 * 0.02 / 3f64.sqrt();
        check(
            (mean - 0.82).abs() <= 1e-6
                && (half - oracle).abs() <= 1e-6
                && (half - 0.02263).abs() <= 5e-6
                && worst <= 1.0,
            format!("CI ({mean:.6}, {half:.6}), worst per-class fold deviation {worst:.2}"),
        )
    })
}

fn small_set() -> Result<EpochDataset, Error> {
    let band = |center| BandProfile {
        center,
        bandwidth: 2.0,
        amplitude: 3.0,
    };
    generate(&SynthConfig {
        channels: 8,
        fs: 128.0,
        epoch_len: 128,
        epochs_per_class: 20,
        classes: vec![band(10.0), band(20.0)],
        noise: NoiseConfig::default(),
        mixing: 0.5,
        seed: 4,
    })
}

fn determinism() -> Verdict {
    timed(60, || {
        let run = || -> Result<(String, Vec<u8>), Error> {
            let ds = small_set()?;
            let config = ModelConfig {
                num_channels: 8,
                sampling_rate: 128.0,
                ..ModelConfig::seedvig()
            };
            let cfg = TrainConfig {
                epochs: 2,
                folds: 3,
                seed: 9,
                ..TrainConfig::default()
            };
            let report = run_kfold(&config, &ds, &cfg)?.to_toml()?;
            let [tr, va, _] = split_train_val_test(&ds.labels, cfg.split_ratios, cfg.seed)?;
            let out = train(&config, build_model(&config, 9)?, &ds.subset(&tr), &ds.subset(&va), &cfg)?;
            Ok((report, write_checkpoint(&out.params, &config)?))
        };
        let (a, b) = (run().map_err(|e| e.to_string())?, run().map_err(|e| e.to_string())?);

        let config = ModelConfig::seedvig();
        let params = build_model(&config, 3).map_err(|e| e.to_string())?.quantized_f32();
        let bytes = write_checkpoint(&params, &config).map_err(|e| e.to_string())?;
        let loaded = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
        let x = Tensor::from_fn(&[2, 1, 17, 200], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0);
        let before = predict(&x, &params, &config).map_err(|e| e.to_string())?.logits;
        let after = predict(&x, &loaded.params, &loaded.config).map_err(|e| e.to_string())?.logits;
        let bit_identical = before.data().iter().zip(after.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        let mut corrupt = bytes.clone();
        corrupt[0] ^= 0xff;
        let rejected = matches!(read_checkpoint(&corrupt), Err(Error::Format(_)));
        check(
            a == b && bit_identical && rejected,
            format!(
                "report identical {}, checkpoint identical {}, round-trip forward bit-identical {bit_identical}, bad magic rejected {rejected}",
                a.0 == b.0,
                a.1 == b.1
            ),
        )
    })
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient suite", gradient_suite),
        ("architecture geometry", architecture_geometry),
        ("filter suite", filter_suite),
        ("pipeline counts", pipeline_counts),
        ("statistics", statistics),
        ("determinism and persistence", determinism),
        ("synthetic learning", synthetic_learning),
        ("baseline sanity", baseline_sanity),
    ];
    // `cargo test -- <filter>` runs only the criteria whose name contains it.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let verdict = f();
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += verdict.is_err() as usize;
        println!("{tag} {name}: {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
