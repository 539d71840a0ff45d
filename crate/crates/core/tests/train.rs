use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use tsception::dsp::EpochDataset;
use tsception::model::{build_model, predict, ModelConfig};
use tsception::synth::{generate, BandProfile, NoiseConfig, SynthConfig};
use tsception::tensor::Tensor;
use tsception::train::*;
use tsception::Error;

fn labels(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect()
}

fn per_class(idx: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &i in idx {
        c[labels[i]] += 1;
    }
    c
}

#[test]
fn split_hundred_samples() {
    let y = labels(&[50, 50]);
    let [tr, va, te] = split_train_val_test(&y, [0.7, 0.15, 0.15], 3).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (70, 15, 15));
    assert_eq!(per_class(&tr, &y, 2), vec![35, 35]);
    for split in [&va, &te] {
        let c = per_class(split, &y, 2);
        assert!(c.iter().all(|&n| n == 7 || n == 8), "{c:?}");
    }
    let all: BTreeSet<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
    assert_eq!(all.len(), 100);
    assert_eq!(split_train_val_test(&y, [0.7, 0.15, 0.15], 3).unwrap(), [tr.clone(), va, te]);
    assert_ne!(split_train_val_test(&y, [0.7, 0.15, 0.15], 4).unwrap()[0], tr);
}

#[test]
fn split_preconditions() {
    assert!(matches!(split_train_val_test(&[0; 20], [0.7, 0.15, 0.15], 0), Err(Error::Stratification(_))));
    assert!(matches!(split_train_val_test(&labels(&[10, 2]), [0.7, 0.15, 0.15], 0), Err(Error::Stratification(_))));
    assert!(matches!(split_train_val_test(&labels(&[10, 10]), [0.7, 0.2, 0.2], 0), Err(Error::Config { .. })));
}

#[test]
fn kfold_examples() {
    let y = labels(&[5, 5]);
    for f in stratified_kfold(&y, 5, 0).unwrap() {
        assert_eq!(per_class(&f, &y, 2), vec![1, 1]);
    }
    let y = labels(&[6, 5]);
    let folds = stratified_kfold(&y, 5, 9).unwrap();
    let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
    sizes.sort();
    assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    for f in &folds {
        assert!((1..=2).contains(&per_class(f, &y, 2)[0]));
    }
    assert!(matches!(stratified_kfold(&y, 1, 0), Err(Error::Parameter { .. })));
    assert!(matches!(stratified_kfold(&labels(&[9, 3]), 4, 0), Err(Error::Stratification(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kfold_is_a_stratified_partition(counts in prop::collection::vec(5usize..40, 2..5), k in 2usize..6, seed in any::<u64>()) {
        let y = labels(&counts);
        let folds = stratified_kfold(&y, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0; y.len()];
        for f in &folds {
            for &i in f {
                seen[i] += 1;
            }
            for (c, &n) in per_class(f, &y, counts.len()).iter().enumerate() {
                prop_assert!((n as f64 - counts[c] as f64 / k as f64).abs() <= 1.0);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn splits_track_the_ratios(counts in prop::collection::vec(3usize..60, 2..4), seed in any::<u64>()) {
        let y = labels(&counts);
        let ratios = [0.7, 0.15, 0.15];
        let splits = split_train_val_test(&y, ratios, seed).unwrap();
        let mut seen = vec![0; y.len()];
        for (s, split) in splits.iter().enumerate() {
            for &i in split {
                seen[i] += 1;
            }
            for (c, &n) in per_class(split, &y, counts.len()).iter().enumerate() {
                prop_assert!((n as f64 - counts[c] as f64 * ratios[s]).abs() < 1.0 + 1e-9);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn ci_matches_brute_force(values in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let (m, h) = confidence_interval_95(&values).unwrap();
        let n = values.len() as f64;
        let mut sum = 0.0;
        for v in &values { sum += v; }
        let mean = sum / n;
        let mut ss = 0.0;
        for v in &values { ss += (v - mean) * (v - mean); }
        prop_assert!((m - mean).abs() < 1e-9);
        prop_assert!((h - 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt()).abs() < 1e-9);
    }
}

#[test]
fn confidence_interval_examples() {
    assert_eq!(confidence_interval_95(&[0.8, 0.8, 0.8]).unwrap(), (0.8, 0.0));
    let (m, h) = confidence_interval_95(&[0.80, 0.82, 0.84]).unwrap();
    assert!((m - 0.82).abs() < 1e-12 && (h - 1.96 * 0.02 / 3f64.sqrt()).abs() < 1e-12);
    assert!((h - 0.02263).abs() < 1e-5);
    let (m, h) = confidence_interval_95(&[0.80, 0.81, 0.82, 0.83, 0.84]).unwrap();
    assert!((m - 0.82).abs() < 1e-12 && (h - 0.01386).abs() < 1e-5);
    let (_, t) = confidence_interval(&[0.80, 0.81, 0.82, 0.83, 0.84], CiMethod::StudentT).unwrap();
    // t_{0.975, 4} = 2.7764
    assert!((t - 2.776445 * 0.0158114 / 5f64.sqrt()).abs() < 1e-6);
    assert!(matches!(confidence_interval_95(&[0.9]), Err(Error::Parameter { .. })));
}

fn one_param(name: &str, v: &[f64]) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap())])
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..Default::default()
    };
    let mut p = one_param("w", &[0.0]);
    let mut s = AdamState::default();
    adam_step(&mut p, &BTreeMap::from([("w".into(), vec![1.0])]), &mut s, 1, &cfg).unwrap();
    assert!((p["w"].data()[0] + 0.1).abs() < 1e-6);

    let mut p = one_param("w", &[0.5, -2.0]);
    let before = p.clone();
    let mut s = AdamState::default();
    for t in 1..=10 {
        adam_step(&mut p, &BTreeMap::from([("w".into(), vec![0.0, 0.0])]), &mut s, t, &cfg).unwrap();
    }
    assert_eq!(p, before);

    let mut p: BTreeMap<String, Tensor> = [("a", 1.5), ("b", 1.5)]
        .into_iter()
        .map(|(n, v)| (n.to_string(), Tensor::new(vec![1], vec![v]).unwrap()))
        .collect();
    let mut s = AdamState::default();
    for t in 1..=5 {
        let g = BTreeMap::from([("a".into(), vec![0.3 * t as f64]), ("b".into(), vec![0.3 * t as f64])]);
        adam_step(&mut p, &g, &mut s, t, &cfg).unwrap();
    }
    assert_eq!(p["a"], p["b"]);
}

#[test]
fn adam_matches_closed_form_recurrence() {
    let cfg = AdamConfig::default();
    let grads = [0.5, -1.0, 0.25, 2.0];
    let mut p = one_param("w", &[1.0]);
    let mut s = AdamState::default();
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (i, &g) in grads.iter().enumerate() {
        let t = i as i32 + 1;
        adam_step(&mut p, &BTreeMap::from([("w".into(), vec![g])]), &mut s, t as u64, &cfg).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 1e-4 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((p["w"].data()[0] - w).abs() < 1e-15);
    }
}

#[test]
fn adam_updates_are_independent_per_parameter() {
    let cfg = AdamConfig::default();
    let g = BTreeMap::from([("a".to_string(), vec![0.7, -0.1]), ("b".to_string(), vec![3.0])]);
    let mut joint: BTreeMap<String, Tensor> = one_param("a", &[1.0, 2.0]);
    joint.extend(one_param("b", &[-1.0]));
    let mut s = AdamState::default();
    adam_step(&mut joint, &g, &mut s, 1, &cfg).unwrap();
    for name in ["b", "a"] {
        let mut single: BTreeMap<String, Tensor> = BTreeMap::from([(name.to_string(), {
            if name == "a" {
                Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()
            } else {
                Tensor::new(vec![1], vec![-1.0]).unwrap()
            }
        })]);
        let gs = BTreeMap::from([(name.to_string(), g[name].clone())]);
        adam_step(&mut single, &gs, &mut AdamState::default(), 1, &cfg).unwrap();
        assert_eq!(single[name], joint[name]);
    }
}

#[test]
fn adam_rejects_non_finite_gradients_untouched() {
    let mut p = one_param("fc1.weight", &[1.0, 2.0]);
    let before = p.clone();
    let mut s = AdamState::default();
    let g = BTreeMap::from([("fc1.weight".into(), vec![0.1, f64::NAN])]);
    match adam_step(&mut p, &g, &mut s, 1, &AdamConfig::default()) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "fc1.weight"),
        other => panic!("{other:?}"),
    }
    assert_eq!(p, before);
    assert_eq!(s, AdamState::default());
}

fn small_model() -> ModelConfig {
    ModelConfig {
        num_channels: 8,
        sampling_rate: 128.0,
        ..ModelConfig::seedvig()
    }
}

fn small_synth(seed: u64, per_class: usize) -> EpochDataset {
    let cfg = SynthConfig {
        channels: 8,
        fs: 128.0,
        epoch_len: 128,
        epochs_per_class: per_class,
        classes: vec![
            BandProfile {
                center: 10.0,
                bandwidth: 2.0,
                amplitude: 3.0,
            },
            BandProfile {
                center: 20.0,
                bandwidth: 2.0,
                amplitude: 3.0,
            },
        ],
        noise: NoiseConfig::default(),
        mixing: 0.5,
        seed,
    };
    generate(&cfg).unwrap()
}

#[test]
fn evaluate_counts() {
    let cfg = small_model();
    let ds = small_synth(1, 10);
    let mut p = build_model(&cfg, 0).unwrap();
    // Equal logits everywhere: ties go to class 0.
    let w = p.params["fc_out.weight"].map(|_| 0.0);
    p.params.insert("fc_out.weight".into(), w);
    let e = evaluate(&p, &cfg, &ds).unwrap();
    assert_eq!(e.accuracy, 0.5);
    assert_eq!(e.confusion, vec![vec![10, 0], vec![10, 0]]);
    assert!(e.predictions.iter().all(|&p| p == 0));
}

#[test]
fn evaluate_against_own_predictions() {
    let cfg = ModelConfig {
        num_classes: 3,
        ..small_model()
    };
    let base = small_synth(2, 9);
    let p = build_model(&cfg, 4).unwrap();
    let x = batch_tensor(&base, &(0..9).collect::<Vec<_>>());
    let pred = predict(&x, &p, &cfg).unwrap();
    let argmax: Vec<usize> = pred
        .logits
        .data()
        .chunks(3)
        .map(|r| (0..3).fold(0, |b, i| if r[i] > r[b] { i } else { b }))
        .collect();
    let data = base.data[..9 * 8 * 128].to_vec();
    let exact = EpochDataset::new(8, 128, 128.0, 3, argmax.clone(), data.clone()).unwrap();
    let e = evaluate(&p, &cfg, &exact).unwrap();
    assert_eq!(e.accuracy, 1.0);
    for (i, row) in e.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), row[i]);
    }
    let mut wrong = argmax.clone();
    for l in wrong.iter_mut().take(3) {
        *l = (*l + 1) % 3;
    }
    let ds = EpochDataset::new(8, 128, 128.0, 3, wrong, data).unwrap();
    let e = evaluate(&p, &cfg, &ds).unwrap();
    assert!((e.accuracy - 6.0 / 9.0).abs() < 1e-9);
    assert_eq!(e.confusion.iter().flatten().sum::<usize>(), 9);
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let cfg = small_model();
    let ds = small_synth(3, 16);
    let init = build_model(&cfg, 0).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.0,
        ..quick(3, 0)
    };
    let out = train(&cfg, init.clone(), &ds.subset(&(0..24).collect::<Vec<_>>()), &ds.subset(&(24..32).collect::<Vec<_>>()), &tc).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|h| h.val_accuracy == out.history[0].val_accuracy));
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let cfg = small_model();
    let ds = small_synth(4, 24);
    let (tr, va) = (ds.subset(&(0..36).collect::<Vec<_>>()), ds.subset(&(36..48).collect::<Vec<_>>()));
    let run = || train(&cfg, build_model(&cfg, 1).unwrap(), &tr, &va, &quick(4, 1)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let best = a.history.iter().map(|h| h.val_accuracy).fold(f64::MIN, f64::max);
    let first = a.history.iter().position(|h| h.val_accuracy == best).unwrap();
    assert_eq!(a.best_epoch, first + 1);
    assert_eq!(a.best_val_accuracy, best);
    assert_eq!(evaluate(&a.params, &cfg, &va).unwrap().accuracy, best);
    assert_ne!(a.params, build_model(&cfg, 1).unwrap());
}

#[test]
fn divergence_reports_the_epoch() {
    let cfg = small_model();
    let ds = small_synth(5, 16);
    let tc = TrainConfig {
        learning_rate: 1e300,
        ..quick(5, 0)
    };
    let err = train(&cfg, build_model(&cfg, 0).unwrap(), &ds, &ds, &tc).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch, .. } if epoch >= 1), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn train_preconditions() {
    let cfg = small_model();
    let ds = small_synth(5, 4);
    let p = build_model(&cfg, 0).unwrap();
    let empty = ds.subset(&[]);
    assert!(matches!(train(&cfg, p.clone(), &empty, &ds, &quick(1, 0)), Err(Error::EmptyInput(_))));
    let wide = ModelConfig {
        num_channels: 9,
        ..small_model()
    };
    assert!(matches!(
        train(&wide, build_model(&wide, 0).unwrap(), &ds, &ds, &quick(1, 0)),
        Err(Error::Config { .. })
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick(1, 0)
    };
    assert!(matches!(train(&cfg, p, &ds, &ds, &bad), Err(Error::Config { .. })));
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let cfg = ModelConfig::seedvig();
    let mut monotone = 0;
    for seed in 0..5 {
        let ds = generate(&SynthConfig {
            epochs_per_class: 400,
            ..SynthConfig::demo2class(seed)
        })
        .unwrap();
        let [tr, va, _] = split_train_val_test(&ds.labels, [0.7, 0.15, 0.15], seed).unwrap();
        let out = train(&cfg, build_model(&cfg, seed).unwrap(), &ds.subset(&tr), &ds.subset(&va), &quick(5, seed)).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "{monotone} of 5 seeds decreased monotonically");
}

#[test]
fn kfold_report() {
    let cfg = small_model();
    let ds = small_synth(6, 15);
    let tc = TrainConfig {
        folds: 3,
        ..quick(2, 5)
    };
    let report = run_kfold(&cfg, &ds, &tc).unwrap();
    assert_eq!(report.per_fold_accuracy.len(), 3);
    let mean = report.per_fold_accuracy.iter().sum::<f64>() / 3.0;
    assert!((report.mean - mean).abs() < 1e-12);
    assert_eq!(confidence_interval_95(&report.per_fold_accuracy).unwrap(), (report.mean, report.ci95_half_width));
    assert!(report.ci95_half_width >= 0.0);
    assert_eq!(report.folds.iter().map(|f| f.test_size).sum::<usize>(), ds.len());
    for f in &report.folds {
        assert_eq!(f.history.len(), 2);
        assert_eq!(f.train_size + f.val_size + f.test_size, ds.len());
    }
    let folds = stratified_kfold(&ds.labels, 3, 5).unwrap();
    for (i, a) in folds.iter().enumerate() {
        for b in &folds[i + 1..] {
            assert!(a.iter().all(|x| !b.contains(x)));
        }
    }

    let text = report.to_toml().unwrap();
    for key in ["per_fold_accuracy", "mean", "ci95_half_width", "epochs", "seed", "config_digest"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key} missing");
    }
    assert_eq!(run_kfold(&cfg, &ds, &tc).unwrap().to_toml().unwrap(), text);
    assert_eq!(report.config_digest, config_digest(&cfg, &tc));
    assert_ne!(report.config_digest, config_digest(&cfg, &quick(3, 5)));
}
