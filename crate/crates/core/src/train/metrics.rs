use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::split::{split_train_val_test, stratified_kfold};
use super::trainer::{evaluate, train, EpochRecord};
use super::TrainConfig;
use crate::dsp::EpochDataset;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    /// `1.96 · s / √n`.
    #[default]
    Normal,
    /// Student t quantile with `n − 1` degrees of freedom in place of 1.96.
    StudentT,
}

fn mean_and_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::param(
            "fold_accuracies",
            format!("need at least 2 values, got {}", values.len()),
        ));
    }
    let n = values.len() as f64;
    let rough = values.iter().sum::<f64>() / n;
    // One correction pass removes most of the summation rounding.
    let mean = rough + values.iter().map(|v| v - rough).sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// `(mean, 1.96 · s / √n)` with the `n − 1` sample standard deviation.
pub fn confidence_interval_95(values: &[f64]) -> Result<(f64, f64)> {
    confidence_interval(values, CiMethod::Normal)
}

pub fn confidence_interval(values: &[f64], method: CiMethod) -> Result<(f64, f64)> {
    let (mean, s) = mean_and_std(values)?;
    let n = values.len() as f64;
    let q = match method {
        CiMethod::Normal => 1.96,
        CiMethod::StudentT => StudentsT::new(0.0, 1.0, n - 1.0)
            .map_err(|e| Error::param("fold_accuracies", e.to_string()))?
            .inverse_cdf(0.975),
    };
    Ok((mean, q * s / n.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub confusion: Vec<Vec<usize>>,
    pub history: Vec<EpochRecord>,
}

/// Cross-validation summary, serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_fold_accuracy: Vec<f64>,
    pub mean: f64,
    pub ci95_half_width: f64,
    pub ci_method: CiMethod,
    pub epochs: usize,
    pub seed: u64,
    pub config_digest: String,
    pub folds: Vec<FoldReport>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }
}

/// SHA-256 over the model and training configuration text.
pub fn config_digest(model: &ModelConfig, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(model.to_kv_text().as_bytes());
    h.update(b"\n");
    h.update(cfg.to_kv_text().as_bytes());
    hex::encode(h.finalize())
}

/// Stratified k-fold evaluation.
///
/// Fold `f` is held out for testing; the rest is split 85/15 into train and
/// validation. Initialization, the inner split and training all use seed
/// `seed + f`.
pub fn run_kfold(config: &ModelConfig, ds: &EpochDataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let folds = stratified_kfold(&ds.labels, cfg.folds, cfg.seed)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (f, test_idx) in folds.iter().enumerate() {
        let fold_seed = cfg.seed.wrapping_add(f as u64);
        let rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let rest_labels: Vec<usize> = rest.iter().map(|&i| ds.labels[i]).collect();
        let [tr, va, _] = split_train_val_test(&rest_labels, [0.85, 0.15, 0.0], fold_seed)?;
        let pick = |local: &[usize]| -> Vec<usize> { local.iter().map(|&j| rest[j]).collect() };
        let (train_set, val_set, test_set) = (ds.subset(&pick(&tr)), ds.subset(&pick(&va)), ds.subset(test_idx));
        train_set.check_all_classes()?;

        let fold_cfg = TrainConfig {
            seed: fold_seed,
            ..cfg.clone()
        };
        let init = build_model(config, fold_seed)?;
        let outcome = train(config, init, &train_set, &val_set, &fold_cfg)?;
        let eval = evaluate(&outcome.params, config, &test_set)?;
        reports.push(FoldReport {
            fold: f,
            test_accuracy: eval.accuracy,
            best_epoch: outcome.best_epoch,
            train_size: train_set.len(),
            val_size: val_set.len(),
            test_size: test_set.len(),
            confusion: eval.confusion,
            history: outcome.history,
        });
    }
    let per_fold_accuracy: Vec<f64> = reports.iter().map(|r| r.test_accuracy).collect();
    let (mean, ci95_half_width) = confidence_interval(&per_fold_accuracy, cfg.ci)?;
    Ok(MetricsReport {
        per_fold_accuracy,
        mean,
        ci95_half_width,
        ci_method: cfg.ci,
        epochs: cfg.epochs,
        seed: cfg.seed,
        config_digest: config_digest(config, cfg),
        folds: reports,
    })
}
