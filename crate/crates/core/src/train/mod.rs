//! Splitting, optimization, training, evaluation and reporting.

mod metrics;
mod optim;
mod split;
mod trainer;

pub use metrics::{
    confidence_interval, confidence_interval_95, config_digest, run_kfold, CiMethod, FoldReport, MetricsReport,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use split::{split_train_val_test, stratified_kfold};
pub use trainer::{batch_tensor, evaluate, train, EpochRecord, Evaluation, TrainOutcome};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Label-smoothing mass.
    pub eps_ls: f64,
    pub seed: u64,
    pub folds: usize,
    /// (train, validation, test).
    pub split_ratios: [f64; 3],
    pub ci: CiMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            eps_ls: 0.1,
            seed: 0,
            folds: 5,
            split_ratios: [0.70, 0.15, 0.15],
            ci: CiMethod::Normal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds", format!("must be at least 2, got {}", self.folds)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("{} is not a finite non-negative rate", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.eps_ls) {
            return Err(Error::config("eps_ls", format!("{} outside [0, 1)", self.eps_ls)));
        }
        let r = self.split_ratios;
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_ratios", format!("{r:?} must lie in [0,1] and sum to 1")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Stable `key=value` lines, used for the report digest.
    pub fn to_kv_text(&self) -> String {
        let r = self.split_ratios;
        format!(
            "epochs={}\nbatch_size={}\nlearning_rate={}\nbeta1={}\nbeta2={}\nadam_epsilon={}\neps_ls={}\nseed={}\nfolds={}\nsplit_ratios={},{},{}\nci={:?}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_epsilon,
            self.eps_ls,
            self.seed,
            self.folds,
            r[0],
            r[1],
            r[2],
            self.ci
        )
    }
}
