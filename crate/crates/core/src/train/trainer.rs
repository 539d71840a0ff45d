use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::optim::{adam_step, AdamState};
use super::TrainConfig;
use crate::dsp::EpochDataset;
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, ModelGraph, ModelParams};
use crate::rng;
use crate::tensor::{update_running, Graph, Mode, Tensor};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses.
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Stack the listed epochs into a `[B, 1, C, L]` input tensor.
pub fn batch_tensor(ds: &EpochDataset, indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * ds.channels * ds.epoch_len);
    for &i in indices {
        data.extend_from_slice(ds.epoch(i));
    }
    Tensor::new(vec![indices.len(), 1, ds.channels, ds.epoch_len], data).expect("batch shape matches its data")
}

fn check_dataset(config: &ModelConfig, ds: &EpochDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyInput(format!("{what} set is empty")));
    }
    if ds.channels != config.num_channels {
        return Err(Error::config(
            "num_channels",
            format!("{what} set has {} channels, model expects {}", ds.channels, config.num_channels),
        ));
    }
    if ds.sampling_rate != config.sampling_rate {
        return Err(Error::config(
            "sampling_rate",
            format!("{what} set is at {} Hz, model expects {}", ds.sampling_rate, config.sampling_rate),
        ));
    }
    if let Some(&l) = ds.labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::Label(format!("{what} label {l} outside [0, {})", config.num_classes)));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy and confusion matrix. Ties go to the lowest class.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, ds: &EpochDataset) -> Result<Evaluation> {
    check_dataset(config, ds, "evaluation")?;
    let k = config.num_classes;
    let mut confusion = vec![vec![0; k]; k];
    let mut predictions = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let pred = predict(&batch_tensor(ds, chunk), params, config)?;
        for (row, &i) in pred.logits.data().chunks_exact(k).zip(chunk) {
            let p = argmax(row);
            confusion[ds.labels[i]][p] += 1;
            predictions.push(p);
        }
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        confusion,
        predictions,
    })
}

/// Mini-batch Adam training with best-validation selection.
///
/// A learning rate of zero is a null update: neither the weights nor the
/// batch-norm running statistics move, so the returned parameters equal the
/// input bit for bit.
pub fn train(
    config: &ModelConfig,
    params: ModelParams,
    train_set: &EpochDataset,
    val_set: &EpochDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    config.validate()?;
    params.check_compatible(config)?;
    check_dataset(config, train_set, "training")?;
    check_dataset(config, val_set, "validation")?;

    let frozen = cfg.learning_rate == 0.0;
    let adam = cfg.adam();
    let mut shuffle_rng = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);
    let mut dropout_rng = rng::stream(cfg.seed, rng::STREAM_DROPOUT);
    let mut state = AdamState::default();
    let mut current = params;
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut t = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(train_set, batch));
            let mg = ModelGraph::new(&mut g, &current, config, Mode::Train, true)?;
            let vars: BTreeMap<String, _> = mg.param_vars().clone();
            let out = mg.forward(x, &mut dropout_rng)?;
            let loss = g.softmax_cross_entropy_ls(out.logits, &targets, cfg.eps_ls)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss is {loss_value}"),
                });
            }
            let k = config.num_classes;
            for (row, &y) in g.value(out.logits).data().chunks_exact(k).zip(&targets) {
                correct += usize::from(argmax(row) == y);
            }
            loss_sum += loss_value * batch.len() as f64;
            if frozen {
                continue;
            }
            g.backward(loss)?;
            let grads: BTreeMap<String, Vec<f64>> = vars
                .iter()
                .map(|(name, &v)| {
                    let grad = g
                        .grad_data(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; current.params[name].numel()]);
                    (name.clone(), grad)
                })
                .collect();
            t += 1;
            adam_step(&mut current.params, &grads, &mut state, t, &adam).map_err(|e| match e {
                Error::NonFiniteGradient(name) => Error::Divergence {
                    epoch,
                    detail: format!("non-finite gradient in `{name}`"),
                },
                other => other,
            })?;
            for (layer, stats) in &out.bn_stats {
                let mean = current.buffers.get_mut(&format!("{layer}.running_mean")).expect("layout has buffer");
                update_running(mean.data_mut(), &stats.mean, config.bn_momentum);
                let var = current.buffers.get_mut(&format!("{layer}.running_var")).expect("layout has buffer");
                update_running(var.data_mut(), &stats.var, config.bn_momentum);
            }
        }
        let val = evaluate(&current, config, val_set)?.accuracy;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy: val,
        });
        if best.as_ref().map_or(true, |(_, acc, _)| val > *acc) {
            best = Some((epoch, val, current.clone()));
        }
    }

    let (best_epoch, best_val_accuracy, params) = match best {
        Some(b) => b,
        None => (0, evaluate(&current, config, val_set)?.accuracy, current),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_accuracy,
        history,
    })
}
