//! Losses, the Adam optimizer, the training loop with early stopping and
//! evaluation.

mod adam;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{bce_masked_loss, mse_loss, LossError};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Sample, SplitAssignment};
use crate::featurize::FeaturizedGraph;
use crate::metrics::{mae, roc_auc, rmse, MetricError, MetricReport};
use crate::model::{Model, ModelError, Task};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BceMasked,
    Mse,
    NodeMseMasked,
}

impl LossKind {
    pub fn for_task(task: Task) -> LossKind {
        match task {
            Task::GraphClassification => LossKind::BceMasked,
            Task::GraphRegression => LossKind::Mse,
            Task::NodeRegression => LossKind::NodeMseMasked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Linear ramp length; 0 disables warmup.
    pub warmup_epochs: usize,
    /// Epochs without strict improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    /// Derived from the task when absent.
    pub loss: Option<LossKind>,
    /// Train regression heads on targets standardized with train-split
    /// statistics.
    pub standardize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            warmup_epochs: 2,
            patience: 10,
            seed: 0,
            loss: None,
            standardize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Learning rate for 1-based `epoch`: `lr * min(1, epoch / warmup)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Per-target affine map between original and standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScaler {
    /// Statistics over present targets of the given samples.
    pub fn fit(data: &Dataset, indices: &[usize]) -> TargetScaler {
        let k = data.meta.num_targets;
        let mut sum = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let mut count = vec![0usize; k];
        for &i in indices {
            let s = &data.samples[i];
            for (j, (&t, &m)) in s.targets.iter().zip(&s.mask).enumerate() {
                if m != 0.0 {
                    sum[j % k] += t;
                    sq[j % k] += t * t;
                    count[j % k] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..k).map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { 0.0 }).collect();
        let std = (0..k)
            .map(|j| {
                if count[j] == 0 {
                    return 1.0;
                }
                let var = sq[j] / count[j] as f64 - mean[j] * mean[j];
                let s = var.max(0.0).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        TargetScaler { mean, std }
    }

    pub fn scale(&self, values: &[f64]) -> Vec<f64> {
        let k = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j % k]) / self.std[j % k])
            .collect()
    }

    pub fn unscale(&self, values: &[f64]) -> Vec<f64> {
        let k = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(j, v)| v * self.std[j % k] + self.mean[j % k])
            .collect()
    }
}

/// Predictions in original target units.
pub fn predict_values(model: &Model, scaler: Option<&TargetScaler>, g: &FeaturizedGraph) -> Result<Vec<f64>, ModelError> {
    let raw = model.predict(g)?.into_data();
    Ok(match scaler {
        Some(s) => s.unscale(&raw),
        None => raw,
    })
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub lr: f64,
    pub alphas: Vec<f64>,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub struct FitResult {
    /// Parameters from the epoch with the best validation metric.
    pub model: Model,
    pub scaler: Option<TargetScaler>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

/// Worker count from `COMPT_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("COMPT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn worker_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .expect("thread pool")
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::GraphClassification => "roc_auc",
        Task::GraphRegression => "rmse",
        Task::NodeRegression => "mae",
    }
}

pub fn higher_is_better(task: Task) -> bool {
    task == Task::GraphClassification
}

/// Loss and per-parameter gradients for one molecule.
fn molecule_gradient(
    model: &Model,
    sample: &Sample,
    targets: &[f64],
    loss: LossKind,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true, None);
    let out = bound.forward(&mut tape, &sample.graph, rng, None)?;
    let l = match loss {
        LossKind::BceMasked => bce_masked_loss(&mut tape, out.prediction, targets, &sample.mask)?,
        LossKind::Mse | LossKind::NodeMseMasked => mse_loss(&mut tape, out.prediction, targets, &sample.mask)?,
    };
    let value = tape.value(l).item();
    let params: Vec<_> = bound.vars().to_vec();
    let mut grads = tape.backward(l)?;
    let store = model.params();
    let out = params
        .iter()
        .zip(store.ids())
        .map(|(&v, id)| grads.take(v).unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec())))
        .collect();
    Ok((value, out))
}

/// Trains with the task's standard validation metric for early stopping.
pub fn fit(model: Model, data: &Dataset, split: &SplitAssignment, config: &TrainConfig) -> Result<FitResult, TrainError> {
    let task = model.config().task;
    let valid = split.valid.clone();
    fit_with_validator(model, data, split, config, higher_is_better(task), |m, scaler| {
        Ok(evaluate(m, scaler, data, &valid)?.mean)
    })
}

/// Training loop with a caller-supplied validation score, evaluated once
/// per epoch on the current parameters.
pub fn fit_with_validator<V>(
    model: Model,
    data: &Dataset,
    split: &SplitAssignment,
    config: &TrainConfig,
    higher_better: bool,
    validator: V,
) -> Result<FitResult, TrainError>
where
    V: FnMut(&Model, Option<&TargetScaler>) -> Result<f64, TrainError> + Send,
{
    fit_in_pool(&worker_pool(), model, data, split, config, higher_better, validator)
}

/// [`fit_with_validator`] on an explicit thread pool. Results do not depend
/// on the pool size.
pub fn fit_in_pool<V>(
    pool: &rayon::ThreadPool,
    mut model: Model,
    data: &Dataset,
    split: &SplitAssignment,
    config: &TrainConfig,
    higher_better: bool,
    mut validator: V,
) -> Result<FitResult, TrainError>
where
    V: FnMut(&Model, Option<&TargetScaler>) -> Result<f64, TrainError> + Send,
{
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyPartition("train"));
    }
    if split.valid.is_empty() {
        return Err(TrainError::EmptyPartition("valid"));
    }
    let task = model.config().task;
    let loss = config.loss.unwrap_or(LossKind::for_task(task));
    let scaler = (config.standardize_targets && task != Task::GraphClassification)
        .then(|| TargetScaler::fit(data, &split.train));
    let targets: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| match &scaler {
            Some(sc) => sc.scale(&s.targets),
            None => s.targets.clone(),
        })
        .collect();

    let adam = config.adam();
    let mut state = AdamState::new(model.params());
    let mut order = split.train.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let use_dropout = model.config().dropout > 0.0;

    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0)));
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let model_ref = &model;
            let results: Vec<Result<(f64, Vec<Tensor>), TrainError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = use_dropout
                            .then(|| ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, i as u64 + 1)));
                        molecule_gradient(model_ref, &data.samples[i], &targets[i], loss, rng.as_mut())
                    })
                    .collect()
            });
            let mut total: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, grads) = r?;
                loss_sum += l;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam, lr)?;
        }

        let valid_metric = pool.install(|| validator(&model, scaler.as_ref()))?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            valid_metric,
            lr,
            alphas: model.alphas(),
        });
        log::debug!("epoch {epoch}: loss {:.5} valid {valid_metric:.5}", loss_sum / order.len() as f64);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => {
                if higher_better {
                    valid_metric > *b
                } else {
                    valid_metric < *b
                }
            }
        };
        if improved {
            best = Some((valid_metric, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    let (best_valid, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(FitResult {
        model: best_model,
        scaler,
        history,
        best_epoch,
        best_valid,
    })
}

/// Task metric on `indices`: ROC-AUC per target for classification
/// (single-class targets skipped), RMSE per target for graph regression,
/// MAE over labelled atoms for node regression.
pub fn evaluate(
    model: &Model,
    scaler: Option<&TargetScaler>,
    data: &Dataset,
    indices: &[usize],
) -> Result<MetricReport, TrainError> {
    let task = model.config().task;
    let preds: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&i| predict_values(model, scaler, &data.samples[i].graph))
        .collect::<Result<_, _>>()?;
    let k = data.meta.num_targets;
    let mut per_target = Vec::with_capacity(k);
    let mut count = 0;
    match task {
        Task::NodeRegression => {
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for (pred, &i) in preds.iter().zip(indices) {
                let s = &data.samples[i];
                for j in 0..s.mask.len() {
                    if s.mask[j] != 0.0 {
                        p.push(pred[j]);
                        t.push(s.targets[j]);
                    }
                }
            }
            count = p.len();
            per_target.push(Some(mae(&p, &t)?));
        }
        _ => {
            for j in 0..k {
                let (mut p, mut t) = (Vec::new(), Vec::new());
                for (pred, &i) in preds.iter().zip(indices) {
                    let s = &data.samples[i];
                    if s.mask[j] != 0.0 {
                        p.push(pred[j]);
                        t.push(s.targets[j]);
                    }
                }
                let value = if task == Task::GraphClassification {
                    let labels: Vec<bool> = t.iter().map(|&v| v > 0.5).collect();
                    match roc_auc(&p, &labels) {
                        Ok(v) => Some(v),
                        Err(MetricError::SingleClass) => {
                            log::warn!("target {j}: single class in partition, skipped");
                            None
                        }
                        Err(e) => return Err(e.into()),
                    }
                } else if p.is_empty() {
                    None
                } else {
                    Some(rmse(&p, &t)?)
                };
                if value.is_some() {
                    count += p.len();
                }
                per_target.push(value);
            }
        }
    }
    let present: Vec<f64> = per_target.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricError::AllMasked.into());
    }
    Ok(MetricReport {
        metric: metric_name(task).to_string(),
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_target,
        count,
    })
}

#[cfg(test)]
mod tests;
