use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{self, Layout};
use super::{planarize, RegressorModel};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::params::{PARAM_DIM, PARAM_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Squared error.
    Mse,
    /// Huber with the given transition width.
    Huber(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Fraction of a dataset held out for validation when splitting.
    pub val_fraction: f64,
    /// Anneal the learning rate along a half cosine down to 5% of its start.
    pub cosine_decay: bool,
    /// Mirror each training crop horizontally with probability one half.
    pub flip_augment: bool,
    /// Training objective.
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 32,
            epochs: 100,
            seed: 7,
            optimizer: Optimizer::Adam,
            val_fraction: 0.1,
            cosine_decay: true,
            flip_augment: true,
            loss: Loss::Huber(0.01),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be positive".into());
        }
        if let Loss::Huber(delta) = self.loss {
            if !(delta > 0.0 && delta.is_finite()) {
                return bad(format!("huber delta {delta} must be finite and > 0"));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("validation fraction {} must lie in (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_mae_per_component: [f64; PARAM_DIM],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// Comma-separated rows `epoch, train_loss, val_mae, mae_<component>...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mae");
        for name in PARAM_NAMES {
            let _ = write!(s, ",mae_{name}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{:.8},{:.8}", e.epoch, e.train_loss, e.val_mae);
            for v in e.val_mae_per_component {
                let _ = write!(s, ",{v:.8}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-component mean absolute error of `model` on `data`.
pub(crate) fn mean_abs_error(model: &RegressorModel, data: &Dataset) -> Result<[f64; PARAM_DIM]> {
    let rows: Vec<[f64; PARAM_DIM]> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let pred = model.forward(&data.crops[i])?;
            let label = data.manifest.records[i].label;
            Ok(std::array::from_fn(|c| (pred.values()[c] - label.values()[c]).abs()))
        })
        .collect::<Result<_>>()?;
    let mut sum = [0.0; PARAM_DIM];
    for r in &rows {
        for c in 0..PARAM_DIM {
            sum[c] += r[c];
        }
    }
    Ok(sum.map(|s| s / rows.len().max(1) as f64))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Minibatch training on the squared-error objective. Returns the weights
/// of the epoch with the lowest mean validation MAE.
pub fn train(
    model: &RegressorModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<(RegressorModel, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let size = model.arch().input_size;
    for ds in [train_set, val_set] {
        if ds.manifest.crop_size != size {
            return Err(Error::DimensionMismatch {
                expected_width: size,
                expected_height: size,
                width: ds.manifest.crop_size,
                height: ds.manifest.crop_size,
            });
        }
    }
    let layout: &Layout = model.layout();
    let mut current = model.clone();
    let n_params = current.n_params();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let labels: Vec<[f32; PARAM_DIM]> = train_set
        .labels()
        .map(|l| l.values().map(|v| v as f32))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut step = 0usize;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<f32>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let weights = current.weights();
            let flips: Vec<bool> = batch
                .iter()
                .map(|_| config.flip_augment && rng.random::<bool>())
                .collect();
            let per_sample: Vec<(f32, Vec<f32>)> = batch
                .par_iter()
                .zip(&flips)
                .map(|(&i, &flip)| {
                    let mut x = planarize::<f32>(&train_set.crops[i], size)?;
                    if flip {
                        for row in x.chunks_exact_mut(size) {
                            row.reverse();
                        }
                    }
                    let trace = network::forward(layout, weights, &x);
                    let (l, d_out) = match config.loss {
                        Loss::Mse => network::sample_loss_grad(&trace.out, &labels[i], batch.len()),
                        Loss::Huber(delta) => {
                            network::sample_huber_grad(&trace.out, &labels[i], batch.len(), delta as f32)
                        }
                    };
                    let mut g = vec![0.0f32; n_params];
                    network::backward(layout, weights, &trace, &d_out, &mut g);
                    Ok((l, g))
                })
                .collect::<Result<_>>()?;
            // fixed summation order
            let mut grad = vec![0.0f32; n_params];
            let mut batch_loss = 0.0f64;
            for (l, g) in &per_sample {
                batch_loss += *l as f64;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss {batch_loss} after {step} steps"),
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;

            let lr = if config.cosine_decay {
                let progress = step as f64 / total_steps;
                config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            } else {
                config.learning_rate
            };
            step += 1;
            let w = current.weights_mut();
            match config.optimizer {
                Optimizer::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(&grad) {
                        *wi = (*wi as f64 - lr * *gi as f64) as f32;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = 1.0 - BETA1.powi(adam.t);
                    let c2 = 1.0 - BETA2.powi(adam.t);
                    for (j, (wi, gi)) in w.iter_mut().zip(&grad).enumerate() {
                        let g = *gi as f64;
                        adam.m[j] = BETA1 * adam.m[j] + (1.0 - BETA1) * g;
                        adam.v[j] = BETA2 * adam.v[j] + (1.0 - BETA2) * g * g;
                        let update = (adam.m[j] / c1) / ((adam.v[j] / c2).sqrt() + EPS);
                        *wi = (*wi as f64 - lr * update) as f32;
                    }
                }
            }
        }
        let mae = mean_abs_error(&current, val_set)?;
        let val_mae = mae.iter().sum::<f64>() / PARAM_DIM as f64;
        let train_loss = epoch_loss / train_set.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val mae {val_mae:.4}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_mae,
            val_mae_per_component: mae,
        });
        if best.as_ref().is_none_or(|(b, _)| val_mae < *b) {
            best = Some((val_mae, current.weights().to_vec()));
            log.best_epoch = epoch;
        }
    }
    let (_, weights) = best.expect("at least one epoch");
    let mut out = RegressorModel::from_parts(model.arch().clone(), weights, model.tag().to_string())?;
    out.set_tag(format!("{}-e{}", model.tag(), log.best_epoch));
    Ok((out, log))
}
