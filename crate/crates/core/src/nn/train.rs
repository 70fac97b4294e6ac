use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{bind, Model};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, Purpose, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl TrainConfig {
    /// PSE training values reported for the full-size model.
    pub fn full_scale_pse() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 60,
            dropout: 0.1,
            seed: 0,
            validation_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.dropout)
            && self.validation_fraction > 0.0
            && self.validation_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            batch_size: 16,
            epochs: 20,
            dropout: 0.0,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation loss of the untrained model.
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Builds the scalar loss for one sample on a fresh tape.
/// Arguments: model, graph, bound parameters, sample, train flag, dropout stream.
pub trait LossFn<M, S>: Fn(&M, &mut Graph, &[Var], &S, bool, &mut StreamRng) -> Result<Var> + Sync {}
impl<M, S, F> LossFn<M, S> for F where F: Fn(&M, &mut Graph, &[Var], &S, bool, &mut StreamRng) -> Result<Var> + Sync {}

fn sample_grad<M: Model, S>(
    model: &M,
    sample: &S,
    rng: &mut StreamRng,
    loss_fn: &impl LossFn<M, S>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = bind(&mut g, model.params(), true)?;
    let loss = loss_fn(model, &mut g, &vars, sample, true, rng)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((g.value(loss).data()[0], grads))
}

/// Mean eval-mode loss over `samples`.
pub(crate) fn mean_loss<M: Model, S: Sync>(model: &M, samples: &[S], loss_fn: &impl LossFn<M, S>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("mean loss over an empty set"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = Graph::new();
            let vars = bind(&mut g, model.params(), false)?;
            // eval mode never draws from this stream
            let mut rng = rng::stream(0, Purpose::Dropout, 0);
            let loss = loss_fn(model, &mut g, &vars, s, false, &mut rng).map_err(|e| Error::at_sample(i, e))?;
            Ok(g.value(loss).data()[0])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minibatch Adam training with per-epoch validation; `model` ends up holding
/// the parameters of the epoch with the lowest validation loss (earliest on ties).
///
/// Per-sample gradients are computed in parallel and reduced in sample order,
/// so results do not depend on the number of worker threads.
pub fn fit<M: Model, S: Sync>(
    model: &mut M,
    train: &[S],
    val: &[S],
    cfg: &TrainConfig,
    loss_fn: impl LossFn<M, S>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(model.params());
    let initial_val_loss = mean_loss(model, val, &loss_fn)?;
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut report = TrainReport {
        initial_val_loss,
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = rng::substream(cfg.seed, Purpose::Dropout, epoch as u64, i as u64);
                    sample_grad(model, &train[i], &mut rng, &loss_fn).map_err(|e| Error::at_sample(i, e))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            for (loss, grads) in &per_sample {
                epoch_loss += loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            for acc in &mut total {
                for a in acc.iter_mut() {
                    *a *= scale;
                }
            }
            adam_step(model.params_mut(), &total, &mut state, &adam)?;
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        let vl = mean_loss(model, val, &loss_fn)?;
        report.val_loss.push(vl);
        log::info!(
            "epoch {}/{}: train {:.5} val {vl:.5}",
            epoch + 1,
            cfg.epochs,
            report.train_loss[epoch]
        );
        if vl < best.0 {
            best = (vl, epoch, model.params().clone());
        }
    }
    report.best_val_loss = best.0;
    report.best_epoch = best.1;
    *model.params_mut() = best.2;
    Ok(report)
}
