use rayon::prelude::*;

use crate::autograd::Gradients;
use crate::detector::data::SceneSample;
use crate::detector::loss::detection_loss;
use crate::detector::model::{DetectorModel, Targets};
use crate::detector::policy::PolicyMask;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::nn::Graph;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for LoRA factors.
    pub adapter_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            adapter_lr_scale: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.adapter_lr_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            epochs: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean per-sample loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub struct AdamW {
    config: OptimizerConfig,
    step: i32,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: usize) -> Self {
        Self {
            config,
            step: 0,
            moments: vec![None; params],
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, model: &mut DetectorModel, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (id, g) in grads.iter() {
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let lr = if model.store.info(id).role.is_adapter() {
                c.lr * c.adapter_lr_scale
            } else {
                c.lr
            };
            let p = model.store.value_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            }
        }
    }
}

/// Loss and gradients of one scene under a trainable mask.
pub fn sample_gradients(
    model: &DetectorModel,
    mask: &[bool],
    sample: &SceneSample,
    targets: &Targets,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(&model.store, mask);
    let vars = model.forward(&mut g, &sample.image)?;
    let loss = detection_loss(&mut g, &vars, targets)?;
    let value = g.value(loss.total).get(0, 0);
    let grads = if mask.iter().any(|&t| t) {
        g.backward(loss.total)?
    } else {
        Gradients::default()
    };
    Ok((value, grads))
}

/// Mean loss over a dataset without updating anything.
pub fn dataset_loss(model: &DetectorModel, data: &[SceneSample]) -> Result<f64> {
    let mask = vec![false; model.store.len()];
    let losses = data
        .par_iter()
        .map(|s| sample_gradients(model, &mask, s, &model.assign_targets(s)).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Minibatch AdamW over `data`; only tensors enabled in `mask` change.
///
/// Per-sample gradients run in parallel and are reduced in batch order, so
/// results do not depend on the worker count.
pub fn train(
    model: &mut DetectorModel,
    mask: &PolicyMask,
    data: &[SceneSample],
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.optimizer.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if mask.mask.len() != model.store.len() {
        return Err(Error::shape("train", "mask does not cover the model"));
    }
    if model.store.any_merged() {
        return Err(Error::State("cannot train a model with merged adapters".into()));
    }
    let targets: Vec<Targets> = data.par_iter().map(|s| model.assign_targets(s)).collect();
    let mut opt = AdamW::new(config.optimizer, model.store.len());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        Rng::derive(config.seed, "train", epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let model_ref: &DetectorModel = model;
            let results = batch
                .par_iter()
                .map(|&i| sample_gradients(model_ref, &mask.mask, &data[i], &targets[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Numeric(detail) => Error::Divergence { epoch, detail },
                    other => other,
                })?;
            let mut grads = Gradients::default();
            for (loss, g) in results {
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("loss became {loss}"),
                    });
                }
                total += loss;
                grads.accumulate(g);
            }
            if grads.is_empty() {
                continue;
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(model, &grads);
            log.steps += 1;
        }
        log.epoch_losses.push(total / data.len() as f64);
    }
    Ok(log)
}
