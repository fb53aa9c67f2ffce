//! Mini-batch training with SGD or Adam.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, purpose, rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 5,
            batch: 32,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// Accuracy on the dataset's test split; `None` when it is empty.
    pub test_accuracy: Option<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fraction of `examples` whose argmax logit equals the label.
pub fn accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = examples
        .par_iter()
        .map(|e| model.predict(&e.input).map(|l| usize::from(l.argmax() == e.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// Trains a freshly built model on `dataset.train`. Deterministic given
/// `config.seed` and `hyper.seed`.
pub fn train(config: &ModelConfig, dataset: &Dataset, hyper: &Hyper) -> Result<TrainedModel> {
    let model = build_model(config)?;
    train_from(model, dataset, hyper)
}

/// Continues training an existing model.
pub fn train_from(mut model: Model, dataset: &Dataset, hyper: &Hyper) -> Result<TrainedModel> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(Error::InvalidArgument("batch and lr must be positive".into()));
    }
    if dataset.num_classes != model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes,
            model.num_classes()
        )));
    }
    if let Some(bad) = dataset.train.iter().find(|e| e.label >= model.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {} out of range", bad.label)));
    }
    let sizes: Vec<usize> = model.params().map(|p| p.tensor.len()).collect();
    let mut adam = Adam {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng(derive_seed(hyper.seed, &[purpose::SHUFFLE, epoch as u64])));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(hyper.batch) {
            let per_example = batch
                .par_iter()
                .map(|&i| {
                    let ex = &dataset.train[i];
                    model
                        .loss_and_grads(&ex.input, ex.label)
                        .map(|(l, g, logits)| (l, g, logits.argmax() == ex.label))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                    other => other,
                })?;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for (l, g, hit) in &per_example {
                loss_sum += l;
                hits += usize::from(*hit);
                for (acc, t) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(t.data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            apply_step(&mut model, &mut grads, scale, hyper, &mut adam);
        }
        let loss = loss_sum / dataset.train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        history.push(EpochStats {
            epoch,
            loss,
            train_accuracy: hits as f64 / dataset.train.len() as f64,
        });
    }
    let test_accuracy = if dataset.test.is_empty() {
        None
    } else {
        Some(accuracy(&model, &dataset.test)?)
    };
    Ok(TrainedModel {
        model,
        history,
        test_accuracy,
    })
}

fn apply_step(model: &mut Model, grads: &mut [Vec<f64>], scale: f64, hyper: &Hyper, adam: &mut Adam) {
    adam.t += 1;
    let (c1, c2) = (1.0 - BETA1.powi(adam.t), 1.0 - BETA2.powi(adam.t));
    for (k, p) in model.params_mut().enumerate() {
        let g = &mut grads[k];
        let data: &mut [f64] = Tensor::data_mut(&mut p.tensor);
        match hyper.optimizer {
            Optimizer::Sgd => {
                for (w, gv) in data.iter_mut().zip(g.iter()) {
                    *w -= hyper.lr * gv * scale;
                }
            }
            Optimizer::Adam => {
                let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
                for i in 0..data.len() {
                    let gv = g[i] * scale;
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gv;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gv * gv;
                    data[i] -= hyper.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}
