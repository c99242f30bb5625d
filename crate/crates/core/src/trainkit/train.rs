//! Seeded SGD training loop.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Grads, LayerGrads, LayerWeights, Model};
use super::{softmax_cross_entropy, Metrics, ModelConfig, TrainConfig};
use crate::a2q::ForwardMode;
use crate::dataio::Dataset;
use crate::error::{Error, Result};

/// Progress callbacks from the training loop.
pub enum TrainEvent<'a> {
    /// After every optimizer step.
    Step { model: &'a Model, step: u64 },
    /// After each epoch's metric pass.
    Epoch {
        model: &'a Model,
        epoch: u32,
        metrics: &'a Metrics,
    },
}

/// One fake-quantized pass over `batch`: total loss (task + lambda * reg)
/// and gradients for every parameter.
pub fn loss_and_backward(
    model: &mut Model,
    batch: &Array2<f64>,
    labels: &[u32],
    lambda: f64,
    mode: ForwardMode,
    calibrate: bool,
) -> Result<(f64, Grads)> {
    if batch.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} batch rows vs {} labels",
            batch.nrows(),
            labels.len()
        )));
    }
    let cache = model.forward(batch, mode, calibrate)?;
    let (task, dlogits) = softmax_cross_entropy(&cache.logits, labels);
    let total = task + lambda * model.reg_loss();
    let grads = model.backward(&cache, &dlogits, lambda)?;
    Ok((total, grads))
}

fn sgd_step(model: &mut Model, grads: &Grads, lr: f64, weight_decay: f64) {
    for (l, layer) in model.layers.iter_mut().enumerate() {
        match (&mut layer.weights, &grads.layers[l]) {
            (LayerWeights::Baseline(b), LayerGrads::Baseline { w, d }) => {
                ndarray::Zip::from(&mut b.w).and(w).for_each(|p, &g| {
                    *p -= lr * (g + weight_decay * *p);
                });
                ndarray::Zip::from(&mut b.d)
                    .and(d)
                    .for_each(|p, &g| *p -= lr * g);
            }
            (LayerWeights::A2q(a), LayerGrads::A2q(g)) => {
                ndarray::Zip::from(&mut a.v).and(&g.v).for_each(|p, &gv| {
                    *p -= lr * (gv + weight_decay * *p);
                });
                ndarray::Zip::from(&mut a.t)
                    .and(&g.t)
                    .for_each(|p, &gt| *p -= lr * gt);
                ndarray::Zip::from(&mut a.d)
                    .and(&g.d)
                    .for_each(|p, &gd| *p -= lr * gd);
            }
            _ => unreachable!("gradient kind matches layer kind"),
        }
        ndarray::Zip::from(&mut layer.bias)
            .and(&grads.biases[l])
            .for_each(|p, &g| *p -= lr * g);
    }
}

/// Metrics of a fake-quantized pass over a whole dataset (no calibration).
pub fn fake_metrics(model: &mut Model, dataset: &Dataset) -> Result<Metrics> {
    let x = dataset.inputs.mapv(|v| v as f64);
    let cache = model.forward(&x, ForwardMode::Quantized, false)?;
    let (task_loss, _) = softmax_cross_entropy(&cache.logits, &dataset.labels);
    let correct = cache
        .logits
        .rows()
        .into_iter()
        .zip(&dataset.labels)
        .filter(|(row, &label)| argmax(row) == label as usize)
        .count();
    Ok(Metrics {
        top1_accuracy: correct as f64 / dataset.len() as f64,
        sparsity: model.sparsity(),
        task_loss,
        reg_loss: model.reg_loss(),
    })
}

pub(crate) fn argmax(row: &ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full deterministic training run: shuffling, batching, SGD with weight
/// decay on direction parameters, optional step decay. Returns the trained
/// model and per-epoch metrics measured on the training set.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(Model, Vec<Metrics>)> {
    train_with_hook(model_config, train_config, dataset, |_| {})
}

/// [`train`] with a progress callback after every step and epoch; the step
/// hook is how the "certificate holds after every update" property is
/// instrumented.
pub fn train_with_hook(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    hook: impl FnMut(&TrainEvent<'_>),
) -> Result<(Model, Vec<Metrics>)> {
    model_config.validate()?;
    if model_config.input_signed != dataset.range.signed() {
        return Err(Error::ShapeMismatch(format!(
            "config input_signed={} vs dataset signed={}",
            model_config.input_signed,
            dataset.range.signed()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidParam("dataset is empty".into()));
    }
    let model = Model::new(
        model_config.clone(),
        dataset.range.bit_width(),
        dataset.range.signed(),
        dataset.feature_count(),
        dataset.num_classes,
        train_config.seed,
    )?;
    train_from_with_hook(model, train_config, dataset, hook)
}

/// Continue training an existing model (e.g. one converted with
/// [`Model::to_a2q`] from a pretrained baseline) instead of reinitializing.
pub fn train_from(
    model: Model,
    train_config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(Model, Vec<Metrics>)> {
    train_from_with_hook(model, train_config, dataset, |_| {})
}

pub fn train_from_with_hook(
    mut model: Model,
    train_config: &TrainConfig,
    dataset: &Dataset,
    mut hook: impl FnMut(&TrainEvent<'_>),
) -> Result<(Model, Vec<Metrics>)> {
    train_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParam("dataset is empty".into()));
    }
    model.check_dataset(dataset)?;

    let x_all = dataset.inputs.mapv(|v| v as f64);
    // distinct stream from parameter initialization
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ SHUFFLE_SALT);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(train_config.epochs as usize);
    let mut step = 0u64;
    for epoch in 0..train_config.epochs {
        let lr = train_config
            .lr_schedule
            .rate_at(train_config.learning_rate, epoch);
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(train_config.batch_size) {
            let batch = x_all.select(Axis(0), chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let (loss, grads) = loss_and_backward(
                &mut model,
                &batch,
                &labels,
                train_config.lambda,
                ForwardMode::Quantized,
                true,
            )?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            sgd_step(&mut model, &grads, lr, train_config.weight_decay);
            step += 1;
            hook(&TrainEvent::Step {
                model: &model,
                step,
            });
        }
        let metrics = fake_metrics(&mut model, dataset)?;
        if !metrics.task_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: metrics.task_loss,
            });
        }
        hook(&TrainEvent::Epoch {
            model: &model,
            epoch,
            metrics: &metrics,
        });
        history.push(metrics);
    }
    Ok((model, history))
}

const SHUFFLE_SALT: u64 = 0x5f5f_1e5e;
