//! Supervised training for the tiny ViT variants: plain cross-entropy with
//! momentum SGD and a cosine-decayed learning rate. Training is bit
//! deterministic for a fixed (spec, dataset, config) triple.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{CogoError, Result};
use crate::graph::Graph;
use crate::rng::CogoRng;
use crate::tensor::Tensor;
use crate::vit::{build, stack_images, ForwardOpts, Model, ModelSpec};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; linear warmup then cosine decay.
    pub lr: f32,
    pub momentum: f32,
    pub warmup_epochs: usize,
    /// Global-norm gradient clip; attention blocks destabilize SGD without it.
    pub clip_norm: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.5,
            momentum: 0.9,
            warmup_epochs: 2,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub per_epoch_loss: Vec<f32>,
    pub val_accuracy: f32,
}

/// Held-out accuracy of a model over a dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(CogoError::EmptyInput("evaluate"));
    }
    let preds = model.predict_batch(&data.images)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f32 / data.len() as f32)
}

/// Train in place; returns per-epoch mean loss and final validation accuracy.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_data.is_empty() {
        return Err(CogoError::EmptyInput("train"));
    }
    let mut rng = CogoRng::new(cfg.seed, TRAIN_STREAM);
    let n = train_data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut per_epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train_data.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_data.labels[i]).collect();
            let batch = stack_images(&images)?;
            let mut g = Graph::new();
            let pass = model.forward(
                &mut g,
                &batch,
                ForwardOpts {
                    input_grad: false,
                    weight_grad: true,
                    dropout_rng: Some(&mut rng),
                },
            )?;
            let loss = g.cross_entropy(pass.logits, &labels)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(CogoError::Diverged { epoch });
            }
            epoch_loss += loss_value as f64 * chunk.len() as f64;
            g.backward(loss)?;

            let warmup_steps = cfg.warmup_epochs * batches_per_epoch;
            let lr_t = if step < warmup_steps {
                cfg.lr * (step + 1) as f32 / warmup_steps as f32
            } else {
                let progress =
                    (step - warmup_steps) as f32 / (total_steps - warmup_steps).max(1) as f32;
                cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
            };

            let clip_scale = match cfg.clip_norm {
                Some(clip) => {
                    let mut total_sq = 0.0f64;
                    for (_, node) in &pass.params {
                        if let Some(grad) = g.grad(*node) {
                            total_sq += grad.sum_squares();
                        }
                    }
                    let total = total_sq.sqrt() as f32;
                    if total > clip {
                        clip / total
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };

            for (name, node) in &pass.params {
                let grad = g
                    .grad(*node)
                    .ok_or_else(|| CogoError::NonFinite {
                        context: format!("missing gradient for {name}"),
                    })?
                    .clone();
                let vel = velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(grad.shape()));
                let weight = model
                    .weights_mut()
                    .get_mut(name)
                    .expect("parameter exists");
                for ((v, g), w) in vel
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(weight.data_mut())
                {
                    *v = cfg.momentum * *v + *g * clip_scale;
                    *w -= lr_t * *v;
                }
            }
            step += 1;
        }
        per_epoch_loss.push((epoch_loss / n as f64) as f32);
    }

    let val_accuracy = if val_data.is_empty() {
        0.0
    } else {
        evaluate(model, val_data)?
    };
    Ok(TrainReport {
        per_epoch_loss,
        val_accuracy,
    })
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const INIT_STREAM: u64 = 0x696e_6974_0000;

/// Build, train and package a model in one call.
pub fn train_model(
    spec: &ModelSpec,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, Checkpoint)> {
    let mut init_rng = CogoRng::new(cfg.seed, INIT_STREAM);
    let mut model = build(spec, &mut init_rng)?;
    let report = train(&mut model, train_data, val_data, cfg)?;
    let meta = CheckpointMeta {
        spec: spec.clone(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_accuracy: report.val_accuracy,
        optimizer: format!(
            "momentum-sgd(lr={}, momentum={}, warmup={}ep, cosine, clip={:?}, batch={})",
            cfg.lr, cfg.momentum, cfg.warmup_epochs, cfg.clip_norm, cfg.batch_size
        ),
        per_epoch_loss: report.per_epoch_loss.clone(),
    };
    let ckpt = Checkpoint::from_model(&model, meta);
    Ok((model, ckpt))
}
