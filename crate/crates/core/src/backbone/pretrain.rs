use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::encode::{argmax_rows, encode, one_hot, predict, soft_cross_entropy};
use super::params::{BackboneParams, ModelParams};
use crate::domains::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, rng_from, AdamConfig, AdamState, Graph, Tensor};
use crate::params::ParamTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of the source set held out for the accuracy check.
    pub holdout: f64,
    pub required_accuracy: f64,
    /// Random horizontal flips of training images (every class is
    /// mirror-symmetric).
    pub flip: bool,
}

const FLIP_TAG: u64 = 0x464c_4950;

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 3e-3,
            batch: 32,
            holdout: 0.2,
            required_accuracy: 0.95,
            flip: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("pretrain epochs and batch must be positive"));
        }
        if !(self.lr > 0.0) || !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::config("pretrain lr must be positive and holdout in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Trained backbone with fresh adapters attached.
    pub params: ModelParams,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn accuracy(params: &ModelParams, data: &Dataset, cfg: &ModelConfig, batch: usize) -> Result<f64> {
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch.max(1)) {
        let x = data.batch(start, start + batch)?;
        let pred = argmax_rows(&predict(params, &x, cfg)?.logits);
        let labels = &data.samples[start..start + pred.len()];
        correct += pred.iter().zip(labels).filter(|(p, s)| **p == s.label).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the backbone (never the adapter) with cross-entropy and Adam on
/// the leading part of `data`, then checks accuracy on the held-out tail.
pub fn pretrain_source(data: &Dataset, cfg: &ModelConfig, pc: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    cfg.validate()?;
    pc.validate()?;
    let n_hold = ((data.len() as f64 * pc.holdout).round() as usize).clamp(1, data.len().saturating_sub(1));
    let train = data.subset(0..data.len() - n_hold);
    let hold = data.subset(data.len() - n_hold..data.len());
    if train.is_empty() {
        return Err(Error::config("pretraining needs at least two samples"));
    }

    let mut backbone = BackboneParams::init(cfg, seed);
    let adam_cfg = AdamConfig {
        lr: pc.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &backbone.leaves());
    let bare = ModelConfig {
        adapter: crate::moase::MoaseConfig {
            experts: 0,
            ..cfg.adapter.clone()
        },
        ..cfg.clone()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pc.epochs);
    let total_steps = pc.epochs * train.len().div_ceil(pc.batch);
    let mut step = 0usize;
    for epoch in 0..pc.epochs {
        order.shuffle(&mut rng_from(&[seed, epoch as u64]));
        let mut flip_rng = rng_from(&[seed, epoch as u64, FLIP_TAG]);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(pc.batch) {
            let side = data.side;
            let mut xs = Vec::with_capacity(idx.len() * side * side);
            for &i in idx {
                let img = &train.samples[i].image;
                if pc.flip && flip_rng.random::<bool>() {
                    xs.extend(img.chunks(side).flat_map(|row| row.iter().rev().copied()));
                } else {
                    xs.extend_from_slice(img);
                }
            }
            let x = Tensor::new(&[idx.len(), data.side, data.side], xs)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.samples[i].label).collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let model = ModelParams {
                backbone: backbone.map("", &mut |_, t| g.leaf(t.clone())),
                adapters: Vec::new(),
            };
            let enc = encode(&mut g, xv, &model, &bare, None)?;
            let loss = soft_cross_entropy(&mut g, enc.logits, &one_hot(&labels, cfg.backbone.classes))?;
            loss_sum += g.value(loss).item()?;
            batches += 1;
            let grads = g.backward(loss)?;
            let grad_list: Vec<Tensor> = model
                .backbone
                .leaves()
                .into_iter()
                .map(|&v| grads.get_or_zeros(v, g.shape(v)))
                .collect();
            // cosine decay to zero over the whole run
            let progress = step as f64 / total_steps as f64;
            adam.config.lr = pc.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            step += 1;
            adam_step(&mut backbone.leaves_mut(), &grad_list, &mut adam)?;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }

    let params = ModelParams::with_fresh_adapters(backbone, cfg, seed);
    let train_accuracy = accuracy(&params, &train, cfg, 64)?;
    let holdout_accuracy = accuracy(&params, &hold, cfg, 64)?;
    if holdout_accuracy < pc.required_accuracy {
        return Err(Error::Pretrain {
            accuracy: holdout_accuracy,
            required: pc.required_accuracy,
        });
    }
    Ok(Pretrained {
        params,
        train_accuracy,
        holdout_accuracy,
        epoch_losses,
    })
}
