use serde::{Deserialize, Serialize};

use super::augment::AugmentationSet;
use super::losses::{consistency_loss, hp_loss, pseudo_label};
use crate::backbone::{encode, trainable_tensors, trainable_view, FreezeMode, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, mix_seed, AdamConfig, AdamState, Graph, Tensor};
use crate::params::ParamTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub lr: f64,
    /// EMA weight of the teacher.
    pub alpha: f64,
    /// Homeostatic-proximal coefficient.
    pub mu: f64,
    pub batch: usize,
    pub augmentations: AugmentationSet,
    pub freeze: FreezeMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            alpha: 0.999,
            mu: 1.0,
            batch: 8,
            augmentations: AugmentationSet::desk(),
            freeze: FreezeMode::AdapterOnly,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        self.augmentations.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Teacher/student pair. Both carry the same frozen backbone; only the
/// trainable view of the student is ever optimised.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub teacher: ModelParams,
    pub student: ModelParams,
    pub alpha: f64,
    pub mu: f64,
    pub adam: AdamState,
    pub freeze: FreezeMode,
    pub step: u64,
}

impl AdaptState {
    pub fn new(source: ModelParams, cfg: &AdaptConfig) -> Self {
        let adam = AdamState::new(cfg.adam(), &trainable_tensors(&source, cfg.freeze));
        Self {
            teacher: source.clone(),
            student: source,
            alpha: cfg.alpha,
            mu: cfg.mu,
            adam,
            freeze: cfg.freeze,
            step: 0,
        }
    }
}

/// `theta^T <- alpha theta^T + (1 - alpha) theta^S` over the trainable view.
/// Entries where both already agree are left untouched.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, alpha: f64, mode: FreezeMode) {
    let src = trainable_tensors(student, mode);
    for (t, s) in trainable_view(teacher, mode).into_iter().zip(src) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            if *tv != sv {
                *tv = alpha * *tv + (1.0 - alpha) * sv;
            }
        }
    }
}

pub struct StepOutput {
    /// Reported prediction, computed before the update.
    pub probs: Tensor,
    pub feature: Tensor,
    pub consistency: f64,
    pub hp: f64,
}

/// One online step: pseudo-label, student loss, Adam on the trainable view,
/// EMA. `seed` decorrelates augmentation noise across runs.
pub fn adapt_step(state: &mut AdaptState, x: &Tensor, model_cfg: &ModelConfig, cfg: &AdaptConfig, seed: u64) -> Result<StepOutput> {
    let pl = pseudo_label(&state.teacher, x, &cfg.augmentations, model_cfg, mix_seed(&[seed, state.step]))?;
    state.step += 1;
    if state.student.adapters.is_empty() {
        return Ok(StepOutput {
            probs: pl.probs,
            feature: pl.feature,
            consistency: 0.0,
            hp: 0.0,
        });
    }

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = state.student.bind(&mut g, false, true);
    let enc = encode(&mut g, xv, &pv, model_cfg, None)?;
    let cons = consistency_loss(&mut g, enc.logits, &pl.probs)?;
    let mut loss = cons;
    let mut hp_value = 0.0;
    if model_cfg.adapter.toggles.use_hp {
        let hp = hp_loss(&mut g, &pv.adapters, &state.teacher.adapters, state.mu)?;
        hp_value = g.value(hp).item()?;
        loss = g.add(loss, hp)?;
    }
    let consistency = g.value(cons).item()?;
    let grads = g.backward(loss)?;
    let grad_list: Vec<Tensor> = pv
        .adapters
        .leaves()
        .into_iter()
        .map(|&v| grads.get_or_zeros(v, g.shape(v)))
        .collect();
    adam_step(&mut trainable_view(&mut state.student, state.freeze), &grad_list, &mut state.adam)?;
    ema_update(&mut state.teacher, &state.student, state.alpha, state.freeze);
    Ok(StepOutput {
        probs: pl.probs,
        feature: pl.feature,
        consistency,
        hp: hp_value,
    })
}
