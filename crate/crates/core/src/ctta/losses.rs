use super::augment::AugmentationSet;
use crate::backbone::{predict, soft_cross_entropy, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::moase::MoaseParams;
use crate::numerics::{mix_seed, Graph, Tensor, Var};
use crate::params::ParamTree;

pub struct PseudoLabel {
    /// `b x C` mean of the per-view softmax rows.
    pub probs: Tensor,
    /// `b x d` class-token feature of the un-augmented batch.
    pub feature: Tensor,
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().expect("rank 2");
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape(), out).expect("finite softmax")
}

/// Teacher prediction averaged over `augs`. Runs on constants only, so no
/// gradient ever reaches the teacher. `seed` drives any jitter.
pub fn pseudo_label(teacher: &ModelParams, x: &Tensor, augs: &AugmentationSet, cfg: &ModelConfig, seed: u64) -> Result<PseudoLabel> {
    if augs.views.is_empty() {
        return Err(Error::config("augmentation set is empty"));
    }
    let mut sum: Option<Vec<f64>> = None;
    let mut feature = None;
    for (i, view) in augs.views.iter().enumerate() {
        let xa = view.apply(x, mix_seed(&[seed, i as u64]))?;
        let pred = predict(teacher, &xa, cfg)?;
        if view.is_identity() && feature.is_none() {
            feature = Some(pred.feature);
        }
        let p = softmax_rows(&pred.logits);
        match &mut sum {
            None => sum = Some(p.into_data()),
            Some(acc) => acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v),
        }
    }
    let n = augs.views.len() as f64;
    let b = x.shape()[0];
    let probs: Vec<f64> = sum.expect("non-empty").into_iter().map(|v| v / n).collect();
    let c = probs.len() / b;
    let feature = match feature {
        Some(f) => f,
        None => predict(teacher, x, cfg)?.feature,
    };
    Ok(PseudoLabel {
        probs: Tensor::new(&[b, c], probs)?,
        feature,
    })
}

/// Soft cross-entropy of the student against the pseudo-label rows `p`.
pub fn consistency_loss(g: &mut Graph, student_logits: Var, p: &Tensor) -> Result<Var> {
    let c = *p.shape().last().ok_or_else(|| Error::shape("empty target"))?;
    for (j, row) in p.data().chunks(c).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::validation(format!("pseudo-label row {j} is not a distribution (sum {s})")));
        }
    }
    soft_cross_entropy(g, student_logits, p)
}

/// `(mu / 2) * sum_e ||theta_e^S - theta_e^T||^2` over the expert
/// parameters of every adapter; gates are excluded.
pub fn hp_loss(g: &mut Graph, student: &[MoaseParams<Var>], teacher: &[MoaseParams], mu: f64) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::shape(format!("{} student vs {} teacher adapters", student.len(), teacher.len())));
    }
    let mut total: Option<Var> = None;
    for (s, t) in student.iter().zip(teacher) {
        if s.experts.len() != t.experts.len() {
            return Err(Error::shape("expert count differs between student and teacher"));
        }
        for (se, te) in s.experts.iter().zip(&t.experts) {
            for (&sv, tv) in se.leaves().into_iter().zip(te.leaves()) {
                if g.shape(sv) != tv.shape() {
                    return Err(Error::shape(format!("{:?} vs {:?}", g.shape(sv), tv.shape())));
                }
                let tc = g.constant(tv.clone());
                let diff = g.sub(sv, tc)?;
                let sq = g.mul(diff, diff)?;
                let part = g.sum(sq)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, part)?,
                    None => part,
                });
            }
        }
    }
    match total {
        Some(t) => g.scale(t, mu / 2.0),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}
