use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_rows, encode, one_hot, ActivationHook, ModelConfig, ModelParams};
use crate::domains::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMode {
    HighOnly,
    LowOnly,
}

impl SaliencyMode {
    pub fn name(self) -> &'static str {
        match self {
            SaliencyMode::HighOnly => "high-only",
            SaliencyMode::LowOnly => "low-only",
        }
    }
}

/// Per-pixel `|d max_logit / d x| * |x|` for every image of `data`, with
/// each block's MLP activation clamped to the top or bottom fraction `q`.
pub fn saliency_maps(params: &ModelParams, data: &Dataset, cfg: &ModelConfig, mode: SaliencyMode, q: f64) -> Result<Vec<Vec<f64>>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("retention fraction must lie in (0, 1], got {q}")));
    }
    let x = data.batch(0, data.len())?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let pv = params.bind(&mut g, false, false);
    let hook = ActivationHook {
        q,
        largest: mode == SaliencyMode::HighOnly,
    };
    let enc = encode(&mut g, xv, &pv, cfg, Some(hook))?;
    let logits = g.value(enc.logits).clone();
    let pick = g.constant(one_hot(&argmax_rows(&logits), logits.shape()[1]));
    let top = g.mul(enc.logits, pick)?;
    let total = g.sum(top)?;
    let grads = g.backward(total)?;
    let gx = grads.get_or_zeros(xv, x.shape());
    let px = data.side * data.side;
    Ok(gx
        .data()
        .chunks(px)
        .zip(x.data().chunks(px))
        .map(|(gi, xi)| gi.iter().zip(xi).map(|(a, b)| (a * b).abs()).collect())
        .collect())
}

/// Share of saliency mass inside the foreground mask, averaged over `data`.
pub fn saliency_split(params: &ModelParams, data: &Dataset, cfg: &ModelConfig, mode: SaliencyMode, q: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("saliency needs at least one sample"));
    }
    let px = data.side * data.side;
    if let Some(i) = data.samples.iter().position(|s| s.mask.len() != px) {
        return Err(Error::validation(format!("sample {i} has no foreground mask")));
    }
    let maps = saliency_maps(params, data, cfg, mode, q)?;
    let mut acc = 0.0;
    for (map, s) in maps.iter().zip(&data.samples) {
        let total: f64 = map.iter().sum();
        let inside: f64 = map.iter().zip(&s.mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        if total > 0.0 {
            acc += inside / total;
        }
    }
    Ok(acc / data.len() as f64)
}
