use serde::{Deserialize, Serialize};

use crate::backbone::{encode, freeze_partition, FreezeMode, ModelConfig, ModelParams};
use crate::error::Result;
use crate::numerics::{Graph, Tensor};
use crate::params::count_scalars;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub trainable_params: usize,
    pub total_params: usize,
    /// Multiply-accumulates of one single-image forward pass.
    pub macs: u64,
}

/// Adapter parameters for one block: experts plus both gates.
pub fn adapter_params_per_block(cfg: &ModelConfig) -> usize {
    let (e, d, h) = (cfg.adapter.experts, cfg.backbone.dim, cfg.adapter.hidden);
    if e == 0 {
        return 0;
    }
    e * (d * h + h + h * d + d) + 2 * (e * d + e)
}

pub fn backbone_params(cfg: &ModelConfig) -> usize {
    let c = &cfg.backbone;
    let (d, m, p) = (c.dim, c.mlp_hidden, c.patch);
    let stem = p * p * d + d + d + c.tokens() * d;
    let block = 4 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d);
    let head = 2 * d + d * c.classes + c.classes;
    stem + c.depth * block + head
}

/// Closed-form multiply-accumulate count of one forward over `batch` images.
pub fn forward_macs(cfg: &ModelConfig, batch: usize) -> u64 {
    let c = &cfg.backbone;
    let (d, m, n) = (c.dim, c.mlp_hidden, c.tokens());
    let patches = c.grid() * c.grid();
    let stem = patches * c.patch * c.patch * d;
    let mut block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * m;
    let a = &cfg.adapter;
    if a.experts > 0 {
        block += n * d * a.experts + a.experts * 2 * n * d * a.hidden;
        if a.toggles.use_asg {
            block += d * a.experts;
        }
    }
    let head = d * c.classes;
    ((stem + c.depth * block + head) * batch) as u64
}

/// Closed-form counts; the trainable share follows the adapter-only split.
pub fn count_costs(cfg: &ModelConfig) -> Costs {
    let adapters = cfg.backbone.depth * adapter_params_per_block(cfg);
    Costs {
        trainable_params: adapters,
        total_params: backbone_params(cfg) + adapters,
        macs: forward_macs(cfg, 1),
    }
}

/// The same counts read off constructed parameters and a recorded forward.
pub fn instrumented_costs(params: &ModelParams, cfg: &ModelConfig) -> Result<Costs> {
    let part = freeze_partition(params, FreezeMode::AdapterOnly);
    let mut g = Graph::new();
    let side = cfg.backbone.image;
    let x = g.constant(Tensor::zeros(&[1, side, side]));
    let pv = params.bind(&mut g, false, false);
    encode(&mut g, x, &pv, cfg, None)?;
    Ok(Costs {
        trainable_params: part.trainable_count(params),
        total_params: count_scalars(params),
        macs: g.macs(),
    })
}
