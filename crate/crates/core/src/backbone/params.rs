use rand::Rng;

use super::config::ModelConfig;
use crate::moase::MoaseParams;
use crate::numerics::{rng_from, Graph, Tensor, Var};
use crate::params::{join, leaf_params, ParamTree};

leaf_params! {
    /// Patch projection (`p^2 x d`), class token (`1 x d`) and learned
    /// positions (`n x d`).
    pub struct StemParams {
        patch_w,
        patch_b,
        cls,
        pos,
    }
}

leaf_params! {
    pub struct BlockParams {
        ln1_g,
        ln1_b,
        w_q,
        b_q,
        w_k,
        b_k,
        w_v,
        b_v,
        w_o,
        b_o,
        ln2_g,
        ln2_b,
        w_1,
        b_1,
        w_2,
        b_2,
    }
}

leaf_params! {
    pub struct HeadParams {
        ln_g,
        ln_b,
        w,
        b,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T = Tensor> {
    pub stem: StemParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> BackboneParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BackboneParams<U> {
        BackboneParams {
            stem: self.stem.map(&join(prefix, "stem"), f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(&join(prefix, "blocks"), &i.to_string()), f))
                .collect(),
            head: self.head.map(&join(prefix, "head"), f),
        }
    }
}

impl<T> ParamTree<T> for BackboneParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Backbone plus one adapter per block (no adapters when the adapter is
/// disabled).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub backbone: BackboneParams<T>,
    pub adapters: Vec<MoaseParams<T>>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.adapters.visit(&join(prefix, "adapters"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.adapters.visit_mut(&join(prefix, "adapters"), f);
    }
}

fn insert(g: &mut Graph, t: &Tensor, grad: bool) -> Var {
    if grad {
        g.leaf(t.clone())
    } else {
        g.constant(t.clone())
    }
}

const BACKBONE_TAG: u64 = 0x4241_434b;
const ADAPTER_TAG: u64 = 0x4144_4150;

fn linear<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

impl BackboneParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let c = &cfg.backbone;
        let mut rng = rng_from(&[seed, BACKBONE_TAG]);
        let (d, m) = (c.dim, c.mlp_hidden);
        let stem = StemParams {
            patch_w: linear(c.patch * c.patch, d, &mut rng),
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::randn(&[1, d], 0.1, &mut rng),
            pos: Tensor::randn(&[c.tokens(), d], 0.1, &mut rng),
        };
        let blocks = (0..c.depth)
            .map(|_| BlockParams {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                w_q: linear(d, d, &mut rng),
                b_q: Tensor::zeros(&[d]),
                w_k: linear(d, d, &mut rng),
                b_k: Tensor::zeros(&[d]),
                w_v: linear(d, d, &mut rng),
                b_v: Tensor::zeros(&[d]),
                w_o: linear(d, d, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w_1: linear(d, m, &mut rng),
                b_1: Tensor::zeros(&[m]),
                w_2: linear(m, d, &mut rng),
                b_2: Tensor::zeros(&[d]),
            })
            .collect();
        let head = HeadParams {
            ln_g: Tensor::ones(&[d]),
            ln_b: Tensor::zeros(&[d]),
            w: linear(d, c.classes, &mut rng),
            b: Tensor::zeros(&[c.classes]),
        };
        Self { stem, blocks, head }
    }
}

impl ModelParams {
    /// Fresh adapters (zero output) for every block of `backbone`.
    pub fn with_fresh_adapters(backbone: BackboneParams, cfg: &ModelConfig, seed: u64) -> Self {
        let adapters = if cfg.adapter.enabled() {
            (0..cfg.backbone.depth)
                .map(|i| MoaseParams::init(cfg.backbone.dim, &cfg.adapter, &mut rng_from(&[seed, ADAPTER_TAG, i as u64])))
                .collect()
        } else {
            Vec::new()
        };
        Self { backbone, adapters }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self::with_fresh_adapters(BackboneParams::init(cfg, seed), cfg, seed)
    }

    /// Inserts the model into `g`; each part becomes differentiable leaves
    /// only when its flag is set.
    pub fn bind(&self, g: &mut Graph, backbone_grad: bool, adapter_grad: bool) -> ModelParams<Var> {
        let backbone = self.backbone.map("", &mut |_, t| insert(g, t, backbone_grad));
        let adapters = self.adapters.iter().map(|a| a.bind(g, adapter_grad)).collect();
        ModelParams { backbone, adapters }
    }

    /// The same model with the adapter branch removed.
    pub fn without_adapters(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            adapters: Vec::new(),
        }
    }
}
