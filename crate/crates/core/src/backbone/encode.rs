use super::config::ModelConfig;
use super::params::{BlockParams, ModelParams};
use crate::error::{Error, Result};
use crate::moase::sdd::{count_for_fraction, sdd_on_graph};
use crate::moase::{moase_forward, MoaseOutput, SddAxis};
use crate::numerics::{Graph, Tensor, Var};

/// Clamp applied to every block's MLP activation: keep only the top
/// (`largest`) or bottom fraction `q` of each sample's entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationHook {
    pub q: f64,
    pub largest: bool,
}

pub struct Encoded {
    /// `b x C`
    pub logits: Var,
    /// `b x n x d` after the final norm.
    pub tokens: Var,
    /// `b x d` class-token feature.
    pub feature: Var,
    /// Per-block attention weights, `(b * heads) x n x n`.
    pub attention: Vec<Var>,
    /// Per-block adapter outputs (empty without adapters).
    pub adapters: Vec<MoaseOutput>,
}

fn norm_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let y = g.layer_norm(x)?;
    let y = g.mul(y, gain)?;
    g.add(y, bias)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn attention(g: &mut Graph, h: Var, p: &BlockParams<Var>, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let c = &cfg.backbone;
    let (b, n) = (g.shape(h)[0], g.shape(h)[1]);
    let (heads, dh) = (c.heads, c.head_dim());
    let split = |g: &mut Graph, x: Var, axes: &[usize], shape: &[usize]| -> Result<Var> {
        let x = g.reshape(x, &[b, n, heads, dh])?;
        let x = g.permute(x, axes)?;
        g.reshape(x, shape)
    };
    let q = linear(g, h, p.w_q, p.b_q)?;
    let k = linear(g, h, p.w_k, p.b_k)?;
    let v = linear(g, h, p.w_v, p.b_v)?;
    let q = split(g, q, &[0, 2, 1, 3], &[b * heads, n, dh])?;
    let kt = split(g, k, &[0, 2, 3, 1], &[b * heads, dh, n])?;
    let v = split(g, v, &[0, 2, 1, 3], &[b * heads, n, dh])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = g.softmax(scores)?;
    let ctx = g.matmul(att, v)?;
    let ctx = g.reshape(ctx, &[b, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, c.dim])?;
    Ok((linear(g, ctx, p.w_o, p.b_o)?, att))
}

/// Transformer classifier over `b x side x side` images. Each block is
/// `x + Attn(LN x)` followed by `x + MLP(LN x) + s * MoASE(LN x)`.
pub fn encode(
    g: &mut Graph,
    x: Var,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    hook: Option<ActivationHook>,
) -> Result<Encoded> {
    let c = &cfg.backbone;
    let (side, patch, grid, d) = (c.image, c.patch, c.grid(), c.dim);
    let b = match *g.shape(x) {
        [b, h, w] if h == side && w == side => b,
        ref s => return Err(Error::shape(format!("expected b x {side} x {side} images, got {s:?}"))),
    };
    if p.backbone.blocks.len() != c.depth {
        return Err(Error::shape(format!(
            "config depth {} but params hold {} blocks",
            c.depth,
            p.backbone.blocks.len()
        )));
    }
    if !p.adapters.is_empty() && p.adapters.len() != c.depth {
        return Err(Error::shape(format!("{} adapters for {} blocks", p.adapters.len(), c.depth)));
    }

    let patches = g.reshape(x, &[b, grid, patch, grid, patch])?;
    let patches = g.permute(patches, &[0, 1, 3, 2, 4])?;
    let patches = g.reshape(patches, &[b, grid * grid, patch * patch])?;
    let stem = &p.backbone.stem;
    let emb = linear(g, patches, stem.patch_w, stem.patch_b)?;
    let zeros = g.constant(Tensor::zeros(&[b, 1, d]));
    let cls = g.add(zeros, stem.cls)?;
    let mut h = g.concat(&[cls, emb], 1)?;
    h = g.add(h, stem.pos)?;

    let mut attention_maps = Vec::with_capacity(c.depth);
    let mut adapter_outputs = Vec::new();
    for (i, blk) in p.backbone.blocks.iter().enumerate() {
        let a_in = norm_affine(g, h, blk.ln1_g, blk.ln1_b)?;
        let (a_out, att) = attention(g, a_in, blk, cfg)?;
        attention_maps.push(att);
        h = g.add(h, a_out)?;

        let m_in = norm_affine(g, h, blk.ln2_g, blk.ln2_b)?;
        let pre = linear(g, m_in, blk.w_1, blk.b_1)?;
        let mut act = g.relu(pre)?;
        if let Some(hk) = hook {
            let shape = g.shape(act).to_vec();
            let k = count_for_fraction(shape[1] * shape[2], hk.q).max(1);
            act = sdd_on_graph(g, act, &vec![k; b], hk.largest, SddAxis::Token)?.0;
        }
        let m_out = linear(g, act, blk.w_2, blk.b_2)?;
        h = g.add(h, m_out)?;
        if let Some(ap) = p.adapters.get(i) {
            let out = moase_forward(g, m_in, &cfg.adapter, ap)?;
            let scaled = g.scale(out.y, c.adapter_scale)?;
            h = g.add(h, scaled)?;
            adapter_outputs.push(out);
        }
    }

    let head = &p.backbone.head;
    let tokens = norm_affine(g, h, head.ln_g, head.ln_b)?;
    let feature = g.slice(tokens, 1, 0, 1)?;
    let feature = g.reshape(feature, &[b, d])?;
    let logits = linear(g, feature, head.w, head.b)?;
    Ok(Encoded {
        logits,
        tokens,
        feature,
        attention: attention_maps,
        adapters: adapter_outputs,
    })
}

/// Forward values only.
pub struct Prediction {
    pub logits: Tensor,
    pub feature: Tensor,
}

/// Runs [`encode`] with every parameter held constant.
pub fn predict(params: &crate::backbone::ModelParams, x: &Tensor, cfg: &ModelConfig) -> Result<Prediction> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = params.bind(&mut g, false, false);
    let enc = encode(&mut g, xv, &pv, cfg, None)?;
    Ok(Prediction {
        logits: g.value(enc.logits).clone(),
        feature: g.value(enc.feature).clone(),
    })
}

/// Soft cross-entropy `-(1/b) sum_j sum_c p[j,c] log softmax(z)[j,c]`.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::shape(format!(
            "logits {:?} vs targets {:?}",
            g.shape(logits),
            targets.shape()
        )));
    }
    let b = targets.shape()[0];
    let probs = g.softmax(logits)?;
    let logp = g.log(probs)?;
    let t = g.constant(targets.clone());
    let weighted = g.mul(logp, t)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / b as f64)
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (j, &l) in labels.iter().enumerate() {
        data[j * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data).expect("finite")
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
