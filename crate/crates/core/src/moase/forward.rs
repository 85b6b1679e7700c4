use super::config::{MoaseConfig, SddAxis, SddSpec};
use super::params::{ExpertParams, GateParams, MoaseParams};
use super::sdd::{count_for_fraction, dynamic_k, groups_for, sdd_on_graph};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub struct MoaseOutput {
    /// `b x n x d` adapter output.
    pub y: Var,
    /// `b x n x E` routing weights.
    pub routing: Var,
    /// `b x E` threshold offsets (zeros when the ASG is off).
    pub thresholds: Tensor,
    /// Per-expert retained-entry counts, one per sample.
    pub k_hat: Vec<Vec<usize>>,
    /// Per-expert 0/1 retention masks, `b x n x h` (absent without SDD).
    pub masks: Vec<Option<Tensor>>,
}

fn rank3(g: &Graph, f: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(f) {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(Error::shape(format!("adapter input must be b x n x d, got {s:?}"))),
    }
}

/// Routing weights `softmax(x W + b)` per token. With `use_sdd_input` the
/// gate only sees the bottom half of each sample's `n x d` responses.
pub fn dag_forward(g: &mut Graph, f: Var, gate: &GateParams<Var>, use_sdd_input: bool) -> Result<Var> {
    let (b, n, d) = rank3(g, f)?;
    let input = if use_sdd_input {
        let k = count_for_fraction(n * d, 0.5).max(1);
        sdd_on_graph(g, f, &vec![k; b], false, SddAxis::Token)?.0
    } else {
        f
    };
    let logits = g.matmul(input, gate.dag_w)?;
    let logits = g.add(logits, gate.dag_b)?;
    g.softmax(logits)
}

/// Threshold offsets `tanh(mean_tokens(x) W + b)`, shape `b x E`.
pub fn asg_forward(g: &mut Graph, f: Var, gate: &GateParams<Var>) -> Result<Var> {
    rank3(g, f)?;
    let pooled = g.mean_axis(f, 1)?;
    let z = g.matmul(pooled, gate.asg_w)?;
    let z = g.add(z, gate.asg_b)?;
    g.tanh(z)
}

/// Retained count per selection group for one expert.
pub fn expert_k_hat(shape: &[usize], hidden: usize, spec: &SddSpec, eta: f64, t: &[f64], axis: SddAxis) -> Vec<usize> {
    let n = shape[1];
    match axis {
        SddAxis::Token => t.iter().map(|&ti| dynamic_k(n * hidden, spec.q, eta, ti)).collect(),
        SddAxis::Channel => t
            .iter()
            .flat_map(|&ti| std::iter::repeat_n(dynamic_k(hidden, spec.q, eta, ti), n))
            .collect(),
    }
}

/// One expert: `ReLU(x W_down + b_down)`, SDD with the per-group counts
/// `k_hat`, scaled by `1 + eta * T_i` when `t_i` (shape `b x 1`) is given,
/// then projected back up.
///
/// `k_hat = None` skips selection entirely.
pub fn expert_forward(
    g: &mut Graph,
    f: Var,
    p: &ExpertParams<Var>,
    spec: &SddSpec,
    axis: SddAxis,
    k_hat: Option<&[usize]>,
    t_i: Option<Var>,
    eta: f64,
) -> Result<(Var, Option<Tensor>)> {
    let (b, _, _) = rank3(g, f)?;
    let pre = g.matmul(f, p.w_down)?;
    let pre = g.add(pre, p.b_down)?;
    let mut h = g.relu(pre)?;
    let mut mask = None;
    if let Some(ks) = k_hat {
        let shape = g.shape(h).to_vec();
        let (group, groups) = groups_for(&shape, axis)?;
        if ks.len() != groups || ks.iter().any(|&k| k == 0 || k > group) {
            return Err(Error::Selection(format!(
                "expert needs {groups} counts in [1, {group}], got {ks:?}"
            )));
        }
        let (masked, m) = sdd_on_graph(g, h, ks, spec.largest, axis)?;
        h = masked;
        mask = Some(m);
    }
    if let Some(t) = t_i {
        let t = g.reshape(t, &[b, 1, 1])?;
        let t = g.scale(t, eta)?;
        let one = g.constant(Tensor::scalar(1.0));
        let factor = g.add(t, one)?;
        h = g.mul(h, factor)?;
    }
    let up = g.matmul(h, p.w_up)?;
    Ok((g.add(up, p.b_up)?, mask))
}

/// Full adapter: `y = sum_i G[..., i] * e_i(x)` with every expert evaluated.
/// Without the DAG toggle the router still exists but sees the raw input.
pub fn moase_forward(g: &mut Graph, f: Var, cfg: &MoaseConfig, p: &MoaseParams<Var>) -> Result<MoaseOutput> {
    let (b, n, d) = rank3(g, f)?;
    let e = cfg.experts;
    if p.experts.len() != e || e == 0 {
        return Err(Error::shape(format!(
            "config has {e} experts, params have {}",
            p.experts.len()
        )));
    }
    let schedule = cfg.schedule()?;
    let tg = cfg.toggles;

    let routing = dag_forward(g, f, &p.gate, tg.use_dag)?;
    let t_var = if tg.use_asg {
        Some(asg_forward(g, f, &p.gate)?)
    } else {
        None
    };
    let thresholds = match t_var {
        Some(t) => g.value(t).clone(),
        None => Tensor::zeros(&[b, e]),
    };

    let mut y: Option<Var> = None;
    let mut k_hats = Vec::with_capacity(e);
    let mut masks = Vec::with_capacity(e);
    for (i, (expert, spec)) in p.experts.iter().zip(&schedule).enumerate() {
        let t_col: Vec<f64> = (0..b).map(|j| thresholds.data()[j * e + i]).collect();
        let ks = tg
            .use_sdd
            .then(|| expert_k_hat(&[b, n, d], cfg.hidden, spec, cfg.eta, &t_col, cfg.axis));
        let t_i = match t_var {
            Some(t) => Some(g.slice(t, 1, i, 1)?),
            None => None,
        };
        let (out, mask) = expert_forward(g, f, expert, spec, cfg.axis, ks.as_deref(), t_i, cfg.eta)?;
        let weight = g.slice(routing, 2, i, 1)?;
        let term = g.mul(out, weight)?;
        y = Some(match y {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        let per_sample = match (&ks, cfg.axis) {
            (Some(k), SddAxis::Token) => k.clone(),
            (Some(k), SddAxis::Channel) => k.chunks(n).map(|c| c.iter().sum()).collect(),
            (None, _) => vec![n * cfg.hidden; b],
        };
        k_hats.push(per_sample);
        masks.push(mask);
    }
    Ok(MoaseOutput {
        y: y.expect("at least one expert"),
        routing,
        thresholds,
        k_hat: k_hats,
        masks,
    })
}
