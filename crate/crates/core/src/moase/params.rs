use rand::Rng;

use super::config::MoaseConfig;
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{join, leaf_params, ParamTree};

leaf_params! {
    /// Two-layer bottleneck expert. Weights use the `x * W` layout:
    /// `w_down` is `d x h`, `w_up` is `h x d`.
    pub struct ExpertParams {
        w_down,
        b_down,
        w_up,
        b_up,
    }
}

leaf_params! {
    /// Domain-aware gate (`dag_*`) and activation-sparsity gate (`asg_*`).
    /// Weights are `d x E`.
    pub struct GateParams {
        dag_w,
        dag_b,
        asg_w,
        asg_b,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoaseParams<T = Tensor> {
    pub experts: Vec<ExpertParams<T>>,
    pub gate: GateParams<T>,
}

impl<T> MoaseParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MoaseParams<U> {
        MoaseParams {
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(i, e)| e.map(&join(&join(prefix, "experts"), &i.to_string()), f))
                .collect(),
            gate: self.gate.map(&join(prefix, "gate"), f),
        }
    }
}

impl<T> ParamTree<T> for MoaseParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.experts.visit(&join(prefix, "experts"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
        self.experts.visit_mut(&join(prefix, "experts"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

impl MoaseParams {
    /// Kaiming-normal down-projections; up-projections, every bias and both
    /// gates start at zero, so a fresh adapter outputs exactly zero.
    pub fn init<R: Rng + ?Sized>(d: usize, cfg: &MoaseConfig, rng: &mut R) -> Self {
        let (e, h) = (cfg.experts, cfg.hidden);
        let std = (2.0 / d as f64).sqrt();
        let experts = (0..e)
            .map(|_| ExpertParams {
                w_down: Tensor::randn(&[d, h], std, rng),
                b_down: Tensor::zeros(&[h]),
                w_up: Tensor::zeros(&[h, d]),
                b_up: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            experts,
            gate: GateParams {
                dag_w: Tensor::zeros(&[d, e]),
                dag_b: Tensor::zeros(&[e]),
                asg_w: Tensor::zeros(&[d, e]),
                asg_b: Tensor::zeros(&[e]),
            },
        }
    }

    /// Every entry drawn from `N(0, std^2)`; used by tests to leave the
    /// zero-initialised regime.
    pub fn random<R: Rng + ?Sized>(d: usize, cfg: &MoaseConfig, std: f64, rng: &mut R) -> Self {
        let mut p = Self::init(d, cfg, rng);
        p.visit_mut("", &mut |_, t| *t = Tensor::randn(t.shape(), std, rng));
        p
    }

    /// Inserts every tensor into `g`, as differentiable leaves when
    /// `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MoaseParams<Var> {
        self.map("", &mut |_, t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Closed-form scalar count: `E(dh + h + hd + d) + 2(Ed + E)`.
    pub fn closed_form_count(d: usize, experts: usize, hidden: usize) -> usize {
        experts * (d * hidden + hidden + hidden * d + d) + 2 * (experts * d + experts)
    }
}
