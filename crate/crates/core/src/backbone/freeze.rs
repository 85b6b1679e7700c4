use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::numerics::Tensor;
use crate::params::ParamTree;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Only expert and gate parameters of the adapters are trained.
    #[default]
    AdapterOnly,
}

/// Parameter names on each side of the split.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl Partition {
    pub fn trainable_count(&self, params: &ModelParams) -> usize {
        let named = params.named();
        named
            .iter()
            .filter(|(n, _)| self.trainable.contains(n))
            .map(|(_, t)| t.len())
            .sum()
    }
}

fn is_trainable(name: &str, mode: FreezeMode) -> bool {
    match mode {
        FreezeMode::AdapterOnly => name.starts_with("adapters."),
    }
}

pub fn freeze_partition(params: &ModelParams, mode: FreezeMode) -> Partition {
    let (trainable, frozen) = params
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .partition(|n| is_trainable(n, mode));
    Partition { trainable, frozen }
}

/// Mutable handles to the trainable tensors, in traversal order.
pub fn trainable_view(params: &mut ModelParams, mode: FreezeMode) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    params.visit_mut("", &mut |n, t| {
        if is_trainable(n, mode) {
            out.push(t)
        }
    });
    out
}

pub fn trainable_tensors(params: &ModelParams, mode: FreezeMode) -> Vec<&Tensor> {
    let mut out = Vec::new();
    params.visit("", &mut |n, t| {
        if is_trainable(n, mode) {
            out.push(t)
        }
    });
    out
}
