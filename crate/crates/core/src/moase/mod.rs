//! The mixture of activation-sparsity experts adapter.
//!
//! Each expert is a bottleneck MLP whose hidden activations pass through
//! SDD, keeping either the strongest or the weakest responses of a sample.
//! A domain-aware gate routes tokens softly across experts, and an
//! activation-sparsity gate shifts every expert's retention fraction per
//! sample.

mod config;
mod forward;
mod params;
pub mod sdd;

pub use config::{default_q_schedule, MoaseConfig, SddAxis, SddSpec, Toggles};
pub use forward::{asg_forward, dag_forward, expert_forward, expert_k_hat, moase_forward, MoaseOutput};
pub use params::{ExpertParams, GateParams, MoaseParams};
pub use sdd::sdd;
