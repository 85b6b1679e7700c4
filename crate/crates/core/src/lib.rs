//! Mixture of activation-sparsity experts (MoASE) adapter and an online
//! continual test-time adaptation engine built on a small from-scratch
//! tensor library.

pub mod analysis;
pub mod backbone;
pub mod cli;
pub mod ctta;
pub mod domains;
pub mod error;
pub mod moase;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};
