use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moase::MoaseConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Square image side in pixels.
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub classes: usize,
    pub mlp_hidden: usize,
    /// Residual scale `s` on the adapter branch.
    pub adapter_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image: 16,
            patch: 4,
            dim: 32,
            heads: 2,
            depth: 2,
            classes: 4,
            mlp_hidden: 64,
            adapter_scale: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.image, self.patch, self.dim, self.heads, self.depth, self.classes, self.mlp_hidden];
        if positive.contains(&0) {
            return Err(Error::config("backbone sizes must all be positive"));
        }
        if self.image % self.patch != 0 {
            return Err(Error::config(format!(
                "image side {} is not divisible by patch side {}",
                self.image, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !self.adapter_scale.is_finite() {
            return Err(Error::config("adapter scale must be finite"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: MoaseConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate()
    }
}
