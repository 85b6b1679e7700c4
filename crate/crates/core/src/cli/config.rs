use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::backbone::{ModelConfig, PretrainConfig};
use crate::ctta::AdaptConfig;
use crate::domains::StreamSpec;
use crate::error::{Error, Result};
use crate::moase::{SddAxis, Toggles};

/// Grid points of the sweep command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub experts: Vec<usize>,
    pub hidden: Vec<usize>,
    pub axes: Vec<SddAxis>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experts: vec![2, 4, 8, 16],
            hidden: vec![4, 8, 16, 32],
            axes: vec![SddAxis::Token, SddAxis::Channel],
        }
    }
}

/// Every knob of a run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stream: StreamSpec,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            stream: StreamSpec::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            analysis: AnalysisConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.analysis.validate()?;
        if self.sweep.experts.contains(&0) || self.sweep.hidden.contains(&0) {
            return Err(Error::config("sweep points must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Component configurations of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No adapter: the frozen source.
    None,
    /// Experts and soft routing only.
    MoeOnly,
    Sdd,
    #[serde(rename = "sdd+dag")]
    SddDag,
    #[serde(rename = "sdd+dag+asg")]
    SddDagAsg,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::MoeOnly,
        Ablation::Sdd,
        Ablation::SddDag,
        Ablation::SddDagAsg,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::MoeOnly => "moe-only",
            Ablation::Sdd => "sdd",
            Ablation::SddDag => "sdd+dag",
            Ablation::SddDagAsg => "sdd+dag+asg",
            Ablation::Full => "full",
        }
    }

    pub fn toggles(self) -> Toggles {
        let on = |use_sdd, use_dag, use_asg, use_hp| Toggles {
            use_sdd,
            use_dag,
            use_asg,
            use_hp,
        };
        match self {
            Ablation::None | Ablation::MoeOnly => Toggles::NONE,
            Ablation::Sdd => on(true, false, false, false),
            Ablation::SddDag => on(true, true, false, false),
            Ablation::SddDagAsg => on(true, true, true, false),
            Ablation::Full => Toggles::FULL,
        }
    }

    /// Applies the ablation to a model configuration.
    pub fn apply(self, cfg: &mut ModelConfig) {
        cfg.adapter.toggles = self.toggles();
        if self == Ablation::None {
            cfg.adapter.experts = 0;
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}`")))
    }
}
