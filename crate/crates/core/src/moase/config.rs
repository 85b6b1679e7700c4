use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which slice SDD ranks over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SddAxis {
    /// All `n x m` entries of a sample compete (spatial token axis).
    #[default]
    Token,
    /// Each token's `m` channels compete separately.
    Channel,
}

impl std::str::FromStr for SddAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(SddAxis::Token),
            "channel" => Ok(SddAxis::Channel),
            other => Err(Error::config(format!("unknown sdd axis `{other}`"))),
        }
    }
}

/// Retention fraction and direction for one expert's SDD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SddSpec {
    pub q: f64,
    /// Keep the largest responses (domain-agnostic expert) when true,
    /// the smallest (domain-specific expert) when false.
    pub largest: bool,
}

impl SddSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::config(format!("sdd q must lie in (0, 1], got {}", self.q)));
        }
        Ok(())
    }
}

/// Switches for the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub use_sdd: bool,
    pub use_dag: bool,
    pub use_asg: bool,
    pub use_hp: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        use_sdd: true,
        use_dag: true,
        use_asg: true,
        use_hp: true,
    };
    pub const NONE: Toggles = Toggles {
        use_sdd: false,
        use_dag: false,
        use_asg: false,
        use_hp: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoaseConfig {
    /// Expert count; 0 disables the adapter entirely.
    pub experts: usize,
    pub hidden: usize,
    /// Threshold temperature on the ASG offsets.
    pub eta: f64,
    pub axis: SddAxis,
    /// Per-expert retention schedule; `None` uses [`default_q_schedule`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<SddSpec>>,
    pub toggles: Toggles,
}

impl Default for MoaseConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            hidden: 8,
            eta: 0.1,
            axis: SddAxis::Token,
            schedule: None,
            toggles: Toggles::FULL,
        }
    }
}

impl MoaseConfig {
    pub fn enabled(&self) -> bool {
        self.experts > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Ok(());
        }
        if self.experts < 2 || self.experts % 2 != 0 {
            return Err(Error::config(format!(
                "expert count must be even and at least 2, got {}",
                self.experts
            )));
        }
        if self.hidden == 0 {
            return Err(Error::config("adapter hidden size must be at least 1"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::config(format!("eta must be non-negative, got {}", self.eta)));
        }
        let schedule = self.schedule()?;
        if schedule.len() != self.experts {
            return Err(Error::config(format!(
                "schedule lists {} experts, config has {}",
                schedule.len(),
                self.experts
            )));
        }
        schedule.iter().try_for_each(SddSpec::validate)
    }

    pub fn schedule(&self) -> Result<Vec<SddSpec>> {
        match &self.schedule {
            Some(s) => Ok(s.clone()),
            None => default_q_schedule(self.experts),
        }
    }
}

/// Default retention schedule: the first half of the experts keep the
/// largest responses with `q = 1/E, 2/E, ..., 1/2`, the second half mirror
/// the same fractions keeping the smallest responses.
pub fn default_q_schedule(experts: usize) -> Result<Vec<SddSpec>> {
    if experts < 2 || experts % 2 != 0 {
        return Err(Error::config(format!(
            "default schedule needs an even expert count >= 2, got {experts}"
        )));
    }
    let half = experts / 2;
    let qs = (1..=half).map(|i| i as f64 / experts as f64);
    Ok(qs
        .clone()
        .map(|q| SddSpec { q, largest: true })
        .chain(qs.map(|q| SddSpec { q, largest: false }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(e: usize) -> Vec<(f64, bool)> {
        default_q_schedule(e)
            .unwrap()
            .into_iter()
            .map(|s| (s.q, s.largest))
            .collect()
    }

    #[test]
    fn schedule_for_four_experts() {
        assert_eq!(pairs(4), vec![(0.25, true), (0.5, true), (0.25, false), (0.5, false)]);
    }

    #[test]
    fn schedule_for_two_experts() {
        assert_eq!(pairs(2), vec![(0.5, true), (0.5, false)]);
    }

    #[test]
    fn schedule_halves_and_range() {
        for e in [2, 4, 6, 8, 16] {
            let s = default_q_schedule(e).unwrap();
            assert_eq!(s.iter().filter(|x| x.largest).count(), e / 2);
            assert!(s.iter().all(|x| x.q > 0.0 && x.q <= 0.5));
            assert_eq!(s[e / 2 - 1].q, 0.5);
        }
    }

    #[test]
    fn odd_expert_count_rejected() {
        assert!(matches!(default_q_schedule(3), Err(Error::Config(_))));
        assert!(matches!(default_q_schedule(0), Err(Error::Config(_))));
        let cfg = MoaseConfig {
            experts: 5,
            ..MoaseConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
