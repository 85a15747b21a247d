use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamW;
use crate::error::{Result, StpsError};

/// Model variants used to measure the contribution of each component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// The full three-stage model.
    #[default]
    None,
    /// A single stage mapping past sensed flows straight to future unsensed flows.
    OneStep,
    /// Stage 1 then stage 3 with only the spatial branch.
    TwoStep,
    /// Transfer matrices `A + P` with a learnable `n × n` matrix `P`.
    PlainTransfer,
    /// A residual block over the location axis instead of a transfer matrix.
    NoTransfer,
    /// No rank-based node embedding.
    NoRank,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::OneStep,
        Ablation::TwoStep,
        Ablation::PlainTransfer,
        Ablation::NoTransfer,
        Ablation::NoRank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::OneStep => "one-step",
            Ablation::TwoStep => "two-step",
            Ablation::PlainTransfer => "plain-transfer",
            Ablation::NoTransfer => "no-transfer",
            Ablation::NoRank => "no-rank",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = StpsError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                StpsError::invalid(format!(
                    "unknown ablation `{s}` (expected one of none, one-step, two-step, plain-transfer, no-transfer, no-rank)"
                ))
            })
    }
}

/// Training stage. `One` estimates past unsensed flows, `Two` forecasts
/// sensed flows, `Three` aggregates into the unsensed forecast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn number(self) -> usize {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

/// Hyper-parameters and variant selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub l: usize,
    pub l_prime: usize,
    pub d: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs_per_stage: usize,
    pub patience: usize,
    pub ablation: Ablation,
    pub seed: u64,
    /// Stride between consecutive training windows.
    pub window_stride: usize,
    /// Feed ground truth instead of earlier-stage predictions during training.
    pub teacher_forcing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l: 12,
            l_prime: 96,
            d: 64,
            alpha: 0.5,
            dropout: 0.15,
            lr: 1e-3,
            weight_decay: 1e-3,
            batch: 64,
            epochs_per_stage: 50,
            patience: 10,
            ablation: Ablation::None,
            seed: 0,
            window_stride: 1,
            teacher_forcing: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.l_prime == 0 || self.d == 0 {
            return Err(StpsError::invalid("l, l_prime and d must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(StpsError::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(StpsError::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(StpsError::invalid("lr and weight_decay must be finite and >= 0"));
        }
        if self.batch == 0 || self.window_stride == 0 {
            return Err(StpsError::invalid("batch and window_stride must be >= 1"));
        }
        Ok(())
    }

    /// Stages trained, in order.
    pub fn stages(&self) -> &'static [Stage] {
        match self.ablation {
            Ablation::OneStep => &[Stage::One],
            Ablation::TwoStep => &[Stage::One, Stage::Three],
            _ => &[Stage::One, Stage::Two, Stage::Three],
        }
    }

    /// Stage whose output is the final forecast.
    pub fn final_stage(&self) -> Stage {
        *self.stages().last().expect("non-empty")
    }

    /// Blend weight of the spatial branch; 1 when the temporal branch is off.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablation == Ablation::TwoStep {
            1.0
        } else {
            self.alpha
        }
    }

    pub fn use_rank(&self) -> bool {
        self.ablation != Ablation::NoRank
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.l, c.l_prime, c.d, c.batch), (12, 96, 64, 64));
        assert_eq!((c.alpha, c.dropout, c.lr, c.weight_decay), (0.5, 0.15, 1e-3, 1e-3));
        assert_eq!((c.epochs_per_stage, c.patience), (50, 10));
        c.validate().unwrap();
    }

    #[test]
    fn validation() {
        let bad = [
            ModelConfig { alpha: 1.5, ..Default::default() },
            ModelConfig { l: 0, ..Default::default() },
            ModelConfig { dropout: 1.0, ..Default::default() },
            ModelConfig { batch: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn stage_plans() {
        let mut c = ModelConfig::default();
        assert_eq!(c.stages(), &[Stage::One, Stage::Two, Stage::Three]);
        c.ablation = Ablation::OneStep;
        assert_eq!(c.stages(), &[Stage::One]);
        c.ablation = Ablation::TwoStep;
        assert_eq!(c.stages(), &[Stage::One, Stage::Three]);
        assert_eq!(c.effective_alpha(), 1.0);
    }

    #[test]
    fn json_rejects_unknown_keys_and_parses_ablation() {
        let c: ModelConfig = serde_json::from_str(r#"{"d": 8, "ablation": "no-rank"}"#).unwrap();
        assert_eq!(c.d, 8);
        assert_eq!(c.ablation, Ablation::NoRank);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"dd": 8}"#).is_err());
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
    }
}
