use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over CSV tokens.
    #[default]
    Mean,
    /// A learned class token prepended to the sequence.
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub channels: usize,
    /// CSV tokens (both hemispheres).
    pub num_tokens: usize,
    pub v_max: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            channels: 2,
            num_tokens: 1284,
            v_max: 69,
            dropout: 0.1,
            pooling: Pooling::Mean,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            channels: 2,
            num_tokens: 5,
            v_max: 4,
            dropout: 0.0,
            pooling: Pooling::Mean,
            rng_seed: 0,
        }
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.v_max
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("channels", self.channels),
            ("num_tokens", self.num_tokens),
            ("v_max", self.v_max),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NnError::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(NnError::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(NnError::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without a validation AUROC gain before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub folds: usize,
    /// Per-channel standardization fitted on each fold's training subjects.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            patience: 15,
            val_fraction: 0.1,
            folds: 4,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::Config("epochs and batch_size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(NnError::Config("need at least two folds".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(NnError::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Config("lr must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig { dim: 10, heads: 4, ..ModelConfig::tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"dim": 16, "depth": 1}"#).unwrap();
        assert_eq!(cfg.dim, 16);
        assert_eq!(cfg.heads, 4);
    }
}
