use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use csvit_core::PartitionConfig;
use csvit_nn::{ModelConfig, SynthSpec, TrainConfig};

use crate::{CliError, CliResult};

/// Everything tunable from a config file. Paths and sizes come from flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fragments smaller than this fraction of their ROI are relabeled.
    pub fragment_threshold: f64,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fragment_threshold: 0.10,
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if !(cfg.fragment_threshold > 0.0 && cfg.fragment_threshold < 1.0) {
            return Err(CliError::Usage(format!(
                "fragment_threshold {} outside (0, 1)",
                cfg.fragment_threshold
            )));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"model": {"dim": 16}}"#).unwrap();
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.model.depth, ModelConfig::default().depth);
        assert_eq!(cfg.fragment_threshold, 0.10);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }
}
