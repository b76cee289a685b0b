//! TOML run configuration with one section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tlsr_core::evaluation::EvaluationConfig;
use tlsr_core::simulator::SimulationConfig;
use tlsr_core::training::TrainingConfig;
use tlsr_core::transformer::ModelConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and evaluation fractions.
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fractions: [0.6, 0.2, 0.2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    pub repeats: usize,
    /// Subset of `low`, `medium`, `high`.
    pub regimes: Vec<String>,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            regimes: vec!["low".into(), "medium".into(), "high".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the per-section seeds when set.
    pub seed: Option<u64>,
    /// Require a seed and serial execution.
    pub deterministic: bool,
    pub simulation: SimulationConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub reproduce: ReproduceConfig,
}

impl RunConfig {
    /// Reads a TOML file, or the `config` object embedded in a JSON manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("--config: cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("--config: {}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| CliError::Config(format!("--config: {}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("--config: {}: {e}", path.display())))?
        };
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Propagates a master seed into every section.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = Some(s);
            self.simulation.seed = s;
            self.training.seed = s;
            self.evaluation.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.deterministic && self.seed.is_none() {
            return Err(CliError::Config("seed: required when deterministic = true".into()));
        }
        let f = self.split.fractions;
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("split.fractions: must be positive and sum to 1, got {f:?}")));
        }
        self.simulation.validate().map_err(|e| CliError::from_core("simulation", e))?;
        self.model.validate().map_err(|e| CliError::from_core("model", e))?;
        self.training.validate().map_err(|e| CliError::from_core("training", e))?;
        self.evaluation.validate().map_err(|e| CliError::from_core("evaluation", e))?;
        if self.reproduce.repeats == 0 || self.reproduce.repeats > 100 {
            return Err(CliError::Config("reproduce.repeats: must lie in 1..=100".into()));
        }
        for r in &self.reproduce.regimes {
            crate::reproduce::Regime::parse(r)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 9
            [simulation]
            n_patients = 50
            censoring = { kind = "weibull", shape = 2.0, scale = 8000.0 }
            [training]
            epochs = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.simulation.n_patients, 50);
        assert_eq!(cfg.training.epochs, 2);
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_field_is_named() {
        let err = toml::from_str::<RunConfig>("[training]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
    }

    #[test]
    fn deterministic_needs_seed() {
        let cfg = RunConfig {
            deterministic: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
