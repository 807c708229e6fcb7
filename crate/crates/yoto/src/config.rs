//! JSON run and generator configurations. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use yoto_core::model::{AdapterConfig, ModelConfig};
use yoto_core::objective::LossWeights;
use yoto_core::signal::DEFAULT_WINDOW;
use yoto_core::synth::{default_domains, SyntheticDomainSpec};
use yoto_core::train::TrainConfig;

use crate::error::{self, CliError, Result};

/// Environment variable overriding `out_dir`.
pub const OUT_ENV: &str = "YOTO_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub adapter: AdapterConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub domains: Vec<String>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            adapter: AdapterConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            domains: default_domains().into_iter().map(|d| d.name).collect(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses `path`, validates it and applies the `YOTO_OUT` override.
    /// Relative directories are taken relative to the working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = parse_json(path)?;
        if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            cfg.out_dir = PathBuf::from(out);
        }
        cfg.validate().map_err(|e| CliError::config(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> yoto_core::Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.domains.is_empty() {
            return Err(yoto_core::Error::Config("domains must not be empty".into()));
        }
        Ok(())
    }

    /// Training configuration with the run's loss weights and seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            weights: self.weights,
            ..self.train.clone()
        }
    }
}

/// What `synth` generates: one dataset per domain spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub window: usize,
    pub n_per_class: usize,
    pub domains: Vec<SyntheticDomainSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            n_per_class: 64,
            domains: default_domains(),
        }
    }
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SynthConfig = parse_json(path)?;
        cfg.validate().map_err(|e| CliError::config(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> yoto_core::Result<()> {
        if self.domains.is_empty() {
            return Err(yoto_core::Error::Config("no domains to generate".into()));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(yoto_core::Error::Config("domain names must be distinct".into()));
        }
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }
}

/// Reads a single JSON object; syntax and schema errors carry line and column.
pub fn parse_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = error::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::config(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips() {
        let cfg = RunConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"d": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 4}"#).unwrap().seed == 4);
    }

    #[test]
    fn train_config_takes_run_seed_and_weights() {
        let cfg = RunConfig {
            seed: 9,
            weights: LossWeights {
                alpha: 0.5,
                ..Default::default()
            },
            ..Default::default()
        };
        let t = cfg.train_config();
        assert_eq!(t.seed, 9);
        assert_eq!(t.weights.alpha, 0.5);
    }

    #[test]
    fn synth_config_checks_domains() {
        let mut c = SynthConfig::default();
        c.validate().unwrap();
        c.domains[1].name = c.domains[0].name.clone();
        assert!(c.validate().is_err());
    }
}
