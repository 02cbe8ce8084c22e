use std::path::Path;

use anyhow::Context;
use facescale::clean::CleaningConfig;
use facescale::cost::FcMemSpec;
use facescale::nas::RewardConfig;
use facescale::synth::SynthTaskSpec;
use facescale::train::{FinetuneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Every section is optional;
/// missing keys take their defaults and unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthTaskSpec,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub cleaning: CleaningConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<FcMemSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardConfig>,
}

/// A configuration file that does not match the schema.
#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads and validates a TOML file. Schema violations come back as
    /// [`SchemaError`] so the caller can report them as usage errors.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = Self::parse(&text).map_err(|e| SchemaError {
            path: path.display().to_string(),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| SchemaError {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> facescale::Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.cleaning.validate()?;
        if let Some(c) = &self.cost {
            c.validate()?;
        }
        if let Some(r) = &self.reward {
            r.validate()?;
        }
        Ok(())
    }

    /// The defaults rendered as TOML, printed as schema help.
    pub fn schema_help() -> String {
        let example = Self {
            cost: Some(FcMemSpec::new(512, 2_000_000, 1, 64)),
            reward: Some(RewardConfig::new(1e8)),
            ..Self::default()
        };
        toml::to_string(&example).expect("default config serializes")
    }
}
