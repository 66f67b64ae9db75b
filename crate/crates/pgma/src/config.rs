//! Run configuration: one TOML file with `[synth]`, `[model]`, `[train]`
//! and `[eval]` tables. Missing keys take their defaults, unknown keys are
//! rejected.

use std::path::Path;

use anyhow::{Context, Result};
use pgma_core::model::ModelConfig;
use pgma_core::synth::SynthConfig;
use pgma_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that overrides the training and evaluation seeds.
pub const SEED_ENV: &str = "PGMA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluation episodes per run.
    pub episodes: u64,
    pub shots: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 500, shots: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The file at `path` if given, else defaults; then the seed override.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.model.heads == 0 || self.model.model_dim % self.model.heads != 0 {
            anyhow::bail!("model.model_dim must be a positive multiple of model.heads");
        }
        if self.eval.shots == 0 {
            anyhow::bail!("eval.shots must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 10\n[synth]\nnovel_fold = 2\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.synth.novel_fold, 2);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nstepz = 10\n").is_err());
        assert!(RunConfig::from_toml("[trian]\n").is_err());
    }

    #[test]
    fn hash_follows_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.steps += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(RunConfig::from_toml(&a.to_toml()).unwrap(), a);
    }
}
