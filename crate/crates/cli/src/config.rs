//! Experiment configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use emde::model::{ModelSpec, TrainConfig, TrainPreset};
use emde::recsys::{Decay, Task};
use emde::Aggregator;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default, rename = "modality")]
    pub modalities: Vec<ModalityConfig>,
    #[serde(default)]
    pub decay: Decay,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub density: Option<DensityConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
}

fn default_split() -> f64 {
    0.8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    /// Embedding table; required unless `random_codes` is set.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// Seeded random codes instead of DLSH (no metric prior).
    #[serde(default)]
    pub random_codes: bool,
    pub depth: usize,
    pub bits: usize,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub event_type: Option<String>,
}

impl ModalityConfig {
    pub fn width(&self) -> usize {
        self.width.unwrap_or(1 << self.bits.min(31))
    }
}

/// `[train]`: an optional preset overridden field by field.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<TrainPreset>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_ks")]
    pub k: Vec<usize>,
    #[serde(default)]
    pub aggregator: Aggregator,
    /// Defaults to on for top-k, off for sessions.
    #[serde(default)]
    pub exclude_seen: Option<bool>,
    /// Name of the modality whose codes define targets (default: first).
    #[serde(default)]
    pub target: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: default_ks(),
            aggregator: Aggregator::Gmean,
            exclude_seen: None,
            target: None,
        }
    }
}

fn default_ks() -> Vec<usize> {
    vec![20]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    /// Data points: an embedding file, or a synthetic Gaussian mixture.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub mixture: Option<MixtureConfig>,
    /// Query points drawn from the mixture, or the first `queries` data rows.
    pub queries: usize,
    pub depths: Vec<usize>,
    pub bits: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub dim: usize,
    pub components: usize,
    pub points: usize,
    pub spread: f64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for m in &self.modalities {
            if !names.insert(&m.name) {
                bail!("duplicate modality name {:?}", m.name);
            }
            if m.embeddings.is_none() && !m.random_codes {
                bail!("modality {:?} needs `embeddings` or `random_codes = true`", m.name);
            }
            if m.depth == 0 || m.bits == 0 {
                bail!("modality {:?}: depth and bits must be >= 1", m.name);
            }
        }
        if let Some(t) = &self.eval.target {
            if !self.modalities.iter().any(|m| &m.name == t) {
                bail!("eval.target {t:?} is not a configured modality");
            }
        }
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            bail!("eval.k must be a non-empty list of positive cutoffs");
        }
        Ok(())
    }

    pub fn target_index(&self) -> usize {
        self.eval
            .target
            .as_ref()
            .and_then(|t| self.modalities.iter().position(|m| &m.name == t))
            .unwrap_or(0)
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().context("config has no [data] section")
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = self.train.preset.unwrap_or(TrainPreset::Retail).train_config();
        if let Some(v) = self.train.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.train.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.train.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.train.gamma {
            c.gamma = v;
        }
        c.seed = self.seed;
        c
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model
            .clone()
            .unwrap_or_else(|| self.train.preset.unwrap_or(TrainPreset::Retail).model_spec())
    }

    pub fn exclude_seen(&self) -> Result<bool> {
        Ok(self.eval.exclude_seen.unwrap_or(self.data()?.task == Task::Topk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(
            r#"
            output_dir = "out"
            [[modality]]
            name = "item"
            embeddings = "e.txt"
            depth = 10
            bits = 4
            "#,
        )
        .unwrap();
        assert_eq!(c.modalities[0].width(), 16);
        assert_eq!(c.eval.k, vec![20]);
        assert_eq!(c.decay, Decay::default());
        assert_eq!(c.train_config().learning_rate, 0.004);
        assert_eq!(c.model_spec().hidden_width, 3000);
    }

    #[test]
    fn preset_then_overrides() {
        let c = parse(
            r#"
            output_dir = "out"
            seed = 3
            [train]
            preset = "rsc15"
            epochs = 2
            "#,
        )
        .unwrap();
        let t = c.train_config();
        assert_eq!((t.epochs, t.batch_size, t.learning_rate, t.seed), (2, 512, 0.0005, 3));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_modalities() {
        assert!(parse("output_dir = 'o'\nbogus = 1\n").is_err());
        assert!(parse("output_dir = 'o'\n[[modality]]\nname='a'\ndepth=1\nbits=1\n").is_err());
        assert!(parse("output_dir = 'o'\n[eval]\ntarget = 'nope'\n").is_err());
    }
}
