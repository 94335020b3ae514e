//! Run configuration: one TOML schema shared by every subcommand, with CLI
//! flags taking precedence over file values. Each command writes its
//! resolved configuration next to its outputs so a run can be reproduced
//! from the snapshot alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::datasets::ToySpec;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Architecture fields exposed to configuration; the class count always
/// comes from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchOverrides {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub prompt_len: usize,
    pub token_dim: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub style_dim: usize,
    pub classifier_hidden: usize,
}

impl Default for ArchOverrides {
    fn default() -> Self {
        let t = ArchConfig::toy(1);
        ArchOverrides {
            input_size: t.input_size,
            channels: t.channels,
            bottleneck_channels: t.bottleneck_channels,
            prompt_len: t.prompt_len,
            token_dim: t.token_dim,
            num_heads: t.num_heads,
            ffn_mult: t.ffn_mult,
            style_dim: t.style_dim,
            classifier_hidden: t.classifier_hidden,
        }
    }
}

impl ArchOverrides {
    pub fn to_arch(&self, num_classes: usize) -> ArchConfig {
        ArchConfig {
            input_size: self.input_size,
            channels: self.channels.clone(),
            bottleneck_channels: self.bottleneck_channels,
            num_classes,
            prompt_len: self.prompt_len,
            token_dim: self.token_dim,
            num_heads: self.num_heads,
            ffn_mult: self.ffn_mult,
            style_dim: self.style_dim,
            classifier_hidden: self.classifier_hidden,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Corruption kind name, or empty for in-distribution evaluation.
    pub corruption: String,
    pub severity: u8,
    pub corruption_seed: u64,
    pub fpr_limit: f64,
    pub smooth_sigma: f64,
    pub heatmaps: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            corruption: String::new(),
            severity: 3,
            corruption_seed: 0,
            fpr_limit: 0.3,
            smooth_sigma: 4.0,
            heatmaps: false,
        }
    }
}

/// The shared configuration file schema.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; commands fold it into their own streams.
    pub seed: u64,
    /// Training preset applied before explicit train overrides.
    pub preset: Option<String>,
    pub toy: ToySpec,
    pub arch: ArchOverrides,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply the preset (component flags + loss weights) when one is set.
    pub fn apply_preset(&mut self) -> Result<()> {
        if let Some(name) = &self.preset {
            let p = TrainConfig::preset(name)?;
            self.train.use_prompts = p.use_prompts;
            self.train.use_adapter = p.use_adapter;
            self.train.weights = p.weights;
        }
        Ok(())
    }

    /// Write the resolved snapshot next to a command's outputs.
    pub fn write_snapshot(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("config.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochz = 5\n").unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("epochz"), "error should name the bad key: {msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn snapshot_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.preset = Some("roads-1".into());
        cfg.apply_preset().unwrap();
        cfg.write_snapshot(dir.path()).unwrap();
        let loaded = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(loaded.seed, 9);
        assert!(!loaded.train.use_prompts);
        assert!(loaded.train.use_adapter);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 5\n[toy]\nn_classes = 6\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.toy.n_classes, 6);
        assert_eq!(cfg.toy.image_size, 32);
        assert_eq!(cfg.train.batch_size, 8);
    }
}
