//! Training configuration from a preset, an optional TOML file and command
//! line overrides, applied in that order.
//!
//! The file uses the field names of the training configuration, e.g.
//!
//! ```toml
//! tau = 0.95
//! lr = 0.02
//! lr_schedule = "poly"
//! encoder_widths = [16, 32, 64, 128]
//! ```
//!
//! Keys absent from the file keep the preset's value.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cbff_core::{DecoderVariant, HeadChoice, LrSchedule, TrainConfig};
use clap::{Args, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// ResNet50-width encoder (256/512/1024/2048, 3/4/6/3 blocks).
    Paper,
    /// Widths 16/32/64/128, one block per stage, decoder width 16.
    Toy,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Self::Paper => TrainConfig::default(),
            Self::Toy => TrainConfig::toy(),
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct ConfigArgs {
    /// Base hyperparameters before the config file and flags.
    #[arg(long, value_enum, default_value = "toy")]
    pub preset: Preset,
    /// TOML file of training configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub decoder: Option<DecoderVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Head used for inference maps: avg, conv or trans.
    #[arg(long)]
    pub head: Option<HeadChoice>,
    /// Exclude sub-threshold pixels from the consistency loss.
    #[arg(long)]
    pub mask_low_confidence: bool,
    /// Lift the attention token-count guard.
    #[arg(long)]
    pub allow_large_attention: bool,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        base.insert(k, v);
    }
}

/// Read a configuration file on top of `base`. JSON files written into run
/// directories are accepted too: their `config` object is used.
pub fn layer_file(base: &TrainConfig, path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let cfg = v.get("config").cloned().unwrap_or(v);
        return serde_json::from_value(cfg).map_err(|e| usage(format!("{}: {e}", path.display())));
    }
    let over: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut table = toml::Table::try_from(base).expect("config serializes");
    merge(&mut table, over);
    table
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("{}: {e}", path.display())))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = self.preset.config();
        if let Some(path) = &self.config {
            cfg = layer_file(&cfg, path)?;
        }
        if let Some(v) = self.decoder {
            cfg.decoder = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lr_schedule {
            cfg.lr_schedule = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.head {
            cfg.head_choice = v;
        }
        cfg.mask_low_confidence |= self.mask_low_confidence;
        cfg.allow_large_attention |= self.allow_large_attention;
        if let Err(e) = cfg.validate() {
            bail!(usage(e.to_string()));
        }
        Ok(cfg)
    }
}

/// An invalid argument or configuration value (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> ConfigArgs {
        ConfigArgs {
            preset: Preset::Toy,
            config: None,
            decoder: None,
            seed: None,
            epochs: None,
            batch_size: None,
            lr: None,
            lr_schedule: None,
            tau: None,
            lambda1: None,
            lambda2: None,
            head: None,
            mask_low_confidence: false,
            allow_large_attention: false,
        }
    }

    #[test]
    fn file_keys_override_the_preset_and_flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "tau = 0.9\nepochs = 3\nlr_schedule = \"poly\"\n").unwrap();
        let cfg = ConfigArgs {
            config: Some(path),
            epochs: Some(7),
            ..args()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.tau, 0.9);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr_schedule, LrSchedule::Poly);
        assert_eq!(cfg.encoder_widths, TrainConfig::toy().encoder_widths);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let err = ConfigArgs { tau: Some(1.5), ..args() }.resolve().unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "learning_rate = 0.1\n").unwrap();
        let err = ConfigArgs { config: Some(path), ..args() }.resolve().unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some(), "{err}");
    }
}
