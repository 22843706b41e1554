//! Detector configuration, read from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::temporal::Pooling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Drop the intra- and inter-modal branches.
    #[serde(default)]
    pub disable_modal: bool,
    /// Replace the convolution stack with identity + pooling.
    #[serde(default)]
    pub disable_temporal: bool,
    /// Use the complete graph instead of TopK.
    #[serde(default)]
    pub disable_topk: bool,
    /// Equal weight for every neighbor instead of learned attention.
    #[serde(default)]
    pub disable_attention: bool,
}

impl Ablation {
    /// Cumulative removal ladder: step 1 drops the modal branches, step 2
    /// also the convolution, step 3 also TopK, step 4 also attention.
    pub fn ladder(step: usize) -> Self {
        Ablation {
            disable_modal: step >= 1,
            disable_temporal: step >= 2,
            disable_topk: step >= 3,
            disable_attention: step >= 4,
        }
    }
}

/// Every key without a `serde(default)` must be present in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub window: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub topk: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub latent_dim: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pot_q: f64,
    pub pot_init_level: f64,
    #[serde(default)]
    pub ablation: Ablation,

    #[serde(default = "defaults::lift_channels")]
    pub lift_channels: usize,
    #[serde(default = "defaults::time_channels")]
    pub time_channels: usize,
    #[serde(default = "defaults::conv_channels")]
    pub conv_channels: usize,
    #[serde(default = "defaults::relation_hidden")]
    pub relation_hidden: usize,
    #[serde(default = "defaults::hidden")]
    pub vae_hidden: usize,
    #[serde(default = "defaults::hidden")]
    pub predictor_hidden: usize,
    #[serde(default = "defaults::train_samples")]
    pub train_samples: usize,
    #[serde(default = "defaults::infer_samples")]
    pub infer_samples: usize,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "defaults::kl_warmup_epochs")]
    pub kl_warmup_epochs: usize,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub pooling: Pooling,
}

mod defaults {
    pub fn lift_channels() -> usize {
        8
    }
    pub fn time_channels() -> usize {
        8
    }
    pub fn conv_channels() -> usize {
        8
    }
    pub fn relation_hidden() -> usize {
        32
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn train_samples() -> usize {
        1
    }
    pub fn infer_samples() -> usize {
        8
    }
    pub fn val_fraction() -> f64 {
        0.1
    }
    pub fn kl_warmup_epochs() -> usize {
        5
    }
    pub fn clip_norm() -> f64 {
        5.0
    }
}

impl Default for Config {
    /// Window 32, 4 heads, kernel 16, embedding 128, γ₁ = 0.5, γ₂ = 0.8,
    /// Adam at 1e-3, batch 32, 60 epochs, K = 15.
    fn default() -> Self {
        Config {
            window: 32,
            stride: 1,
            embed_dim: 128,
            topk: 15,
            heads: 4,
            gat_layers: 1,
            conv_kernel: 16,
            conv_layers: 1,
            latent_dim: 32,
            gamma1: 0.5,
            gamma2: 0.8,
            lr: 1e-3,
            batch: 32,
            epochs: 60,
            seed: 0,
            pot_q: 1e-3,
            pot_init_level: 0.98,
            ablation: Ablation::default(),
            lift_channels: defaults::lift_channels(),
            time_channels: defaults::time_channels(),
            conv_channels: defaults::conv_channels(),
            relation_hidden: defaults::relation_hidden(),
            vae_hidden: defaults::hidden(),
            predictor_hidden: defaults::hidden(),
            train_samples: defaults::train_samples(),
            infer_samples: defaults::infer_samples(),
            val_fraction: defaults::val_fraction(),
            kl_warmup_epochs: defaults::kl_warmup_epochs(),
            clip_norm: defaults::clip_norm(),
            pooling: Pooling::Mean,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.gamma1) {
            return fail(format!("gamma1 = {} outside [0, 1]", self.gamma1));
        }
        if self.gamma2 < 0.0 {
            return fail(format!("gamma2 = {} is negative", self.gamma2));
        }
        if self.epochs == 0 || self.batch == 0 || self.stride == 0 || self.topk == 0 {
            return fail("epochs, batch, stride and topk must be positive".into());
        }
        if self.window < 2 {
            return fail("window must be at least 2".into());
        }
        if self.conv_kernel == 0 || self.conv_kernel > self.window {
            return fail(format!(
                "conv_kernel {} must lie in 1..={}",
                self.conv_kernel, self.window
            ));
        }
        if !(self.pot_q > 0.0 && self.pot_q < self.pot_init_level && self.pot_init_level < 1.0) {
            return fail("need 0 < pot_q < pot_init_level < 1".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return fail("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return fail("val_fraction must lie in (0, 1)".into());
        }
        if self.train_samples == 0 || self.infer_samples == 0 {
            return fail("sample counts must be positive".into());
        }
        Ok(())
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml_string();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(
            (cfg.window, cfg.heads, cfg.conv_kernel, cfg.embed_dim),
            (32, 4, 16, 128)
        );
        assert_eq!(
            (cfg.gamma1, cfg.gamma2, cfg.lr, cfg.batch, cfg.epochs),
            (0.5, 0.8, 1e-3, 32, 60)
        );
    }

    #[test]
    fn missing_key_is_named() {
        let text = Config::default().to_toml_string();
        let without: String = text
            .lines()
            .filter(|l| !l.starts_with("gamma2"))
            .collect::<Vec<_>>()
            .join("\n");
        let err = Config::from_toml_str(&without).unwrap_err().to_string();
        assert!(err.contains("gamma2"), "{err}");
    }

    #[test]
    fn ablation_table_parses() {
        let mut text = Config::default().to_toml_string();
        text = text.replace("disable_modal = false", "disable_modal = true");
        let cfg = Config::from_toml_str(&text).unwrap();
        assert!(cfg.ablation.disable_modal);
        assert!(!cfg.ablation.disable_topk);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = Config {
            gamma1: 1.5,
            ..Config::default()
        };
        assert!(bad.validate().is_err());
        let bad = Config {
            conv_kernel: 40,
            ..Config::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ladder_is_cumulative() {
        assert_eq!(Ablation::ladder(0), Ablation::default());
        let step3 = Ablation::ladder(3);
        assert!(step3.disable_modal && step3.disable_temporal && step3.disable_topk && !step3.disable_attention);
    }
}
