use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeMode, NormalizationSpec, PredictorTrainConfig};
use crate::error::{Error, Result};
use crate::nets::CodecSpec;
use crate::sampler::{AlphaPolicy, ChainConfig};
use crate::stylegan::GanConfig;
use crate::styletx::{AutoencoderConfig, TransferLossConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    /// Style images `K`.
    pub styles: usize,
    /// Content images used to train the codec.
    pub contents: usize,
    /// Labelled images per predictor split.
    pub labeled_per_split: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            styles: 500,
            contents: 300,
            labeled_per_split: 600,
            validation: 200,
            test: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub spec: CodecSpec,
    pub autoencoder: AutoencoderConfig,
    pub transfer: TransferLossConfig,
    /// Self-style stylization of held-out images must beat this PSNR (dB).
    pub psnr_floor: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            spec: CodecSpec::default(),
            autoencoder: AutoencoderConfig::default(),
            transfer: TransferLossConfig::default(),
            psnr_floor: 18.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub normalization: NormalizationSpec,
    /// Strength for the baseline, BAE and the random control.
    pub alpha: f64,
    /// Gaussian prior on the sampled strength.
    pub alpha_prior_mean: f64,
    pub alpha_prior_std: f64,
    pub top_n: Vec<usize>,
    /// Test images whose top stylizations are written as PNG.
    pub png_images: usize,
}

impl EnhanceConfig {
    pub fn for_mode(mode: AttributeMode) -> Self {
        Self {
            normalization: match mode {
                AttributeMode::Regression => NormalizationSpec::sigmoid_power(100.0),
                AttributeMode::Binary => NormalizationSpec::power(10.0),
            },
            alpha: 0.5,
            alpha_prior_mean: 0.5,
            alpha_prior_std: 0.5,
            top_n: vec![1, 5, 10],
            png_images: 8,
        }
    }

    pub fn alpha_policy(&self, adaptive: bool) -> AlphaPolicy {
        if adaptive {
            AlphaPolicy::Sampled {
                prior_mean: self.alpha_prior_mean,
                prior_std: self.alpha_prior_std,
            }
        } else {
            AlphaPolicy::Fixed { alpha: self.alpha }
        }
    }
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self::for_mode(AttributeMode::Regression)
    }
}

/// Everything one experiment needs; read from and written to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub attribute: AttributeMode,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub predictor: PredictorTrainConfig,
    pub gan: GanConfig,
    pub chain: ChainConfig,
    pub enhance: EnhanceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_mode(AttributeMode::Regression)
    }
}

impl ExperimentConfig {
    /// Defaults for one attribute: `tau = 0.1, lambda = 100` with the sigmoid
    /// normalisation for regression, `tau = 0.01, lambda = 10` with the power
    /// normalisation for binary.
    pub fn for_mode(mode: AttributeMode) -> Self {
        let tau = match mode {
            AttributeMode::Regression => 0.1,
            AttributeMode::Binary => 0.01,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            out_dir: PathBuf::from("bae-out"),
            attribute: mode,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            predictor: PredictorTrainConfig::default(),
            gan: GanConfig::default(),
            chain: ChainConfig {
                tau,
                samples: 500,
                adaptive_gradient: true,
                adaptive_lr: true,
                ..Default::default()
            },
            enhance: EnhanceConfig::for_mode(mode),
        }
    }

    /// Smaller networks and shorter schedules that keep a full run within a
    /// few minutes on one core.
    pub fn quick(mode: AttributeMode) -> Self {
        let mut cfg = Self::for_mode(mode);
        cfg.codec.autoencoder.steps = 1200;
        cfg.codec.transfer.steps = 1200;
        cfg.predictor.steps = 1500;
        cfg.gan.iterations = 1500;
        cfg.gan.generator_hidden = vec![128, 256];
        cfg.gan.critic_hidden = vec![128, 128];
        cfg.gan.lr_generator = 5e-4;
        cfg.gan.lr_critic = 5e-4;
        cfg.chain.samples = 100;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        if d.styles == 0 || d.contents == 0 || d.labeled_per_split == 0 || d.test == 0 || d.validation < 2 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if d.image_size != self.codec.spec.image_size || d.image_size != self.predictor.spec.image_size {
            return Err(Error::Config("codec, predictor and data image sizes differ".into()));
        }
        if !(0.0..=1.0).contains(&self.enhance.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.enhance.alpha)));
        }
        if self.enhance.top_n.contains(&0) {
            return Err(Error::Config("top-N values must be positive".into()));
        }
        self.codec.spec.validate()?;
        self.gan.validate()?;
        self.chain.validate()?;
        self.enhance.normalization.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for mode in [AttributeMode::Regression, AttributeMode::Binary] {
            let cfg = ExperimentConfig::quick(mode);
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nmaster_seed = 9\n").unwrap();
        assert_eq!(cfg.master_seed, 9);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn rejects_other_schema_and_unknown_keys() {
        assert!(ExperimentConfig::from_toml("schema_version = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\nbogus = 3\n").is_err());
    }
}
