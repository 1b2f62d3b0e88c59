use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, SgdConfig};

/// Input resolution: 224×224 for real data, 32×32 for desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageMode {
    Full,
    Test,
}

impl ImageMode {
    pub fn size(self) -> usize {
        match self {
            ImageMode::Full => 224,
            ImageMode::Test => 32,
        }
    }
}

/// Decoder settings that do not depend on the data. Vocabulary size and
/// feature width are filled in from the vocabulary and the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSettings {
    pub hidden_size: usize,
    pub embed_dim: usize,
    pub dropout_p: f64,
    pub max_caption_len: usize,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            hidden_size: 256,
            embed_dim: 256,
            dropout_p: 0.5,
            max_caption_len: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            stage1: 20,
            stage2: 25,
            stage3: 35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageBatchSizes {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

impl Default for StageBatchSizes {
    fn default() -> Self {
        Self {
            stage1: 16,
            stage2: 128,
            stage3: 128,
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderSettings,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub epochs: StageEpochs,
    pub batch_size: StageBatchSizes,
    pub val_fraction: f64,
    pub seed: u64,
    pub image_mode: ImageMode,
    pub vocab_min_freq: usize,
    /// Start the joint stage from fresh weights instead of the stage 2 checkpoint.
    pub from_scratch: bool,
    /// Where the CLI writes artifacts. Not part of checkpoint snapshots.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl RunConfig {
    /// Full-size settings for real 224×224 data.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderSettings::default(),
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            epochs: StageEpochs::default(),
            batch_size: StageBatchSizes::default(),
            val_fraction: 0.2,
            seed: 0,
            image_mode: ImageMode::Full,
            vocab_min_freq: 1,
            from_scratch: false,
            output_dir: None,
        }
    }

    /// 32×32 inputs with a small encoder and decoder.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderSettings {
                hidden_size: 64,
                embed_dim: 32,
                ..DecoderSettings::default()
            },
            image_mode: ImageMode::Test,
            ..Self::full()
        }
    }

    /// Settings that memorise a handful of synthetic images in a few minutes.
    pub fn overfit(seed: u64) -> Self {
        let base = Self::desk();
        Self {
            decoder: DecoderSettings {
                hidden_size: 64,
                embed_dim: 32,
                dropout_p: 0.0,
                max_caption_len: 12,
            },
            adam: AdamConfig {
                lr: 0.003,
                ..AdamConfig::default()
            },
            epochs: StageEpochs {
                stage1: 10,
                stage2: 300,
                stage3: 30,
            },
            batch_size: StageBatchSizes {
                stage1: 4,
                stage2: 4,
                stage3: 4,
            },
            val_fraction: 0.0,
            seed,
            ..base
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.image_mode.size();
        (s, s)
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            hidden_size: self.decoder.hidden_size,
            embed_dim: self.decoder.embed_dim,
            vocab_size,
            feature_dim: self.encoder.feature_dim,
            dropout_p: self.decoder.dropout_p,
            max_caption_len: self.decoder.max_caption_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let s = self.image_mode.size();
        if self.encoder.input_shape != [3, s, s] {
            return Err(Error::config(format!(
                "encoder input_shape {:?} does not match image_mode {:?} ([3, {s}, {s}])",
                self.encoder.input_shape, self.image_mode
            )));
        }
        self.decoder_config(4).validate()?;
        self.sgd.validate()?;
        self.adam.validate()?;
        let b = self.batch_size;
        if b.stage1 == 0 || b.stage2 == 0 || b.stage3 == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.vocab_min_freq == 0 {
            return Err(Error::config("vocab_min_freq must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
