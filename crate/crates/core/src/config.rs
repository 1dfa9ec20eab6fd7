//! Run configuration, persisted as sectioned `key = value` text (TOML).

use crate::data::DegradationConfig;
use crate::enhancer::GuidanceMode;
use crate::error::{Error, Result};
use crate::normalization::IntegrationMode;
use crate::objectives::LossWeights;
use crate::wavelet::DirectionMask;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Floating-point width of every computation; only `64` is available.
    pub precision: u32,
    /// Bit-exact reproducibility; always honoured by the single-threaded engine.
    pub deterministic: bool,
    pub device: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub coop: CoopConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub size: usize,
    pub n_hq: usize,
    pub n_lq: usize,
    pub n_test_hq: usize,
    pub n_test_lq: usize,
    pub degradation: DegradationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cue_width: usize,
    pub gen_width: usize,
    pub dis_width: usize,
    pub seg_width: usize,
    pub guidance: GuidanceMode,
    pub integration: IntegrationMode,
    pub hf_mask: DirectionMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub ssim_weight: f64,
    pub include_lq: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// discriminator update period in steps
    pub alternate_d_every: usize,
    /// let the feature-consistency gradient reach the cue extractor
    pub unfreeze_cue: bool,
    pub flip_augment: bool,
    /// weight of the cue consistency across two guidance images
    pub intervar_weight: f64,
    /// weight of the cue consistency across two flipped views
    pub intravar_weight: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoopConfig {
    pub steps: usize,
    /// learning rate of the segmentation network
    pub lr_downstream: f64,
    pub freeze_downstream: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub radii: Vec<usize>,
    pub threshold: f64,
    /// index into the HQ test images used as guidance for every input;
    /// unset draws one at random per image
    pub guidance_index: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: 64,
            deterministic: true,
            device: std::env::var("CUEGUIDE_DEVICE").unwrap_or_else(|_| "cpu".into()),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            coop: CoopConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            size: 64,
            n_hq: 200,
            n_lq: 200,
            n_test_hq: 20,
            n_test_lq: 50,
            degradation: DegradationConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cue_width: 16,
            gen_width: 16,
            dis_width: 16,
            seg_width: 8,
            guidance: GuidanceMode::HqVector,
            integration: IntegrationMode::AdaLin,
            hf_mask: DirectionMask::ALL,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            batch: 4,
            ssim_weight: 1.0,
            include_lq: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 4,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            weights: LossWeights::default(),
            alternate_d_every: 1,
            unfreeze_cue: false,
            flip_augment: true,
            intervar_weight: 0.0,
            intravar_weight: 0.0,
            log_every: 50,
        }
    }
}

impl Default for CoopConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_downstream: 1e-4,
            freeze_downstream: false,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radii: vec![3, 5, 7, 9],
            threshold: 0.5,
            guidance_index: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.precision != 64 {
            return Err(config_error(format!(
                "precision {} is not supported; computations run in 64-bit",
                self.precision
            )));
        }
        let m = &self.model;
        if [m.cue_width, m.gen_width, m.dis_width, m.seg_width].contains(&0) {
            return Err(config_error("network widths must be positive"));
        }
        if self.data.size < 16 || !self.data.size.is_power_of_two() {
            return Err(config_error("data.size must be a power of two >= 16"));
        }
        self.data.degradation.validate()?;
        if self.pretrain.ssim_weight < 0.0 {
            return Err(config_error("pretrain.ssim_weight must be non-negative"));
        }
        if self.pretrain.batch == 0 || self.train.batch == 0 {
            return Err(config_error("batch sizes must be positive"));
        }
        let t = &self.train;
        t.weights.validate()?;
        if t.alternate_d_every == 0 {
            return Err(config_error("train.alternate_d_every must be at least 1"));
        }
        for (name, v) in [("lr", t.lr), ("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(format!("train.{} must be a non-negative number", name)));
            }
        }
        if t.beta1 >= 1.0 || t.beta2 >= 1.0 {
            return Err(config_error("Adam moments must lie below 1"));
        }
        if !(self.coop.lr_downstream >= 0.0) {
            return Err(config_error("coop.lr_downstream must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(config_error("eval.threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
