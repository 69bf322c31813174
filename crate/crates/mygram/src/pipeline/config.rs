//! Training configuration and the flat dotted-key JSON config format.

use serde_json::Value;

use crate::diffusion::DiffusionConfig;
use crate::fusion::WeightMode;
use crate::objective::LossConfig;

use super::PipelineError;

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    pub heads: usize,
    pub ffn_dim: usize,
    pub weight_mode: WeightMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 5,
            ffn_dim: 400,
            weight_mode: WeightMode::Incoming,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Visual width used when the dataset ships no feature file.
    pub visual_dim: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of alignment pairs used as training seeds when the
    /// dataset itself does not fix a split.
    pub train_ratio: f64,
    pub diffusion: DiffusionConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 300,
            epochs: 1000,
            learning_rate: 5e-3,
            visual_dim: 4096,
            batch_size: 512,
            seed: 17,
            train_ratio: 0.3,
            diffusion: DiffusionConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.hidden_dim == 0 || self.hidden_dim % self.fusion.heads != 0 {
            return Err(PipelineError::Config(format!(
                "hidden_dim {} must be a positive multiple of fusion.heads {}",
                self.hidden_dim, self.fusion.heads
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(PipelineError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(PipelineError::Config(
                "batch_size must be at least 2 (in-batch negatives)".into(),
            ));
        }
        if !(0.0 < self.train_ratio && self.train_ratio < 1.0) {
            return Err(PipelineError::Config("train_ratio must lie in (0, 1)".into()));
        }
        if self.fusion.ffn_dim == 0 {
            return Err(PipelineError::Config("fusion.ffn_dim must be positive".into()));
        }
        self.diffusion.validate();
        self.loss.validate();
        Ok(())
    }

    /// Parse the flat JSON config format: one top-level object whose
    /// keys are dotted module paths, e.g. `{"diffusion.alpha": 0.2}`.
    /// Unknown keys are rejected.
    pub fn from_dotted_json(text: &str) -> Result<TrainConfig, PipelineError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| PipelineError::Config(format!("config is not valid JSON: {e}")))?;
        let map = value
            .as_object()
            .ok_or_else(|| PipelineError::Config("config must be a JSON object".into()))?;

        let mut cfg = TrainConfig::default();
        for (key, v) in map {
            match key.as_str() {
                "hidden_dim" => cfg.hidden_dim = as_usize(key, v)?,
                "epochs" => cfg.epochs = as_usize(key, v)?,
                "learning_rate" => cfg.learning_rate = as_f64(key, v)?,
                "visual_dim" => cfg.visual_dim = as_usize(key, v)?,
                "batch_size" => cfg.batch_size = as_usize(key, v)?,
                "seed" => cfg.seed = as_usize(key, v)? as u64,
                "train_ratio" => cfg.train_ratio = as_f64(key, v)?,
                "diffusion.alpha" => cfg.diffusion.alpha = as_f64(key, v)?,
                "diffusion.beta" => cfg.diffusion.beta = as_f64(key, v)?,
                "diffusion.k" => cfg.diffusion.k = as_usize(key, v)?,
                "diffusion.dropout" => cfg.diffusion.dropout = as_f64(key, v)?,
                "fusion.heads" => cfg.fusion.heads = as_usize(key, v)?,
                "fusion.ffn_dim" => cfg.fusion.ffn_dim = as_usize(key, v)?,
                "fusion.weight_mode" => {
                    cfg.fusion.weight_mode = match v.as_str() {
                        Some("incoming") => WeightMode::Incoming,
                        Some("outgoing") => WeightMode::Outgoing,
                        _ => {
                            return Err(PipelineError::Config(format!(
                                "fusion.weight_mode must be \"incoming\" or \"outgoing\", got {v}"
                            )))
                        }
                    }
                }
                "loss.tau" => cfg.loss.tau = as_f64(key, v)?,
                "loss.T" => cfg.loss.temperature = as_f64(key, v)?,
                "loss.lambda" => cfg.loss.lambda = as_f64(key, v)?,
                "loss.topk" => cfg.loss.topk = as_usize(key, v)?,
                "loss.epsilon" => cfg.loss.epsilon = as_f64(key, v)?,
                "gram.normalize" => cfg.loss.gram_normalize = as_bool(key, v)?,
                "infonce.include_positive_in_denominator" => {
                    cfg.loss.include_positive = as_bool(key, v)?
                }
                _ => {
                    return Err(PipelineError::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, PipelineError> {
    v.as_f64()
        .ok_or_else(|| PipelineError::Config(format!("{key} must be a number, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, PipelineError> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| PipelineError::Config(format!("{key} must be a non-negative integer, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, PipelineError> {
    v.as_bool()
        .ok_or_else(|| PipelineError::Config(format!("{key} must be a boolean, got {v}")))
}
