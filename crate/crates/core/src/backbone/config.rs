use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
    pub expansion_ratio: usize,
    pub se_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initializer {
    /// `N(0, 0.02²)`
    Normal,
    /// `N(0, 2/fan_in)`
    He,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout_p: f64,
    /// Activation of the hidden dense layers.
    pub final_activation: Activation,
    /// Dense layers including the classifier: 2 or 3.
    pub dense_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout_p: 0.4,
            final_activation: Activation::Relu,
            dense_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub attention: AttentionKind,
    /// CBAM reduction ratio; `None` picks 16 for stages of at least 64
    /// channels and 4 below that.
    pub cbam_reduction: Option<usize>,
    /// Self-attention projection width; `None` uses the stage width.
    pub self_attention_dim: Option<usize>,
    /// Kernel extent of the deformable convolution.
    pub deformable_kernel: usize,
    pub head: HeadConfig,
    pub num_classes: usize,
    pub initializer: Initializer,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The toy configuration: stem 8, stages 16×1 (stride 2) and 32×2
    /// (stride 2), CBAM after each stage, 256-unit head.
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            stages: vec![
                StageConfig {
                    channels: 16,
                    blocks: 1,
                    stride: 2,
                    expansion_ratio: 2,
                    se_ratio: 0.25,
                },
                StageConfig {
                    channels: 32,
                    blocks: 2,
                    stride: 2,
                    expansion_ratio: 2,
                    se_ratio: 0.25,
                },
            ],
            attention: AttentionKind::Cbam,
            cbam_reduction: None,
            self_attention_dim: None,
            deformable_kernel: 3,
            head: HeadConfig::default(),
            num_classes: 2,
            initializer: Initializer::He,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return config_err(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            ));
        }
        if self.stem_channels == 0 {
            return config_err("stem_channels must be positive");
        }
        if self.stages.is_empty() {
            return config_err("at least one stage is required");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.blocks == 0 {
                return config_err(format!("stage {i}: channels and blocks must be positive"));
            }
            if s.stride != 1 && s.stride != 2 {
                return config_err(format!(
                    "stage {i}: stride must be 1 or 2, got {}",
                    s.stride
                ));
            }
            if s.expansion_ratio == 0 {
                return config_err(format!("stage {i}: expansion_ratio must be at least 1"));
            }
            if !(s.se_ratio > 0.0 && s.se_ratio <= 1.0) {
                return config_err(format!(
                    "stage {i}: se_ratio must lie in (0, 1], got {}",
                    s.se_ratio
                ));
            }
            if self.attention == AttentionKind::Cbam
                && s.channels % self.reduction_for(s.channels) != 0
            {
                return config_err(format!(
                    "stage {i}: {} channels not divisible by CBAM reduction {}",
                    s.channels,
                    self.reduction_for(s.channels)
                ));
            }
        }
        if self.cbam_reduction == Some(0) {
            return config_err("cbam_reduction must be positive");
        }
        if self.self_attention_dim == Some(0) {
            return config_err("self_attention_dim must be positive");
        }
        if self.deformable_kernel.is_multiple_of(2) {
            return config_err("deformable_kernel must be odd");
        }
        if !(0.0..1.0).contains(&self.head.dropout_p) {
            return config_err(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.head.dropout_p
            ));
        }
        if self.head.dense_layers != 2 && self.head.dense_layers != 3 {
            return config_err(format!(
                "dense_layers must be 2 or 3, got {}",
                self.head.dense_layers
            ));
        }
        if self.head.hidden == 0 {
            return config_err("head.hidden must be positive");
        }
        if self.num_classes != 2 {
            return config_err(format!("num_classes must be 2, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn reduction_for(&self, channels: usize) -> usize {
        self.cbam_reduction
            .unwrap_or(if channels >= 64 { 16 } else { 4 })
    }
}

/// `max(1, round(channels · ratio))`
pub fn se_width(channels: usize, ratio: f64) -> usize {
    ((channels as f64 * ratio).round() as usize).max(1)
}
