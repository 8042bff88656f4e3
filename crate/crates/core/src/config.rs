//! Architecture configuration. Everything here is part of a checkpoint's
//! fingerprint: two models with equal configs have identical parameter sets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("embed_dim {dim} is not divisible by {heads} attention heads")]
    Heads { dim: usize, heads: usize },
    #[error("detail branch needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("patch size {0} must be odd and at least 5")]
    Patch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub restormer_blocks: usize,
    pub attention_heads: usize,
    pub lt_blocks: usize,
    pub inn_blocks: usize,
    /// Hidden width of the gated feed-forward as a multiple of `embed_dim`.
    pub ffn_expansion: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 64, restormer_blocks: 4, attention_heads: 4, lt_blocks: 2, inn_blocks: 2, ffn_expansion: 2.0 }
    }
}

impl EncoderConfig {
    pub fn ffn_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.ffn_expansion) as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.embed_dim == 0 {
            return Err(ConfigError::Zero("embed_dim"));
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return Err(ConfigError::Heads { dim: self.embed_dim, heads: self.attention_heads });
        }
        if self.inn_blocks > 0 && self.embed_dim % 2 != 0 {
            return Err(ConfigError::OddChannels(self.embed_dim));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaeConfig {
    /// Channels after the 1×1 reduction of the concatenated base/detail maps.
    pub reduce_dim: usize,
    /// Side of the square window pooled into each node.
    pub patch_size: usize,
    /// Width of the node feature vectors entering the attention stack.
    pub node_dim: usize,
    pub giu_layers: usize,
    pub giu_heads: usize,
    /// Per-head output width; also the width of the refined node features.
    pub head_dim: usize,
    pub attention_slope: f64,
    /// Negative slope of the leaky rectifiers in the patch encoder and the
    /// diffusion block.
    pub conv_slope: f64,
    pub g2s_kernel: usize,
    pub g2s_dilation: usize,
}

impl Default for TaeConfig {
    fn default() -> Self {
        Self {
            reduce_dim: 64,
            patch_size: 21,
            node_dim: 64,
            giu_layers: 2,
            giu_heads: 12,
            head_dim: 64,
            attention_slope: 0.2,
            conv_slope: 0.01,
            g2s_kernel: 7,
            g2s_dilation: 2,
        }
    }
}

impl TaeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("reduce_dim", self.reduce_dim),
            ("node_dim", self.node_dim),
            ("giu_heads", self.giu_heads),
            ("head_dim", self.head_dim),
            ("g2s_kernel", self.g2s_kernel),
            ("g2s_dilation", self.g2s_dilation),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        // two unpadded 3×3 convolutions run inside the window
        if self.patch_size % 2 == 0 || self.patch_size < 5 {
            return Err(ConfigError::Patch(self.patch_size));
        }
        Ok(())
    }

    /// Width of the node features leaving the attention stack.
    pub fn giu_dim(&self) -> usize {
        if self.giu_layers == 0 {
            self.node_dim
        } else {
            self.head_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub restormer_blocks: usize,
    pub attention_heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { restormer_blocks: 4, attention_heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tae: TaeConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Small network that trains in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 16,
                restormer_blocks: 1,
                attention_heads: 2,
                lt_blocks: 1,
                inn_blocks: 1,
                ffn_expansion: 2.0,
            },
            tae: TaeConfig { reduce_dim: 16, node_dim: 16, giu_heads: 4, head_dim: 16, ..TaeConfig::default() },
            decoder: DecoderConfig { restormer_blocks: 1, attention_heads: 2 },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.tae.validate()?;
        let d = self.encoder.embed_dim;
        if self.decoder.attention_heads == 0 || d % self.decoder.attention_heads != 0 {
            return Err(ConfigError::Heads { dim: d, heads: self.decoder.attention_heads });
        }
        Ok(())
    }
}
