//! Conformer encoder with pluggable attention patterns.

mod attention;
mod model;
mod receptive;

pub use attention::{build_attention_mask, AttentionPattern};
pub use model::{
    conformer_forward, stack_frames, ConformerBlock, ConvModule, Encoder, FeedForward, LayerNorm, Linear, SelfAttention,
};
pub use receptive::{receptive_field, receptive_field_for, ReceptiveFieldReport, ENCODER_FRAME_MICROS};

use crate::features::NUM_MELS;

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub attention_heads: usize,
    pub conv_kernel_size: usize,
    pub subsampling_factor: usize,
    pub relative_attention: bool,
    /// Clip distance of the relative-position bias table.
    pub bias_cap: usize,
    pub ff_multiplier: usize,
    pub input_dim: usize,
    /// The depthwise convolution module can be switched off to isolate
    /// attention in receptive-field experiments.
    pub use_conv: bool,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 48,
            attention_heads: 4,
            conv_kernel_size: 5,
            subsampling_factor: 4,
            relative_attention: true,
            bias_cap: 64,
            ff_multiplier: 4,
            input_dim: NUM_MELS,
            use_conv: true,
        }
    }
}

impl ConformerConfig {
    /// Conformer-0.6B layout: 24 layers, 1024 dims, 8 heads, kernel 5.
    pub fn conformer_0_6b() -> Self {
        Self {
            num_layers: 24,
            model_dim: 1024,
            attention_heads: 8,
            bias_cap: 128,
            ..Self::default()
        }
    }

    /// Conformer-2B layout: 32 layers, 1536 dims, 16 heads, kernel 5.
    pub fn conformer_2b() -> Self {
        Self {
            num_layers: 32,
            model_dim: 1536,
            attention_heads: 16,
            bias_cap: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model_dim == 0 || self.attention_heads == 0 || self.model_dim % self.attention_heads != 0 {
            return Err(format!(
                "model_dim {} must be a positive multiple of attention_heads {}",
                self.model_dim, self.attention_heads
            ));
        }
        if self.conv_kernel_size % 2 == 0 {
            return Err(format!("conv_kernel_size {} must be odd", self.conv_kernel_size));
        }
        if self.subsampling_factor == 0 || self.ff_multiplier == 0 {
            return Err("subsampling_factor and ff_multiplier must be positive".into());
        }
        Ok(())
    }

    /// Stacked input width seen by the subsampling stem.
    pub fn stem_input_dim(&self) -> usize {
        self.input_dim * self.subsampling_factor
    }

    /// Parameters of one conformer block.
    pub fn block_param_count(&self) -> usize {
        let d = self.model_dim;
        let h = d * self.ff_multiplier;
        let ln = 2 * d;
        let ff = ln + (d * h + h) + (h * d + d);
        let rel = if self.relative_attention {
            self.attention_heads * (2 * self.bias_cap + 1)
        } else {
            0
        };
        let attn = ln + 4 * (d * d + d) - d + rel;
        let conv = if self.use_conv {
            ln + 2 * (d * d + d) + (self.conv_kernel_size * d + d) + ln + (d * d + d)
        } else {
            0
        };
        2 * ff + attn + conv + ln
    }

    /// Encoder parameters (stem plus blocks), excluding task heads.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        self.stem_input_dim() * d + d + self.num_layers * self.block_param_count()
    }
}
