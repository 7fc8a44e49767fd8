use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Downsample factor of each encoder stage relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Architecture hyper-parameters. The parameter count is a pure function
/// of this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channel width of each encoder stage, shared by the matching decoder stage.
    pub widths: [usize; 4],
    /// ConvNeXt blocks per encoder stage.
    pub depths: [usize; 4],
    /// Prompt embedding width D.
    pub embed_dim: usize,
    /// Heads for both self- and cross-attention.
    pub heads: usize,
    /// Length of the 1-D convolution over prompt tokens (odd, same padding).
    pub prompt_kernel: usize,
    /// Channels left after the final 4x sub-pixel upsample.
    pub head_channels: usize,
    /// Attach prompting blocks to the pseudo-supervised decoder as well.
    pub pud_in_pd: bool,
    /// Seed of the hashed token embedding table.
    pub prompt_seed: u64,
    /// Optional file of precomputed prompt embeddings (JSON object
    /// `prompt_text -> [[f64; D]; L]` or `prompt_text -> [f64; D]`).
    pub prompt_embeddings: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [32, 64, 128, 256],
            depths: [1, 1, 1, 1],
            embed_dim: 64,
            heads: 4,
            prompt_kernel: 3,
            head_channels: 8,
            pud_in_pd: true,
            prompt_seed: 0x5eed_0f_7e47,
            prompt_embeddings: None,
        }
    }
}

impl ModelConfig {
    /// Full-width ConvNeXt-Tiny stage layout.
    pub fn convnext_tiny() -> Self {
        Self { widths: [96, 192, 384, 768], depths: [3, 3, 9, 3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_dim == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("widths {:?} must be positive and strictly increasing", self.widths)));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        for &c in &self.widths {
            if c % self.heads != 0 {
                return Err(Error::Config(format!("{} heads do not divide stage width {c}", self.heads)));
            }
        }
        if self.prompt_kernel % 2 == 0 {
            return Err(Error::Config("prompt convolution kernel must be odd".into()));
        }
        Ok(())
    }

    /// Inputs must be divisible by the coarsest stride.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = STAGE_STRIDES[3];
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not a positive multiple of {d}")));
        }
        Ok(())
    }
}
