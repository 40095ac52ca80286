//! The fusion network: shared per-view CNN encoder, learnable `[state]`
//! token and positional embeddings, pre-norm self-attention blocks, a
//! token-wise prediction head, a learnable mask token for missing views,
//! and pixel-cube masking.

mod fusion;
pub mod layers;
mod masking;

pub use fusion::{FusionModel, FusionOutput, TargetMode};
pub use masking::{cube_mask, cube_mask_observation};

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Where a missing view is replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingViewMode {
    /// The view's embedding slot receives the learnable mask token.
    Embedding,
    /// The view is encoded as an all-zero image, like a fully masked view.
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub conv: Vec<ConvSpec>,
    pub missing_view: MissingViewMode,
    pub target: TargetMode,
    /// Per-update rate of the momentum target's moving average.
    pub ema_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            conv: vec![ConvSpec { filters: 32, kernel: 3, stride: 2 }; 3],
            missing_view: MissingViewMode::Embedding,
            target: TargetMode::StopGradient,
            ema_rate: 0.005,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(invalid("model.embed_dim must be a positive multiple of model.heads"));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid("model.mlp_ratio must be positive"));
        }
        if self.conv.iter().any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0) {
            return Err(invalid("model.conv entries need positive filters, kernel and stride"));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(invalid("model.ema_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mask_ratio: f64,
    /// Spatial side of a masking cube, in pixels.
    pub cube_size: usize,
    /// Stacked frames spanned by a cube (clipped to the frame stack).
    pub cube_depth: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.8, cube_size: 12, cube_depth: 3 }
    }
}

impl MaskConfig {
    pub fn validate(&self, view_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid("mask.mask_ratio must lie in [0, 1]"));
        }
        if self.cube_size == 0 || self.cube_size > view_size {
            return Err(invalid(format!("mask.cube_size must lie in [1, {view_size}] (the view size)")));
        }
        if self.cube_depth == 0 {
            return Err(invalid("mask.cube_depth must be positive"));
        }
        Ok(())
    }
}
