//! Miniature vanilla Vision Transformer with per-block gradient gates on
//! the attention branch.

mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{
    attention_forward, bind_params, block_forward, mlp_forward, model_forward, patch_embed,
    patch_pixel_indices, Classifier, ViT,
};
pub use params::{BlockWeights, ModelParams, ViTWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("model.{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::validation(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::validation(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::validation("mlp_ratio must give a positive hidden width"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count J.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).floor() as usize
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Per-block gates on the attention-branch adjoint; `true` lets the
/// gradient through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateVector(Vec<bool>);

impl GateVector {
    pub fn open(depth: usize) -> Self {
        GateVector(vec![true; depth])
    }

    pub fn new(gates: Vec<bool>) -> Self {
        GateVector(gates)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_open(&self, block: usize) -> bool {
        self.0[block]
    }

    pub fn all_open(&self) -> bool {
        self.0.iter().all(|&g| g)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Gate values as 0/1.
    pub fn values(&self) -> Vec<u8> {
        self.0.iter().map(|&g| g as u8).collect()
    }
}
