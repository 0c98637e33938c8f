//! Model geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitqError};

/// Dimensions of the transformer. `hidden_size` must equal
/// `num_heads * head_dim`, and `num_patches` must match the image/patch
/// geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_size: usize,
    pub num_patches: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.hidden_size,
            self.num_patches,
            self.patch_size,
            self.image_side,
            self.num_classes,
            self.mlp_hidden,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_positive {
            return Err(VitqError::Config("all dimensions must be positive".into()));
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(VitqError::Config(format!(
                "hidden_size {} != num_heads {} * head_dim {}",
                self.hidden_size, self.num_heads, self.head_dim
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(VitqError::Config(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        let per_side = self.image_side / self.patch_size;
        if self.num_patches != per_side * per_side {
            return Err(VitqError::Config(format!(
                "num_patches {} != ({} / {})^2",
                self.num_patches, self.image_side, self.patch_size
            )));
        }
        Ok(())
    }

    /// Flattened patch length: 3 channels x patch_size^2.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches + 1
    }

    /// Desk-scale model used by the bundled pipeline and tests.
    pub fn toy() -> Self {
        ModelConfig {
            num_layers: 3,
            num_heads: 4,
            head_dim: 8,
            hidden_size: 32,
            num_patches: 16,
            patch_size: 8,
            image_side: 32,
            num_classes: 10,
            mlp_hidden: 64,
        }
    }

    /// Smallest geometry used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            hidden_size: 8,
            num_patches: 16,
            patch_size: 8,
            image_side: 32,
            num_classes: 10,
            mlp_hidden: 16,
        }
    }
}
