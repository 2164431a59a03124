use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the vision transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Classifier width; only set for fine-tuning and evaluation.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

fn default_channels() -> usize {
    3
}

impl Default for ViTConfig {
    /// Desk-scale model: 32px images, 4px patches (P = 64), width 64,
    /// four layers, four heads.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: None,
        }
    }
}

impl ViTConfig {
    /// The small model used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return fail("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return fail("depth and mlp_ratio must be positive".into());
        }
        if self.num_classes == Some(0) {
            return fail("num_classes must be positive when set".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens P.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length P + 1.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn with_classes(&self, num_classes: usize) -> Self {
        Self {
            num_classes: Some(num_classes),
            ..self.clone()
        }
    }

    /// Same architecture, ignoring the classifier head.
    pub fn same_backbone(&self, other: &ViTConfig) -> bool {
        self.with_classes(1) == other.with_classes(1)
    }
}
