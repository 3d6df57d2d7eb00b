use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_patch_grid, PatchGrid};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    /// Text sequence length `L`, including `[CLS]` and `[SEP]`.
    pub max_text_len: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    /// Attention scale divisor used by the stabilized softmax.
    pub alpha: f64,
    pub rel1d_buckets: usize,
    pub rel1d_max_distance: usize,
    pub rel2d_buckets: usize,
    pub rel2d_max_distance: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    /// Share the MLM output projection with the word embedding table.
    pub tie_mlm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 12 layers, 12 heads, D = 768, 224x224 images with 16x16 patches.
    pub fn base() -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn_inner: 3072,
            max_text_len: 512,
            image_height: 224,
            image_width: 224,
            text_vocab: 50_265,
            image_vocab: 8_000,
            ..Self::desk()
        }
    }

    /// 24 layers, 16 heads, D = 1024.
    pub fn large() -> Self {
        Self { layers: 24, heads: 16, hidden: 1024, ffn_inner: 4096, ..Self::base() }
    }

    /// Small default that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 128,
            ffn_inner: 512,
            max_text_len: 64,
            channels: 3,
            image_height: 64,
            image_width: 64,
            patch_size: 16,
            text_vocab: 1000,
            image_vocab: 512,
            alpha: 32.0,
            rel1d_buckets: 32,
            rel1d_max_distance: 128,
            rel2d_buckets: 64,
            rel2d_max_distance: 1000,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            tie_mlm_head: false,
        }
    }

    /// The configuration used by the finite-difference gradient check.
    pub fn gradcheck() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 8,
            ffn_inner: 16,
            max_text_len: 6,
            channels: 3,
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            text_vocab: 11,
            image_vocab: 8,
            init_std: 0.5,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        make_patch_grid(self.image_height, self.image_width, self.patch_size)
    }

    /// Number of patches `M`.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size.max(1)) * (self.image_width / self.patch_size.max(1))
    }

    /// Flattened patch width `P * P * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.max_text_len + self.num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.max_text_len < 2 {
            return fail(format!("text length {} cannot hold [CLS] and [SEP]", self.max_text_len));
        }
        if self.channels == 0 {
            return fail("channel count must be positive".into());
        }
        self.grid()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.rel1d_buckets < 2 || !self.rel1d_buckets.is_multiple_of(2) || self.rel2d_buckets < 2 || !self.rel2d_buckets.is_multiple_of(2) {
            return fail("relative position bucket counts must be even and at least 2".into());
        }
        if self.rel1d_max_distance == 0 || self.rel2d_max_distance == 0 {
            return fail("relative position max distance must be positive".into());
        }
        if self.text_vocab <= crate::docmodel::NUM_RESERVED as usize {
            return fail(format!("text vocabulary of {} leaves no room for words", self.text_vocab));
        }
        crate::docmodel::codebook_levels(self.image_vocab)?;
        if self.ffn_inner == 0 {
            return fail("ffn width must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::base(), ModelConfig::large(), ModelConfig::desk(), ModelConfig::gradcheck()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::base().num_patches(), 196);
        assert_eq!(ModelConfig::desk().num_patches(), 16);
        assert_eq!(ModelConfig::gradcheck().num_patches(), 4);
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = ModelConfig { heads: 3, ..ModelConfig::desk() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { image_vocab: 500, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
    }
}
