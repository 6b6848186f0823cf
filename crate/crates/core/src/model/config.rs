use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids of the text vocabulary.
pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

/// Shape hyper-parameters of the toy MM-DiT.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub seed: u64,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    /// L=8, H=4, d=64, 32×32 RGB images with 2×2 patches, 16 text tokens, vocabulary of 64.
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            num_heads: 4,
            model_dim: 64,
            head_dim: 16,
            grid_h: 16,
            grid_w: 16,
            text_len: 16,
            vocab_size: 64,
            patch_size: 2,
            image_channels: 3,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("patch_size", self.patch_size),
            ("image_channels", self.image_channels),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.text_len < 3 {
            return Err(Error::Config(format!(
                "text_len {} leaves no room for <sos>, <eos> and a content token",
                self.text_len
            )));
        }
        if self.vocab_size <= PAD {
            return Err(Error::Config("vocab_size must include the reserved tokens".into()));
        }
        Ok(())
    }

    /// Number of image tokens.
    pub fn hw(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Image tokens followed by text tokens.
    pub fn seq_len(&self) -> usize {
        self.hw() + self.text_len
    }

    pub fn image_h(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn image_w(&self) -> usize {
        self.grid_w * self.patch_size
    }

    /// Values per patch token (`p · p · C`).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    /// Prompt used for the unconditional branch: `<sos> <eos> <pad> …`.
    pub fn null_prompt(&self) -> Vec<usize> {
        let mut ids = vec![PAD; self.text_len];
        ids[0] = SOS;
        ids[1] = EOS;
        ids
    }
}
