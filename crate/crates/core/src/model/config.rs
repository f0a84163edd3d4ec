use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy vision-language model.
///
/// Images are `image_channels × image_side × image_side` and are cut into
/// square patches of `patch` pixels, giving `num_patches()` image rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Vision feature width.
    pub d_z: usize,
    /// LLM hidden width, equal to the word-embedding width.
    pub d_h: usize,
    /// Raw image channels.
    pub image_channels: usize,
    pub image_side: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// FFN inner width as a multiple of `d_h`.
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; `vocab_size` comes from the corpus tokenizer.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_z: 32,
            d_h: 64,
            image_channels: 3,
            image_side: 16,
            patch: 4,
            vocab_size,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_seq: 128,
            seed: 0,
        }
    }

    /// Number of image rows `M`.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    /// Values per flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_side, self.image_side]
    }

    pub fn d_ffn(&self) -> usize {
        self.d_h * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_z", self.d_z),
            ("d_h", self.d_h),
            ("image_channels", self.image_channels),
            ("image_side", self.image_side),
            ("patch", self.patch),
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h {} is not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} is not a multiple of patch size {}",
                self.image_side, self.patch
            )));
        }
        if self.num_patches() >= self.max_seq {
            return Err(Error::Config(format!(
                "{} image rows leave no room in a context of {}",
                self.num_patches(),
                self.max_seq
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_has_sixteen_patches() {
        let c = ModelConfig::toy(100);
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.patch_dim(), 48);
    }

    #[test]
    fn rejects_bad_head_split() {
        let mut c = ModelConfig::toy(100);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_heads = 4;
        c.patch = 5;
        assert!(c.validate().is_err());
    }
}
