use std::fmt;
use std::str::FromStr;

use super::CodecError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vit,
    CnnOnly,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vit => "vit",
            Variant::CnnOnly => "cnn-only",
        })
    }
}

impl FromStr for Variant {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "vit" => Ok(Variant::Vit),
            "cnn-only" | "cnn" => Ok(Variant::CnnOnly),
            other => Err(CodecError::Config(format!("unknown codec variant `{other}`"))),
        }
    }
}

/// Network dimensions. Presets: [`CodecConfig::toy`] and [`CodecConfig::full`].
#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch side; also the latent grid stride.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_dim: usize,
    /// Hidden width of the per-patch compression network.
    pub compress_hidden: usize,
    /// Hidden width of the channel-coding network.
    pub cc_hidden: usize,
    pub cc_layers: usize,
    /// Bandwidth compression ratio `1 / bcr_den`.
    pub bcr_den: usize,
    pub variant: Variant,
    /// Channel widths of the stride-2 stages of the CNN-only variant.
    pub cnn_widths: Vec<usize>,
}

impl CodecConfig {
    /// 32×32×3, 8×8 patches, ViT(8, 128, 4, 4).
    pub fn toy() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            embed_dim: 128,
            heads: 4,
            blocks: 4,
            mlp_dim: 256,
            compress_hidden: 64,
            cc_hidden: 64,
            cc_layers: 3,
            bcr_den: 16,
            variant: Variant::Vit,
            cnn_widths: vec![32, 64, 96],
        }
    }

    /// 224×224×3, 16×16 patches, ViT(16, 256, 8, 6).
    pub fn full() -> Self {
        Self {
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            embed_dim: 256,
            heads: 8,
            blocks: 6,
            mlp_dim: 512,
            compress_hidden: 192,
            cc_hidden: 128,
            cc_layers: 3,
            bcr_den: 16,
            variant: Variant::Vit,
            cnn_widths: vec![32, 64, 128, 192],
        }
    }

    pub fn preset(name: &str) -> Result<Self, CodecError> {
        match name.trim() {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(CodecError::Config(format!("unknown codec preset `{other}`"))),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Real levels per patch slot: `2·P²·C / bcr_den`.
    pub fn levels_per_patch(&self) -> usize {
        2 * self.patch_len() / self.bcr_den
    }

    pub fn n_levels(&self) -> usize {
        self.levels_per_patch() * self.n_patches()
    }

    /// Complex channel symbols per image.
    pub fn n_symbols(&self) -> usize {
        self.n_levels() / 2
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let err = |m: String| Err(CodecError::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return err(format!("{}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.channels == 0 || self.bcr_den == 0 || (2 * self.patch_len()) % self.bcr_den != 0 {
            return err(format!("patch of {} values does not split at BCR 1/{}", self.patch_len(), self.bcr_den));
        }
        if self.levels_per_patch() % 2 != 0 {
            return err("odd level count per patch".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.cc_layers < 2 {
            return err("channel-coding CNN needs at least two layers".into());
        }
        if self.variant == Variant::CnnOnly {
            if !self.patch.is_power_of_two() || self.cnn_widths.len() != self.patch.trailing_zeros() as usize {
                return err(format!(
                    "cnn-only needs log2(patch) = {} stride-2 stages, got {}",
                    self.patch.trailing_zeros(),
                    self.cnn_widths.len()
                ));
            }
            if self.cnn_widths.contains(&0) {
                return err("zero cnn width".into());
            }
        }
        Ok(())
    }
}

/// The CNN-only baseline at the same geometry and symbol budget.
pub fn cnn_only_variant(cfg: &CodecConfig) -> CodecConfig {
    cfg.clone().with_variant(Variant::CnnOnly)
}
