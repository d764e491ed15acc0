use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Self-attention over `[image_1 | image_2? | text]`.
    #[default]
    ConcatEncoder,
    /// Text queries cross-attend to image features; output keeps only text
    /// positions.
    EncoderDecoder,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::ConcatEncoder => "concat_encoder",
            FusionKind::EncoderDecoder => "encoder_decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the stride-2 3x3 convolution blocks; the grid is
    /// the image downsampled by `2^blocks` (rounding up).
    pub conv_channels: Vec<usize>,
    pub text_layers: usize,
    pub text_heads: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_decode_len: usize,
    pub text_buckets: usize,
    pub max_distance: usize,
    pub fusion_kind: FusionKind,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            image_height: 32,
            image_width: 32,
            conv_channels: vec![16, 32, 64],
            text_layers: 2,
            text_heads: 4,
            fusion_layers: 2,
            fusion_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            ff_dim: 256,
            vocab_size: 512,
            max_text_len: 32,
            max_decode_len: 24,
            text_buckets: 16,
            max_distance: 32,
            fusion_kind: FusionKind::ConcatEncoder,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn grid_height(&self) -> usize {
        self.conv_channels.iter().fold(self.image_height, |h, _| h.div_ceil(2))
    }

    pub fn grid_width(&self) -> usize {
        self.conv_channels.iter().fold(self.image_width, |w, _| w.div_ceil(2))
    }

    pub fn grid_len(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.d_model == 0 || self.ff_dim == 0 {
            return bad("d_model and ff_dim must be positive".into());
        }
        for (name, heads) in [
            ("text", self.text_heads),
            ("fusion", self.fusion_heads),
            ("decoder", self.decoder_heads),
        ] {
            if heads == 0 || self.d_model % heads != 0 {
                return bad(format!("d_model {} not divisible by {name} heads {heads}", self.d_model));
            }
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive".into());
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image size must be positive".into());
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be at least 1".into());
        }
        if self.vocab_size <= crate::text::SENT_BASE as usize {
            return bad(format!("vocab_size {} leaves no room past the specials", self.vocab_size));
        }
        if self.text_buckets < 4 || self.text_buckets % 2 != 0 || self.max_distance <= self.text_buckets / 2 {
            return bad("text_buckets must be even and >= 4, max_distance above half of it".into());
        }
        if !(self.layernorm_eps > 0.0) {
            return bad("layernorm_eps must be positive".into());
        }
        Ok(())
    }
}
