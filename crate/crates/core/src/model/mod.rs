//! Small single-stream diffusion transformer over concatenated
//! `[noise, conditions...]` token sequences.
//!
//! Tokens are linear patch embeddings. Each block applies adaptive layer-norm
//! modulation from the flow time, multi-head self-attention with three-axis
//! rotary embeddings on queries and keys, and a GELU MLP. Only the id-0 block
//! is projected back to patch space; condition tokens take part in attention
//! but produce no output.

mod checkpoint;
mod forward;
mod params;
mod patch;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use forward::{forward, forward_tokens, Tape};
pub(crate) use forward::{silu, silu_grad};
pub use params::{Block, Linear, Lora, ModelParams, LORA_TARGETS};
pub use patch::{patchify, patchify_raw, unpatchify, unpatchify_raw, ModelInput};

use crate::error::{Error, Result};
use crate::posindex::{axis_layout, PositionIndex, DEFAULT_ROPE_BASE};
use crate::tensor::{Mat, Scalar};

/// How images are mapped to the space the transformer works in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Codec {
    /// Patches of raw pixels.
    Pixel,
    /// Fixed 2x average-pool "encoder" with nearest-neighbour "decoder".
    Pool2,
}

impl Codec {
    pub fn name(self) -> &'static str {
        match self {
            Codec::Pixel => "pixel",
            Codec::Pool2 => "pool2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Codec::Pixel),
            "pool2" => Ok(Codec::Pool2),
            other => Err(Error::InvalidArgument(format!("unknown codec {other:?}"))),
        }
    }

    pub fn factor(self) -> usize {
        match self {
            Codec::Pixel => 1,
            Codec::Pool2 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// Channels accepted by the shared patch embedding; narrower inputs are zero-padded.
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub rope_base: f64,
    pub codec: Codec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            in_channels: 6,
            out_channels: 3,
            width: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            time_embed_dim: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            rope_base: DEFAULT_ROPE_BASE,
            codec: Codec::Pixel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.width == 0 || self.depth == 0 || self.heads == 0 {
            return bad("patch_size, width, depth and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        axis_layout(self.head_dim())
            .map_err(|_| Error::InvalidArgument(format!("head dim {} has no rotary layout", self.head_dim())))?;
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        if self.lora_rank > self.width {
            return bad(format!("lora_rank {} exceeds width {}", self.lora_rank, self.width));
        }
        if !(self.lora_alpha > 0.0) {
            return bad(format!("lora_alpha must be positive, got {}", self.lora_alpha));
        }
        if self.in_channels < self.out_channels {
            return bad("in_channels must be at least out_channels".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_in(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn patch_out(&self) -> usize {
        self.patch_size * self.patch_size * self.out_channels
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// Embedded tokens plus their position index.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Mat<T>,
    pub index: PositionIndex,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Mat<T>, index: PositionIndex) -> Result<Self> {
        if tokens.rows != index.len() {
            return Err(Error::Shape(format!("{} tokens but {} index entries", tokens.rows, index.len())));
        }
        Ok(Self { tokens, index })
    }
}

/// Sinusoidal embedding of the flow time (scaled by 1000, cos half first).
pub fn time_embedding<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = T::from_f64(arg.cos());
        out[half + i] = T::from_f64(arg.sin());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 24);
        assert_eq!((cfg.patch_size, cfg.width, cfg.depth, cfg.heads, cfg.lora_rank), (2, 96, 4, 4, 8));
        assert_eq!(cfg.lora_alpha, 16.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = ModelConfig { width: 96, heads: 5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { lora_rank: 200, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { width: 8, heads: 2, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn time_embedding_at_zero() {
        let e: Vec<f64> = time_embedding(0.0, 8);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
