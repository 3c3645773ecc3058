//! Minimal decoder-only transformer with a per-layer KV cache.
//!
//! The architecture is fixed: pre-norm blocks with RMS normalization, rotary
//! position embeddings on queries and keys, single-group multi-head causal
//! attention without projection biases, a GELU MLP of width
//! `mlp_ratio · hidden`, untied embedding/unembedding. Three entry points
//! cover the inference modes:
//!
//! * [`Model::prefill_full`] — one-shot causal prefill over a whole sequence;
//!   the reference route the chunked path is checked against.
//! * [`Model::prefill_chunk`] — prefill of one chunk on top of (possibly
//!   compressed) cached history; also returns the chunk-internal attention
//!   block used for token-importance scoring.
//! * [`Model::decode_step`] — single-token greedy-decoding step.
//!
//! Retained cache entries keep their original sequence positions after
//! compression, and rotary embeddings always use those original positions.

mod cache;
mod model;
mod weights;

pub use cache::{CacheSet, ChunkKv, LayerKvCache};
pub use model::{argmax, AttnOptions, ChunkOutput, LayerStep, Model};
pub use weights::{init_model, read_weights, write_weights, LayerWeights, ModelWeights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fileio::FormatError;

pub const RTKW_MAGIC: [u8; 4] = *b"RTKW";
pub const RTKW_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence capacity exceeded: need position {needed}, max_positions {max}")]
    Capacity { needed: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("cache position order violated: {0}")]
    PositionOrder(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Numeric precision the engine runs at. Weights are always stored as f32;
/// f64 upcasts at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: f64,
    pub vocab: usize,
    pub max_positions: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.mlp_ratio * self.hidden as f64) as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(EngineError::InvalidConfig(
                "layers, heads and hidden must be positive".into(),
            ));
        }
        if self.hidden % self.heads != 0 {
            return Err(EngineError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(EngineError::InvalidConfig(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(EngineError::InvalidConfig("mlp_ratio must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(EngineError::InvalidConfig(
                "vocab must hold the reserved EOS id plus at least one token".into(),
            ));
        }
        if self.max_positions == 0 {
            return Err(EngineError::InvalidConfig("max_positions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkKind {
    Video,
    Prompt,
}

/// One chunk of the laid-out input sequence (video tokens first, then the
/// prompt), in layout-token coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDesc {
    pub kind: ChunkKind,
    pub token_range: std::ops::Range<usize>,
    /// For video chunks: the covered range of keyframe-list indices.
    pub frame_range: Option<std::ops::Range<usize>>,
}

/// Ordered chunk layout: `ceil(selected_frames / chunk_frames)` video chunks
/// (last one ragged) followed by one prompt chunk when a prompt is present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunks: Vec<ChunkDesc>,
    pub chunk_frames: usize,
}

impl ChunkPlan {
    pub fn build(
        selected_frames: usize,
        tokens_per_frame: usize,
        chunk_frames: usize,
        prompt_len: usize,
    ) -> Self {
        assert!(chunk_frames > 0, "chunk_frames must be positive");
        let mut chunks = Vec::new();
        let mut frame = 0;
        while frame < selected_frames {
            let end = (frame + chunk_frames).min(selected_frames);
            chunks.push(ChunkDesc {
                kind: ChunkKind::Video,
                token_range: frame * tokens_per_frame..end * tokens_per_frame,
                frame_range: Some(frame..end),
            });
            frame = end;
        }
        if prompt_len > 0 {
            let start = selected_frames * tokens_per_frame;
            chunks.push(ChunkDesc {
                kind: ChunkKind::Prompt,
                token_range: start..start + prompt_len,
                frame_range: None,
            });
        }
        ChunkPlan {
            chunks,
            chunk_frames,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.chunks.last().map_or(0, |c| c.token_range.end)
    }

    pub fn video_chunk_count(&self) -> usize {
        self.chunks
            .iter()
            .filter(|c| c.kind == ChunkKind::Video)
            .count()
    }
}
