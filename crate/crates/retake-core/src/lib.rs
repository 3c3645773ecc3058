//! Long-video compression pipeline over a small seeded decoder-only
//! transformer.
//!
//! The pipeline has four stages:
//!
//! 1. [`dpselect`] — keyframe selection at inter-frame cosine-distance peaks,
//!    producing compressed frame features and a pivot-token mask.
//! 2. [`engine`] — chunked prefill of the selected video tokens plus a prompt,
//!    exposing per-chunk attention maps.
//! 3. [`pivotkv`] — per-chunk KV-cache compression that always retains pivot
//!    tokens and keeps the highest attention-receiving non-pivot tokens.
//! 4. Greedy decoding from the compressed cache ([`orchestrator`]).
//!
//! [`featio`] generates and persists synthetic scene-structured feature
//! tensors with known ground-truth boundaries; [`perf`] holds the analytic
//! FLOPs model, the prefill/compression overlap scheduler, and the pipelined
//! executor.
//!
//! With the default `parallel` feature the dense kernels fan out over rayon.
//! Parallel and sequential builds produce bit-identical results: work is only
//! ever split across independent output rows, never across a reduction.

pub mod dpselect;
pub mod engine;
pub mod featio;
pub mod fileio;
pub mod linalg;
pub mod orchestrator;
pub mod perf;
pub mod pivotkv;
pub mod rng;
pub mod scalar;

pub use scalar::Scalar;

/// Schema version stamped into every serialized report, timeline and CSV.
pub const SCHEMA_VERSION: u32 = 1;
