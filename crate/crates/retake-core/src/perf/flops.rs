//! Closed-form FLOPs accounting, counting 2 FLOPs per multiply-accumulate.
//!
//! Per layer, prefilling `l_q` new tokens against `l_ctx` cached ones costs
//!
//! ```text
//! p(l_ctx, l_q) = 8·l_q·d²                  QKVO projections
//!              + 4·l_q·(l_ctx + l_q)·d      attention scores + weighted values
//!              + 4·l_q·d·mlp_hidden         MLP up + down projections
//! ```
//!
//! and the final unembedding adds `2·l_q·d·vocab` once. Compressing a chunk of
//! `l_q` tokens in one layer costs
//!
//! ```text
//! c(l_q) = 2·h·l_q²                         head-mean + column reduction
//!        + l_q·ceil(log2(max(l_q, 2)))      top-k selection
//!        + 4·d·l_q                          gather copy bound
//! ```
//!
//! With an even head_dim (so `d ≥ 2h`) the attention term alone gives
//! `p > 4·l_q²·d ≥ 8·h·l_q² > c`, i.e. compression is always cheaper than the
//! prefill it follows; the property tests assert this rather than assume it.

use crate::engine::ModelConfig;

/// Analytic per-task cost model plus a FLOPs→seconds calibration scalar used
/// when simulated timelines should be expressed in time units.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub time_per_flop: f64,
}

impl CostModel {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            layers: cfg.layers,
            heads: cfg.heads,
            hidden: cfg.hidden,
            mlp_hidden: cfg.mlp_hidden(),
            vocab: cfg.vocab,
            time_per_flop: 1.0,
        }
    }

    /// One layer's prefill cost `p(l_ctx, l_q)`.
    pub fn prefill_layer(&self, l_ctx: usize, l_q: usize) -> u64 {
        let d = self.hidden as u64;
        let lq = l_q as u64;
        let ctx = l_ctx as u64 + lq;
        8 * lq * d * d + 4 * lq * ctx * d + 4 * lq * d * self.mlp_hidden as u64
    }

    /// One layer's chunk-compression cost `c(l_q)`.
    pub fn compression_layer(&self, l_q: usize) -> u64 {
        let lq = l_q as u64;
        let log = 64 - u64::max(l_q as u64, 2).next_power_of_two().leading_zeros() as u64 - 1;
        2 * self.heads as u64 * lq * lq + lq * log + 4 * self.hidden as u64 * lq
    }

    pub fn unembed(&self, l_q: usize) -> u64 {
        2 * l_q as u64 * self.hidden as u64 * self.vocab as u64
    }

    /// All layers plus the unembedding.
    pub fn prefill_total(&self, l_ctx: usize, l_q: usize) -> u64 {
        self.layers as u64 * self.prefill_layer(l_ctx, l_q) + self.unembed(l_q)
    }

    /// One greedy decode step against `l_ctx` cached tokens.
    pub fn decode_step(&self, l_ctx: usize) -> u64 {
        self.prefill_total(l_ctx, 1)
    }
}

/// Whole-model prefill cost of `l_q` tokens on top of `l_ctx` cached ones.
pub fn flops_prefill(cfg: &ModelConfig, l_ctx: usize, l_q: usize) -> u64 {
    CostModel::from_config(cfg).prefill_total(l_ctx, l_q)
}
