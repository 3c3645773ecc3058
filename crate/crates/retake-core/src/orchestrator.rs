//! End-to-end pipeline: keyframe selection, video/prompt chunk layout, the
//! prefill-compress loop, greedy decoding, and the per-video compression
//! budget planner.
//!
//! Layout order is video chunks (each `chunk_frames` keyframes, last ragged)
//! followed by one uncompressed prompt chunk. The ragged tail chunk is
//! compressed with the same `alpha_kv` against its own length. Token id 0 is
//! the reserved EOS id.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpselect::{self, frame_budget, DpError, KeyframeSelection};
use crate::engine::{
    argmax, init_model, AttnOptions, CacheSet, ChunkDesc, ChunkKind, ChunkPlan, EngineError,
    Model, ModelWeights, Precision,
};
use crate::featio::{FeatError, FrameFeatures};
use crate::perf::{schedule, CostModel, ScheduleMode, TaskCosts};
use crate::pivotkv::{self, PivotKvError};
use crate::scalar::Scalar;
use crate::SCHEMA_VERSION;

/// Reserved end-of-sequence token id.
pub const EOS_TOKEN: usize = 0;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("budget infeasible: prompt of {l_prompt} tokens leaves no room under max context {l_max}")]
    BudgetInfeasible { l_prompt: usize, l_max: usize },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("feature dim {feat} does not match model hidden size {hidden}")]
    DimMismatch { feat: usize, hidden: usize },
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("overlap pipeline failed: {0}")]
    Pipeline(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    DpSelect(#[from] DpError),
    #[error(transparent)]
    PivotKv(#[from] PivotKvError),
    #[error(transparent)]
    Features(#[from] FeatError),
}

/// Run configuration; all fields have defaults so partial config files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetakeConfig {
    pub alpha_dp: f64,
    pub alpha_kv: f64,
    pub chunk_frames: usize,
    pub window: usize,
    pub max_context: usize,
    pub ratio_target: f64,
    pub max_new_tokens: usize,
    pub auto_budget: bool,
    /// Score against re-normalized chunk attention rows instead of the raw
    /// softmax sub-block.
    pub renormalize_chunk_attention: bool,
    /// Divide importance scores by each key's visible-query count.
    pub normalize_scores_by_query_count: bool,
}

impl Default for RetakeConfig {
    fn default() -> Self {
        Self {
            alpha_dp: 1.0,
            alpha_kv: 1.0,
            chunk_frames: 16,
            window: 3,
            max_context: 32_000,
            ratio_target: 2.5,
            max_new_tokens: 32,
            auto_budget: false,
            renormalize_chunk_attention: false,
            normalize_scores_by_query_count: false,
        }
    }
}

impl RetakeConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let alpha_ok = |a: f64| a > 0.0 && a <= 1.0;
        if !alpha_ok(self.alpha_dp) {
            return Err(RunError::InvalidConfig(format!(
                "alpha_dp must be in (0,1], got {}",
                self.alpha_dp
            )));
        }
        if !alpha_ok(self.alpha_kv) {
            return Err(RunError::InvalidConfig(format!(
                "alpha_kv must be in (0,1], got {}",
                self.alpha_kv
            )));
        }
        if self.chunk_frames == 0 {
            return Err(RunError::InvalidConfig("chunk_frames must be positive".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(RunError::InvalidConfig(format!(
                "window must be odd and positive, got {}",
                self.window
            )));
        }
        if !(self.ratio_target.is_finite() && self.ratio_target > 0.0) {
            return Err(RunError::InvalidConfig("ratio_target must be positive".into()));
        }
        if self.max_context == 0 || self.max_new_tokens == 0 {
            return Err(RunError::InvalidConfig(
                "max_context and max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub prefill: u64,
    pub compression: u64,
    pub decode: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Wall-clock time to the first output token, including all compression.
    pub measured_ttft_ns: u64,
    /// Median-free single-run decode time per generated token.
    pub measured_tpot_ns: Option<u64>,
    /// Critical-path prefill+compression cost in FLOPs units.
    pub simulated_ttft_flops: f64,
    /// Cost of one decode step against the final context, FLOPs units.
    pub simulated_tpot_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub output_tokens: Vec<usize>,
    pub per_chunk_cache_len: Vec<usize>,
    pub final_context_len: usize,
    pub alpha_dp: f64,
    pub alpha_kv: f64,
    pub chunk_frames: usize,
    pub keyframes: Vec<usize>,
    pub pivots: Vec<usize>,
    pub flops: FlopsReport,
    pub timing: TimingReport,
}

impl RunReport {
    /// Copy with wall-clock fields zeroed; everything else is deterministic.
    pub fn without_wall_clock(&self) -> RunReport {
        let mut r = self.clone();
        r.timing.measured_ttft_ns = 0;
        r.timing.measured_tpot_ns = None;
        r
    }
}

/// Splits a total retained fraction into `(alpha_dp, alpha_kv)` targeting
/// `alpha_dp / alpha_kv = ratio`, clipping `alpha_dp` first (frames are the
/// coarser knob) and pushing the residual to the other factor.
fn split_total_alpha(total: f64, ratio: f64) -> (f64, f64) {
    let alpha_dp = (ratio * total).sqrt().min(1.0);
    let alpha_kv = total / alpha_dp;
    if alpha_kv > 1.0 {
        (total, 1.0)
    } else {
        (alpha_dp, alpha_kv)
    }
}

/// Closed-form budget split: retain at most `l_max - l_prompt` video tokens
/// out of `t·n`, favoring `alpha_dp/alpha_kv ≈ ratio`.
pub fn plan_budget(
    t: usize,
    n: usize,
    l_prompt: usize,
    l_max: usize,
    ratio: f64,
) -> Result<(f64, f64), RunError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(RunError::InvalidConfig(format!(
            "ratio_target must be positive, got {ratio}"
        )));
    }
    if l_max <= l_prompt {
        return Err(RunError::BudgetInfeasible { l_prompt, l_max });
    }
    let total_tokens = t * n;
    if total_tokens + l_prompt <= l_max {
        return Ok((1.0, 1.0));
    }
    let alpha_total = (l_max - l_prompt) as f64 / total_tokens as f64;
    Ok(split_total_alpha(alpha_total, ratio))
}

/// Exact post-prefill context length the pipeline will produce for these
/// parameters: per-chunk retention is `max(1, floor(alpha_kv · l_q))`, the
/// prompt is kept whole.
pub fn planned_context_len(
    t: usize,
    n: usize,
    l_prompt: usize,
    alpha_dp: f64,
    alpha_kv: f64,
    chunk_frames: usize,
) -> usize {
    let k = frame_budget(alpha_dp, t);
    let plan = ChunkPlan::build(k, n, chunk_frames, l_prompt);
    plan.chunks
        .iter()
        .map(|c| match c.kind {
            ChunkKind::Video => pivotkv::retention_budget(alpha_kv, c.token_range.len()),
            ChunkKind::Prompt => c.token_range.len(),
        })
        .sum()
}

/// Budget planning with the floor/minimum-retention rules folded in: the
/// closed form can overshoot when `max(1, ·)` floors kick in on tiny budgets,
/// so the realized context length is re-checked and `alpha_kv` (and if needed
/// the frame count) is walked down until it fits.
pub fn auto_plan(
    t: usize,
    n: usize,
    l_prompt: usize,
    l_max: usize,
    ratio: f64,
    chunk_frames: usize,
) -> Result<(f64, f64), RunError> {
    let (mut alpha_dp, mut alpha_kv) = plan_budget(t, n, l_prompt, l_max, ratio)?;
    let budget = l_max - l_prompt;

    // Every chunk retains at least one token, so cap the chunk count first.
    let mut k = frame_budget(alpha_dp, t);
    if k.div_ceil(chunk_frames) > budget {
        k = budget.saturating_mul(chunk_frames).min(k).max(1);
        alpha_dp = if k >= t { 1.0 } else { (k as f64 + 0.5) / t as f64 };
        debug_assert_eq!(frame_budget(alpha_dp, t), k);
    }

    let fits = |a_kv: f64| {
        planned_context_len(t, n, l_prompt, alpha_dp, a_kv, chunk_frames) <= l_max
    };
    if !fits(alpha_kv) {
        // Retention is monotone in alpha_kv and feasible at the bottom
        // (one token per chunk); bisect for the largest fitting value.
        let mut lo = 1e-12;
        let mut hi = alpha_kv;
        debug_assert!(fits(lo));
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        alpha_kv = lo;
    }
    Ok((alpha_dp, alpha_kv))
}

/// Per-(chunk, layer) cost table for the realized layout, plus planned context
/// length and FLOPs totals. Simulated timelines cover layer tasks only; each
/// chunk's tail unembedding is accounted in the FLOPs totals.
pub(crate) fn planned_costs(
    plan: &ChunkPlan,
    alpha_kv: f64,
    cost: &CostModel,
) -> (TaskCosts, usize, u64, u64) {
    let mut costs = TaskCosts::new(plan.chunks.len(), cost.layers);
    let mut ctx = 0usize;
    let mut prefill_flops = 0u64;
    let mut compression_flops = 0u64;
    for (i, chunk) in plan.chunks.iter().enumerate() {
        let l_q = chunk.token_range.len();
        for layer in 0..cost.layers {
            costs.set_prefill(i, layer, cost.prefill_layer(ctx, l_q));
            if chunk.kind == ChunkKind::Video {
                costs.set_compress(i, layer, cost.compression_layer(l_q));
            }
        }
        prefill_flops += cost.layers as u64 * cost.prefill_layer(ctx, l_q) + cost.unembed(1);
        match chunk.kind {
            ChunkKind::Video => {
                compression_flops += cost.layers as u64 * cost.compression_layer(l_q);
                ctx += pivotkv::retention_budget(alpha_kv, l_q);
            }
            ChunkKind::Prompt => ctx += l_q,
        }
    }
    (costs, ctx, prefill_flops, compression_flops)
}

/// Everything both executors (sequential and overlapped) need, prepared once.
pub(crate) struct PreparedRun<F: Scalar> {
    pub model: Model<F>,
    pub selection: KeyframeSelection,
    pub plan: ChunkPlan,
    pub alpha_dp: f64,
    pub alpha_kv: f64,
    pub attn_opts: AttnOptions,
    pub normalize_scores: bool,
    pub max_new_tokens: usize,
    pub cost: CostModel,
}

impl<F: Scalar> PreparedRun<F> {
    pub fn new(
        features: &FrameFeatures,
        prompt_ids: &[usize],
        cfg: &RetakeConfig,
        weights: &ModelWeights,
    ) -> Result<Self, RunError> {
        cfg.validate()?;
        features.validate()?;
        if prompt_ids.is_empty() {
            return Err(RunError::EmptyPrompt);
        }
        if features.dim != weights.config.hidden {
            return Err(RunError::DimMismatch {
                feat: features.dim,
                hidden: weights.config.hidden,
            });
        }
        let (alpha_dp, alpha_kv) = if cfg.auto_budget {
            auto_plan(
                features.frame_count,
                features.tokens_per_frame,
                prompt_ids.len(),
                cfg.max_context,
                cfg.ratio_target,
                cfg.chunk_frames,
            )?
        } else {
            (cfg.alpha_dp, cfg.alpha_kv)
        };
        let selection = dpselect::dpselect(features, alpha_dp, cfg.window)?;
        let plan = ChunkPlan::build(
            selection.keyframes.len(),
            features.tokens_per_frame,
            cfg.chunk_frames,
            prompt_ids.len(),
        );
        if let Some(&bad) = prompt_ids.iter().find(|id| **id >= weights.config.vocab) {
            return Err(EngineError::TokenOutOfRange {
                id: bad,
                vocab: weights.config.vocab,
            }
            .into());
        }
        let model = Model::<F>::new(weights)?;
        let cost = CostModel::from_config(&weights.config);
        Ok(Self {
            model,
            selection,
            plan,
            alpha_dp,
            alpha_kv,
            attn_opts: AttnOptions {
                renormalize_block: cfg.renormalize_chunk_attention,
                keep_full_attention: false,
            },
            normalize_scores: cfg.normalize_scores_by_query_count,
            max_new_tokens: cfg.max_new_tokens,
            cost,
        })
    }

    /// Embeddings for one chunk of the layout.
    pub fn chunk_embeddings(
        &self,
        desc: &ChunkDesc,
        prompt_embeddings: &[F],
    ) -> Vec<F> {
        match desc.kind {
            ChunkKind::Video => {
                let d = self.selection.dim;
                self.selection.compressed[desc.token_range.start * d..desc.token_range.end * d]
                    .iter()
                    .map(|v| F::from_f32(*v))
                    .collect()
            }
            ChunkKind::Prompt => prompt_embeddings.to_vec(),
        }
    }

    /// The pivot-mask slice for a video chunk.
    pub fn pivot_slice(&self, desc: &ChunkDesc) -> &[bool] {
        &self.selection.pivot_mask[desc.token_range.start..desc.token_range.end]
    }

    /// Importance scores for every layer of a prefilled chunk.
    pub fn layer_scores(&self, attention: &[Vec<F>], l_q: usize) -> Vec<Vec<F>> {
        attention
            .iter()
            .map(|block| {
                let mut s = pivotkv::importance_scores(block, self.model.config().heads, l_q);
                if self.normalize_scores {
                    pivotkv::normalize_by_query_count(&mut s);
                }
                s
            })
            .collect()
    }
}

/// Greedy decode from prefilled caches. Returns generated tokens (EOS not
/// included) and the decode-loop FLOPs; the first token comes from the prompt
/// tail logits.
pub(crate) fn greedy_decode<F: Scalar>(
    model: &Model<F>,
    caches: &mut CacheSet<F>,
    tail_logits: &[F],
    max_new_tokens: usize,
    cost: &CostModel,
) -> Result<(Vec<usize>, u64, usize), RunError> {
    let mut tokens = Vec::new();
    let mut flops = 0u64;
    let mut steps = 0usize;
    let mut token = argmax(tail_logits);
    while token != EOS_TOKEN && tokens.len() < max_new_tokens {
        tokens.push(token);
        if tokens.len() == max_new_tokens {
            break;
        }
        let emb = model.embed_token(token)?;
        flops += cost.decode_step(caches.context_len());
        let logits = model.decode_step(caches, &emb)?;
        steps += 1;
        token = argmax(&logits);
    }
    Ok((tokens, flops, steps))
}

/// Runs the full pipeline sequentially and reports what happened.
pub fn run_retake(
    features: &FrameFeatures,
    prompt_ids: &[usize],
    cfg: &RetakeConfig,
    weights: &ModelWeights,
) -> Result<RunReport, RunError> {
    match weights.config.precision {
        Precision::F32 => run_impl::<f32>(features, prompt_ids, cfg, weights),
        Precision::F64 => run_impl::<f64>(features, prompt_ids, cfg, weights),
    }
}

fn run_impl<F: Scalar>(
    features: &FrameFeatures,
    prompt_ids: &[usize],
    cfg: &RetakeConfig,
    weights: &ModelWeights,
) -> Result<RunReport, RunError> {
    let started = Instant::now();
    let prep = PreparedRun::<F>::new(features, prompt_ids, cfg, weights)?;
    let prompt_embeddings = prep.model.embed_tokens(prompt_ids)?;

    let mut caches = prep.model.empty_cache();
    let mut per_chunk_cache_len = Vec::with_capacity(prep.plan.chunks.len());
    let mut tail_logits = Vec::new();
    for desc in &prep.plan.chunks {
        let emb = prep.chunk_embeddings(desc, &prompt_embeddings);
        let out = prep.model.prefill_chunk(&emb, &caches, &prep.attn_opts)?;
        match desc.kind {
            ChunkKind::Video => {
                let scores = prep.layer_scores(&out.attention, out.chunk_len);
                let comp = pivotkv::compress_chunk(
                    &out.layer_kv,
                    scores,
                    prep.pivot_slice(desc),
                    prep.alpha_kv,
                )?;
                pivotkv::update_cache(&mut caches, &comp)?;
            }
            ChunkKind::Prompt => caches.append_chunk(&out.layer_kv)?,
        }
        per_chunk_cache_len.push(caches.context_len());
        tail_logits = out.tail_logits;
    }
    let final_context_len = caches.context_len();
    let measured_ttft_ns = started.elapsed().as_nanos() as u64;

    let decode_started = Instant::now();
    let (output_tokens, decode_flops, steps) = greedy_decode(
        &prep.model,
        &mut caches,
        &tail_logits,
        prep.max_new_tokens,
        &prep.cost,
    )?;
    let decode_ns = decode_started.elapsed().as_nanos() as u64;
    let measured_tpot_ns = (steps > 0).then(|| decode_ns / steps as u64);

    let (task_costs, planned_ctx, prefill_flops, compression_flops) =
        planned_costs(&prep.plan, prep.alpha_kv, &prep.cost);
    debug_assert_eq!(planned_ctx, final_context_len);
    let sim = schedule(&task_costs, ScheduleMode::Sequential);

    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        output_tokens,
        per_chunk_cache_len,
        final_context_len,
        alpha_dp: prep.alpha_dp,
        alpha_kv: prep.alpha_kv,
        chunk_frames: cfg.chunk_frames,
        keyframes: prep.selection.keyframes.clone(),
        pivots: prep.selection.pivots.clone(),
        flops: FlopsReport {
            prefill: prefill_flops,
            compression: compression_flops,
            decode: decode_flops,
            total: prefill_flops + compression_flops + decode_flops,
        },
        timing: TimingReport {
            measured_ttft_ns,
            measured_tpot_ns,
            simulated_ttft_flops: sim.ttft,
            simulated_tpot_flops: prep.cost.decode_step(final_context_len) as f64,
        },
    })
}

/// One row of the fixed-total-compression sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub ratio: f64,
    pub alpha_dp: f64,
    pub alpha_kv: f64,
    pub context_len: usize,
    pub prefill_flops: u64,
    pub sim_ttft_flops: f64,
}

/// Fixes `alpha_dp · alpha_kv = total_alpha` and sweeps the ratio grid,
/// reporting analytic context lengths, FLOPs and simulated overlapped TTFT.
pub fn sweep_protocol(
    t: usize,
    n: usize,
    prompt_len: usize,
    total_alpha: f64,
    ratio_grid: &[f64],
    model_cfg: &crate::engine::ModelConfig,
    chunk_frames: usize,
) -> Result<Vec<SweepRow>, RunError> {
    if !(total_alpha > 0.0 && total_alpha <= 1.0) {
        return Err(RunError::InvalidConfig(format!(
            "total_alpha must be in (0,1], got {total_alpha}"
        )));
    }
    if ratio_grid.is_empty() {
        return Err(RunError::InvalidConfig("ratio grid is empty".into()));
    }
    if t == 0 || n == 0 || chunk_frames == 0 {
        return Err(RunError::InvalidConfig(
            "frames, tokens per frame and chunk_frames must be positive".into(),
        ));
    }
    model_cfg.validate()?;
    let cost = CostModel::from_config(model_cfg);
    let mut rows = Vec::with_capacity(ratio_grid.len());
    for &ratio in ratio_grid {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(RunError::InvalidConfig(format!(
                "ratio values must be positive, got {ratio}"
            )));
        }
        let (alpha_dp, alpha_kv) = split_total_alpha(total_alpha, ratio);
        let k = frame_budget(alpha_dp, t);
        let plan = ChunkPlan::build(k, n, chunk_frames, prompt_len);
        let (task_costs, context_len, prefill_flops, _) = planned_costs(&plan, alpha_kv, &cost);
        let sim = schedule(&task_costs, ScheduleMode::Overlapped);
        rows.push(SweepRow {
            schema_version: SCHEMA_VERSION,
            ratio,
            alpha_dp,
            alpha_kv,
            context_len,
            prefill_flops,
            sim_ttft_flops: sim.ttft,
        });
    }
    Ok(rows)
}

/// Deterministic synthetic prompt: ids drawn from the non-EOS vocabulary.
pub fn synthetic_prompt(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed ^ 0x70726f6d7074); // "prompt"
    (0..len).map(|_| rng.gen_range(1..vocab)).collect()
}

/// Convenience used by tests and the CLI: seeded weights for a config.
pub fn build_weights(cfg: &crate::engine::ModelConfig) -> Result<ModelWeights, RunError> {
    Ok(init_model(cfg)?)
}
