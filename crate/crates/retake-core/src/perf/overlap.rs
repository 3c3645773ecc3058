//! Pipelined execution: compression of layer `l` runs on a second worker
//! while the prefill worker moves on to layer `l+1` of the same chunk.
//!
//! The two workers exchange layer caches over per-layer channels. The prefill
//! worker reads a layer's cache (final through the previous chunk), runs the
//! layer, and hands the cache plus the fresh chunk KV and attention block to
//! the compression worker; that worker appends the compressed (or, for the
//! prompt, complete) rows and sends the cache back for the next chunk. Both
//! workers process tasks in chunk-major, layer-minor order — exactly the
//! dependency discipline the simulated scheduler models.
//!
//! Compression is a pure function of tensors that are final before it starts,
//! so overlapped output is bit-identical to sequential execution; only the
//! measured timeline differs.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Instant;

use crate::engine::{CacheSet, ChunkKind, ChunkKv, LayerKvCache, ModelWeights, Precision};
use crate::featio::FrameFeatures;
use crate::orchestrator::{
    greedy_decode, planned_costs, FlopsReport, PreparedRun, RetakeConfig, RunError, RunReport,
    TimingReport,
};
use crate::pivotkv;
use crate::scalar::Scalar;
use crate::SCHEMA_VERSION;

use super::schedule::{schedule, ScheduleMode, TaskKind, TimeUnits, Timeline, TimelineEvent};

struct CompressTask<F> {
    cache: LayerKvCache<F>,
    kv: ChunkKv<F>,
    attention: Vec<F>,
    chunk_index: usize,
    layer: usize,
}

/// Runs the pipeline with the two-worker overlap and returns the report plus
/// the measured timeline (nanosecond units).
pub fn execute_overlapped(
    features: &FrameFeatures,
    prompt_ids: &[usize],
    cfg: &RetakeConfig,
    weights: &ModelWeights,
) -> Result<(RunReport, Timeline), RunError> {
    match weights.config.precision {
        Precision::F32 => overlapped_impl::<f32>(features, prompt_ids, cfg, weights),
        Precision::F64 => overlapped_impl::<f64>(features, prompt_ids, cfg, weights),
    }
}

fn overlapped_impl<F: Scalar>(
    features: &FrameFeatures,
    prompt_ids: &[usize],
    cfg: &RetakeConfig,
    weights: &ModelWeights,
) -> Result<(RunReport, Timeline), RunError> {
    let started = Instant::now();
    let prep = PreparedRun::<F>::new(features, prompt_ids, cfg, weights)?;
    let prompt_embeddings = prep.model.embed_tokens(prompt_ids)?;
    let layers = prep.model.config().layers;
    let chunks = prep.plan.chunks.clone();
    let total_tokens = prep.plan.total_tokens();

    let mut task_tx: Vec<Sender<CompressTask<F>>> = Vec::with_capacity(layers);
    let mut task_rx: Vec<Receiver<CompressTask<F>>> = Vec::with_capacity(layers);
    let mut cache_tx: Vec<Sender<LayerKvCache<F>>> = Vec::with_capacity(layers);
    let mut cache_rx: Vec<Receiver<LayerKvCache<F>>> = Vec::with_capacity(layers);
    for _ in 0..layers {
        let (tx, rx) = channel();
        task_tx.push(tx);
        task_rx.push(rx);
        let (tx, rx) = channel();
        cache_tx.push(tx);
        cache_rx.push(rx);
    }

    let prep_ref = &prep;
    let chunks_ref = &chunks;
    type PipelineOut<F> = (Vec<TimelineEvent>, Vec<LayerKvCache<F>>, Vec<F>);
    let piped: Result<(PipelineOut<F>, Vec<TimelineEvent>), RunError> =
        std::thread::scope(|scope| {
            let worker = scope.spawn(move || -> Result<Vec<TimelineEvent>, RunError> {
                let mut events = Vec::new();
                for desc in chunks_ref.iter() {
                    for layer in 0..layers {
                        let mut task = task_rx[layer].recv().map_err(|_| {
                            RunError::Pipeline("prefill worker hung up".to_string())
                        })?;
                        let c_start = started.elapsed().as_nanos() as f64;
                        match desc.kind {
                            ChunkKind::Video => {
                                let l_q = task.kv.len();
                                let mut scores = pivotkv::importance_scores(
                                    &task.attention,
                                    prep_ref.model.config().heads,
                                    l_q,
                                );
                                if prep_ref.normalize_scores {
                                    pivotkv::normalize_by_query_count(&mut scores);
                                }
                                let comp = pivotkv::compress_layer(
                                    &task.kv,
                                    scores,
                                    prep_ref.pivot_slice(desc),
                                    prep_ref.alpha_kv,
                                )?;
                                task.cache.append_rows(&comp.keys, &comp.values, &comp.positions)?;
                                events.push(TimelineEvent {
                                    chunk: task.chunk_index,
                                    layer: task.layer,
                                    kind: TaskKind::Compress,
                                    start: c_start,
                                    end: started.elapsed().as_nanos() as f64,
                                });
                            }
                            ChunkKind::Prompt => {
                                task.cache.append_rows(
                                    &task.kv.keys,
                                    &task.kv.values,
                                    &task.kv.positions,
                                )?;
                            }
                        }
                        cache_tx[task.layer]
                            .send(task.cache)
                            .map_err(|_| RunError::Pipeline("prefill worker hung up".into()))?;
                    }
                }
                Ok(events)
            });

            let prefill = || -> Result<PipelineOut<F>, RunError> {
                let mut f_events = Vec::new();
                let mut last_hidden = Vec::new();
                for (i, desc) in chunks.iter().enumerate() {
                    let mut hidden = prep.chunk_embeddings(desc, &prompt_embeddings);
                    let start_pos = desc.token_range.start;
                    for layer in 0..layers {
                        let cache = if i == 0 {
                            LayerKvCache::new(prep.model.config().hidden)
                        } else {
                            cache_rx[layer].recv().map_err(|_| {
                                RunError::Pipeline("compression worker hung up".into())
                            })?
                        };
                        let f_start = started.elapsed().as_nanos() as f64;
                        let step = prep.model.layer_forward(
                            layer,
                            &hidden,
                            &cache,
                            start_pos,
                            &prep.attn_opts,
                        )?;
                        f_events.push(TimelineEvent {
                            chunk: i,
                            layer,
                            kind: TaskKind::Prefill,
                            start: f_start,
                            end: started.elapsed().as_nanos() as f64,
                        });
                        hidden = step.hidden;
                        task_tx[layer]
                            .send(CompressTask {
                                cache,
                                kv: step.kv,
                                attention: step.attention,
                                chunk_index: i,
                                layer,
                            })
                            .map_err(|_| RunError::Pipeline("compression worker hung up".into()))?;
                    }
                    last_hidden = hidden;
                }
                // Collect the final caches (all compression done).
                let mut final_layers = Vec::with_capacity(layers);
                for rx in cache_rx.iter() {
                    final_layers.push(rx.recv().map_err(|_| {
                        RunError::Pipeline("compression worker hung up".into())
                    })?);
                }
                let tail_logits = prep.model.tail_logits(&last_hidden);
                Ok((f_events, final_layers, tail_logits))
            };

            let main_out = prefill();
            // Unblock the worker before joining: once the senders are gone a
            // blocked recv returns instead of waiting forever.
            drop(task_tx);
            let worker_out = worker
                .join()
                .map_err(|_| RunError::Pipeline("compression worker panicked".into()))?;
            match (main_out, worker_out) {
                (Ok(m), Ok(w)) => Ok((m, w)),
                // A pipeline error on the prefill side usually means the
                // worker died first; prefer its root cause.
                (Err(RunError::Pipeline(_)), Err(w)) => Err(w),
                (Err(m), _) => Err(m),
                (Ok(_), Err(w)) => Err(w),
            }
        });
    let ((f_events, final_layers, tail_logits), c_events) = piped?;

    let mut caches = CacheSet::from_layers(final_layers, total_tokens);
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

    // Per-chunk context growth follows the same retention arithmetic the
    // sequential path realizes.
    let mut per_chunk_cache_len = Vec::with_capacity(chunks.len());
    let mut ctx = 0usize;
    for desc in &chunks {
        ctx += match desc.kind {
            ChunkKind::Video => {
                pivotkv::retention_budget(prep.alpha_kv, desc.token_range.len())
            }
            ChunkKind::Prompt => desc.token_range.len(),
        };
        per_chunk_cache_len.push(ctx);
    }

    let (task_costs, planned_ctx, prefill_flops, compression_flops) =
        planned_costs(&prep.plan, prep.alpha_kv, &prep.cost);
    debug_assert_eq!(planned_ctx, final_context_len);
    let sim = schedule(&task_costs, ScheduleMode::Overlapped);

    let mut events = f_events;
    events.extend(c_events);
    events.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
    let timeline = Timeline {
        schema_version: SCHEMA_VERSION,
        units: TimeUnits::Nanos,
        events,
        ttft: measured_ttft_ns as f64,
        tpot: measured_tpot_ns.map(|t| t as f64),
    };

    let report = RunReport {
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
    };
    Ok((report, timeline))
}
