//! Attention-guided KV-cache compression for prefilled video chunks.
//!
//! Each chunk's retained set is chosen per layer from that layer's
//! chunk-internal attention block: a token's importance is the total
//! head-averaged attention it received from the chunk's queries (column sums).
//! Pivot tokens always outrank non-pivots; no infinities are materialized —
//! ranking uses the lexicographic key `(is_pivot, score)` with ties broken
//! toward the lower index. The retention budget is
//! `k' = max(1, floor(alpha_kv · l_q))`.
//!
//! Early chunk tokens receive attention from more queries than late ones; no
//! length correction is applied by default, matching the plain column-sum
//! definition. [`normalize_by_query_count`] exists for ablations.

use thiserror::Error;

use crate::engine::{CacheSet, ChunkKv, EngineError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PivotKvError {
    #[error("cannot compress an empty chunk")]
    EmptyChunk,
    #[error("alpha_kv must be in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("cache position order violated: {0}")]
    PositionOrder(String),
}

/// Scores paired with the pivot mask slice they rank against.
#[derive(Debug, Clone)]
pub struct ImportanceScores<F> {
    pub scores: Vec<F>,
    pub pivot_slice: Vec<bool>,
}

impl<F: Scalar> ImportanceScores<F> {
    /// Indices of the `k` highest-ranked tokens under the lexicographic
    /// `(is_pivot, score)` descending order, ties to the lower index.
    /// Returned ascending.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|a, b| {
            self.pivot_slice[*b]
                .cmp(&self.pivot_slice[*a])
                .then_with(|| self.scores[*b].partial_cmp(&self.scores[*a]).unwrap())
                .then(a.cmp(b))
        });
        let mut kept: Vec<usize> = order.into_iter().take(k).collect();
        kept.sort_unstable();
        kept
    }
}

/// Total head-averaged attention each chunk token receives across all chunk
/// queries: `score[j] = sum_q mean_heads A[head, q, j]`.
pub fn importance_scores<F: Scalar>(attention: &[F], heads: usize, l_q: usize) -> Vec<F> {
    debug_assert_eq!(attention.len(), heads * l_q * l_q);
    let inv_h = F::ONE / F::from_f64(heads as f64);
    let mut scores = vec![F::ZERO; l_q];
    for head in 0..heads {
        for q in 0..l_q {
            let row = &attention[(head * l_q + q) * l_q..(head * l_q + q + 1) * l_q];
            for (j, s) in scores.iter_mut().enumerate() {
                *s += inv_h * row[j];
            }
        }
    }
    scores
}

/// Ablation knob: divide each token's score by the number of chunk queries
/// that could attend to it (`l_q - j`), removing the causal position bias.
pub fn normalize_by_query_count<F: Scalar>(scores: &mut [F]) {
    let l_q = scores.len();
    for (j, s) in scores.iter_mut().enumerate() {
        *s = *s / F::from_f64((l_q - j) as f64);
    }
}

/// Pairs scores with the chunk's pivot-mask slice; pivots outrank all
/// non-pivots during selection without storing infinities.
pub fn apply_pivot_mask<F: Scalar>(
    scores: Vec<F>,
    pivot_slice: &[bool],
) -> Result<ImportanceScores<F>, PivotKvError> {
    if scores.len() != pivot_slice.len() {
        return Err(PivotKvError::LengthMismatch(format!(
            "{} scores vs {} mask entries",
            scores.len(),
            pivot_slice.len()
        )));
    }
    Ok(ImportanceScores {
        scores,
        pivot_slice: pivot_slice.to_vec(),
    })
}

/// `max(1, floor(alpha_kv · l_q))` retained tokens per chunk and layer.
pub fn retention_budget(alpha_kv: f64, l_q: usize) -> usize {
    ((alpha_kv * l_q as f64).floor() as usize).max(1)
}

/// One layer's compressed chunk: the kept indices (ascending) and the
/// gathered key/value rows with their original positions.
#[derive(Debug, Clone)]
pub struct LayerCompression<F> {
    pub kept: Vec<usize>,
    pub keys: Vec<F>,
    pub values: Vec<F>,
    pub positions: Vec<usize>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct ChunkCompression<F> {
    pub layers: Vec<LayerCompression<F>>,
    /// Uncompressed chunk length (layout positions consumed).
    pub chunk_len: usize,
    /// Rows kept per layer.
    pub kept_len: usize,
}

/// Compresses one layer's chunk KV against its own importance scores.
pub fn compress_layer<F: Scalar>(
    chunk_kv: &ChunkKv<F>,
    scores: Vec<F>,
    pivot_slice: &[bool],
    alpha_kv: f64,
) -> Result<LayerCompression<F>, PivotKvError> {
    let l_q = chunk_kv.len();
    if l_q == 0 {
        return Err(PivotKvError::EmptyChunk);
    }
    if !(alpha_kv > 0.0 && alpha_kv <= 1.0) {
        return Err(PivotKvError::InvalidAlpha(alpha_kv));
    }
    if scores.len() != l_q {
        return Err(PivotKvError::LengthMismatch(format!(
            "{} scores for chunk of {} tokens",
            scores.len(),
            l_q
        )));
    }
    let masked = apply_pivot_mask(scores, pivot_slice)?;
    let kept = masked.top_k(retention_budget(alpha_kv, l_q));
    let dim = chunk_kv.dim;
    let mut keys = Vec::with_capacity(kept.len() * dim);
    let mut values = Vec::with_capacity(kept.len() * dim);
    let mut positions = Vec::with_capacity(kept.len());
    for &i in &kept {
        keys.extend_from_slice(chunk_kv.key_row(i));
        values.extend_from_slice(chunk_kv.value_row(i));
        positions.push(chunk_kv.positions[i]);
    }
    Ok(LayerCompression {
        kept,
        keys,
        values,
        positions,
        dim,
    })
}

/// Compresses every layer of a prefilled chunk independently; all layers share
/// the pivot slice and budget but rank against their own attention scores.
pub fn compress_chunk<F: Scalar>(
    chunk_caches: &[ChunkKv<F>],
    scores_per_layer: Vec<Vec<F>>,
    pivot_slice: &[bool],
    alpha_kv: f64,
) -> Result<ChunkCompression<F>, PivotKvError> {
    if chunk_caches.len() != scores_per_layer.len() {
        return Err(PivotKvError::LengthMismatch(format!(
            "{} chunk caches vs {} score vectors",
            chunk_caches.len(),
            scores_per_layer.len()
        )));
    }
    let chunk_len = chunk_caches.first().map_or(0, ChunkKv::len);
    let layers = chunk_caches
        .iter()
        .zip(scores_per_layer)
        .map(|(kv, scores)| compress_layer(kv, scores, pivot_slice, alpha_kv))
        .collect::<Result<Vec<_>, _>>()?;
    let kept_len = layers.first().map_or(0, |l| l.kept.len());
    Ok(ChunkCompression {
        layers,
        chunk_len,
        kept_len,
    })
}

/// Appends a compressed chunk to the running cache and advances the layout
/// cursor by the chunk's uncompressed length.
pub fn update_cache<F: Scalar>(
    caches: &mut CacheSet<F>,
    compression: &ChunkCompression<F>,
) -> Result<(), PivotKvError> {
    if caches.layers.len() != compression.layers.len() {
        return Err(PivotKvError::LengthMismatch(format!(
            "{} cache layers vs {} compressed layers",
            caches.layers.len(),
            compression.layers.len()
        )));
    }
    for (cache, comp) in caches.layers.iter_mut().zip(&compression.layers) {
        cache
            .append_rows(&comp.keys, &comp.values, &comp.positions)
            .map_err(|e| match e {
                EngineError::PositionOrder(msg) => PivotKvError::PositionOrder(msg),
                other => PivotKvError::PositionOrder(other.to_string()),
            })?;
    }
    caches.advance(compression.chunk_len);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn chunk_kv(rows: &[[f64; 2]], start_pos: usize) -> ChunkKv<f64> {
        let keys: Vec<f64> = rows.iter().flatten().copied().collect();
        ChunkKv {
            values: keys.iter().map(|v| v + 100.0).collect(),
            keys,
            positions: (start_pos..start_pos + rows.len()).collect(),
            dim: 2,
        }
    }

    #[test]
    fn column_sums_on_worked_example() {
        // h=1, causal A = [[1,0],[0.5,0.5]] -> scores [1.5, 0.5].
        let a = vec![1.0, 0.0, 0.5, 0.5];
        assert_eq!(importance_scores(&a, 1, 2), vec![1.5, 0.5]);
    }

    #[test]
    fn head_mean_of_identical_heads_is_identity() {
        let one = vec![1.0, 0.0, 0.5, 0.5];
        let two: Vec<f64> = one.iter().chain(&one).copied().collect();
        assert_eq!(importance_scores(&two, 2, 2), vec![1.5, 0.5]);
    }

    #[test]
    fn score_mass_equals_query_count() {
        // Random causal row-stochastic block: total mass = number of queries.
        let mut r = rng::seeded(3);
        let (h, l_q) = (3, 5);
        let mut a = vec![0.0f64; h * l_q * l_q];
        for head in 0..h {
            for q in 0..l_q {
                let row = &mut a[(head * l_q + q) * l_q..(head * l_q + q + 1) * l_q];
                let mut sum = 0.0;
                for v in row[..=q].iter_mut() {
                    *v = rng::gauss(&mut r).abs() + 1e-3;
                    sum += *v;
                }
                for v in row[..=q].iter_mut() {
                    *v /= sum;
                }
            }
        }
        let total: f64 = importance_scores(&a, h, l_q).iter().sum();
        assert!((total - l_q as f64).abs() < 1e-9);
    }

    #[test]
    fn pivot_is_forced_in() {
        let masked = apply_pivot_mask(vec![0.2, 0.9, 0.1], &[true, false, false]).unwrap();
        assert_eq!(masked.top_k(2), vec![0, 1]);
    }

    #[test]
    fn no_pivots_is_pure_top_k() {
        let masked = apply_pivot_mask(vec![0.2, 0.9, 0.1], &[false, false, false]).unwrap();
        assert_eq!(masked.top_k(2), vec![0, 1]);
        let masked = apply_pivot_mask(vec![0.2, 0.1, 0.9], &[false, false, false]).unwrap();
        assert_eq!(masked.top_k(1), vec![2]);
    }

    #[test]
    fn pivot_overflow_falls_back_to_scores() {
        let masked = apply_pivot_mask(vec![0.1, 0.3, 0.2], &[true, true, true]).unwrap();
        assert_eq!(masked.top_k(2), vec![1, 2]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let masked = apply_pivot_mask(vec![0.5, 0.5, 0.5], &[false, false, false]).unwrap();
        assert_eq!(masked.top_k(2), vec![0, 1]);
    }

    #[test]
    fn alpha_one_is_identity() {
        let kv = chunk_kv(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], 0);
        let comp = compress_layer(&kv, vec![0.1, 0.9, 0.3], &[false; 3], 1.0).unwrap();
        assert_eq!(comp.kept, vec![0, 1, 2]);
        assert_eq!(comp.keys, kv.keys);
        assert_eq!(comp.values, kv.values);
        assert_eq!(comp.positions, kv.positions);
    }

    #[test]
    fn layers_select_independently_and_match_sort_oracle() {
        let kv = chunk_kv(&[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0], [6.0, 7.0]], 0);
        let scores = vec![vec![0.4, 0.1, 0.3, 0.2], vec![0.1, 0.2, 0.3, 0.4]];
        let comp = compress_chunk(
            &[kv.clone(), kv],
            scores.clone(),
            &[false; 4],
            0.5,
        )
        .unwrap();
        assert_eq!(comp.kept_len, 2);
        for (layer, s) in comp.layers.iter().zip(&scores) {
            // Brute-force oracle: stable sort of (score, -index) descending.
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|a, b| s[*b].partial_cmp(&s[*a]).unwrap().then(a.cmp(b)));
            let mut expect = order[..2].to_vec();
            expect.sort_unstable();
            assert_eq!(layer.kept, expect);
        }
        assert_ne!(comp.layers[0].kept, comp.layers[1].kept);
    }

    #[test]
    fn budget_with_pivots_retains_them() {
        let rows: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, i as f64]).collect();
        let kv = chunk_kv(&rows, 0);
        let mut pivots = [false; 8];
        pivots[2] = true;
        pivots[6] = true;
        let scores: Vec<f64> = vec![0.9, 0.8, 0.01, 0.7, 0.6, 0.5, 0.02, 0.4];
        let comp = compress_layer(&kv, scores, &pivots, 0.5).unwrap();
        assert_eq!(comp.kept.len(), 4);
        assert!(comp.kept.contains(&2));
        assert!(comp.kept.contains(&6));
    }

    #[test]
    fn gather_preserves_rows_and_positions() {
        let kv = chunk_kv(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]], 10);
        let comp = compress_layer(&kv, vec![0.0, 1.0, 0.0, 1.0], &[false; 4], 0.5).unwrap();
        assert_eq!(comp.kept, vec![1, 3]);
        assert_eq!(comp.keys, vec![3.0, 4.0, 7.0, 8.0]);
        assert_eq!(comp.values, vec![103.0, 104.0, 107.0, 108.0]);
        assert_eq!(comp.positions, vec![11, 13]);
    }

    #[test]
    fn empty_chunk_rejected() {
        let kv = ChunkKv::<f64> {
            keys: vec![],
            values: vec![],
            positions: vec![],
            dim: 2,
        };
        assert!(matches!(
            compress_layer(&kv, vec![], &[], 0.5),
            Err(PivotKvError::EmptyChunk)
        ));
    }

    #[test]
    fn update_cache_budget_arithmetic() {
        // Two chunks of 16 at alpha 0.25 leave 2·floor(0.25·16) = 8 rows.
        let mut caches = CacheSet::<f64>::new(1, 2);
        for chunk_idx in 0..2 {
            let rows: Vec<[f64; 2]> = (0..16).map(|i| [i as f64, 0.0]).collect();
            let kv = chunk_kv(&rows, chunk_idx * 16);
            let scores: Vec<f64> = (0..16).map(|i| i as f64).collect();
            let comp = compress_chunk(&[kv], vec![scores], &[false; 16], 0.25).unwrap();
            assert_eq!(comp.kept_len, 4);
            update_cache(&mut caches, &comp).unwrap();
        }
        assert_eq!(caches.context_len(), 8);
        assert_eq!(caches.next_position(), 32);
    }

    #[test]
    fn identity_compression_equals_uncompressed_append() {
        let rows: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, -(i as f64)]).collect();
        let kv = chunk_kv(&rows, 0);
        let mut a = CacheSet::<f64>::new(1, 2);
        let comp = compress_chunk(&[kv.clone()], vec![vec![0.0; 5]], &[false; 5], 1.0).unwrap();
        update_cache(&mut a, &comp).unwrap();
        let mut b = CacheSet::<f64>::new(1, 2);
        b.append_chunk(std::slice::from_ref(&kv)).unwrap();
        assert_eq!(a.context_len(), b.context_len());
        assert_eq!(a.next_position(), b.next_position());
        for i in 0..a.context_len() {
            assert_eq!(a.layers[0].key_row(i), b.layers[0].key_row(i));
            assert_eq!(a.layers[0].value_row(i), b.layers[0].value_row(i));
        }
    }

    #[test]
    fn prompt_path_bypasses_compression() {
        let mut caches = CacheSet::<f64>::new(1, 2);
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 0.5]).collect();
        let kv = chunk_kv(&rows, 0);
        caches.append_chunk(std::slice::from_ref(&kv)).unwrap();
        assert_eq!(caches.context_len(), 6);
    }

    #[test]
    fn stale_positions_rejected() {
        let mut caches = CacheSet::<f64>::new(1, 2);
        let kv = chunk_kv(&[[1.0, 1.0], [2.0, 2.0]], 0);
        let comp = compress_chunk(&[kv.clone()], vec![vec![0.0; 2]], &[false; 2], 1.0).unwrap();
        update_cache(&mut caches, &comp).unwrap();
        // Re-appending the same positions must fail.
        assert!(matches!(
            update_cache(&mut caches, &comp),
            Err(PivotKvError::PositionOrder(_))
        ));
    }

    #[test]
    fn query_count_normalization_flattens_causal_bias() {
        // Uniform causal attention: raw scores decay toward late tokens,
        // normalized scores are flat.
        let l_q = 4;
        let mut a = vec![0.0f64; l_q * l_q];
        for q in 0..l_q {
            for j in 0..=q {
                a[q * l_q + j] = 1.0 / (q + 1) as f64;
            }
        }
        let mut scores = importance_scores(&a, 1, l_q);
        assert!(scores[0] > scores[l_q - 1]);
        normalize_by_query_count(&mut scores);
        let spread = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(*s), hi.max(*s))
            });
        assert!(spread.1 - spread.0 < 0.3, "scores {scores:?}");
    }
}
