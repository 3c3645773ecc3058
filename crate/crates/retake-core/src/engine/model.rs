//! Typed transformer forward passes.
//!
//! [`Model`] holds the weights upcast to the working precision. The one-shot
//! [`Model::prefill_full`] path computes full causal attention directly and is
//! deliberately kept separate from the incremental
//! [`Model::layer_forward`]-based chunk/decode path so the two can check each
//! other; both consume the same primitive kernels but do their own position
//! and visibility bookkeeping.
//!
//! Summation orders are fixed everywhere (keys in ascending position, head
//! dims in ascending index), so any chunking of the same input reproduces the
//! full-prefill numbers bit-for-bit at equal precision.

use crate::linalg::{self, for_each_row, for_each_row_pair};
use crate::scalar::Scalar;

use super::cache::{CacheSet, ChunkKv, LayerKvCache};
use super::weights::ModelWeights;
use super::{EngineError, ModelConfig};

/// Attention introspection knobs for the chunk path.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnOptions {
    /// Re-normalize each returned chunk-attention row to sum to 1 instead of
    /// handing out the raw softmax sub-block (which also spreads mass over
    /// historical keys).
    pub renormalize_block: bool,
    /// Also return the full softmax rows over history + chunk keys.
    pub keep_full_attention: bool,
}

/// Output of one layer applied to one chunk.
pub struct LayerStep<F> {
    /// Layer output hidden states, `l_q × hidden`.
    pub hidden: Vec<F>,
    /// This chunk's key/value rows (keys post-rotary) with their positions.
    pub kv: ChunkKv<F>,
    /// Chunk-internal attention block, `heads × l_q × l_q`, causal (zeros
    /// above the diagonal).
    pub attention: Vec<F>,
    /// Full attention rows `heads × l_q × (hist + l_q)` when requested.
    pub full_attention: Option<Vec<F>>,
}

/// Output of prefilling one chunk through all layers.
pub struct ChunkOutput<F> {
    pub layer_kv: Vec<ChunkKv<F>>,
    /// Per layer: `heads × l_q × l_q` chunk-internal attention.
    pub attention: Vec<Vec<F>>,
    pub full_attention: Vec<Option<Vec<F>>>,
    /// Logits of the chunk's final token, length `vocab`.
    pub tail_logits: Vec<F>,
    pub chunk_len: usize,
}

struct TypedLayer<F> {
    attn_norm: Vec<F>,
    wq: Vec<F>,
    wk: Vec<F>,
    wv: Vec<F>,
    wo: Vec<F>,
    mlp_norm: Vec<F>,
    fc1: Vec<F>,
    fc2: Vec<F>,
}

/// Weights upcast to the working precision `F`, ready to run.
pub struct Model<F> {
    config: ModelConfig,
    embed: Vec<F>,
    layers: Vec<TypedLayer<F>>,
    final_norm: Vec<F>,
    unembed: Vec<F>,
    inv_freq: Vec<f64>,
}

fn upcast<F: Scalar>(src: &[f32]) -> Vec<F> {
    src.iter().map(|v| F::from_f32(*v)).collect()
}

impl<F: Scalar> Model<F> {
    pub fn new(weights: &ModelWeights) -> Result<Self, EngineError> {
        weights.config.validate()?;
        let cfg = weights.config.clone();
        let half = cfg.head_dim() / 2;
        let inv_freq = (0..half)
            .map(|i| 10_000f64.powf(-2.0 * i as f64 / cfg.head_dim() as f64))
            .collect();
        Ok(Self {
            embed: upcast(&weights.embed),
            layers: weights
                .layers
                .iter()
                .map(|l| TypedLayer {
                    attn_norm: upcast(&l.attn_norm),
                    wq: upcast(&l.wq),
                    wk: upcast(&l.wk),
                    wv: upcast(&l.wv),
                    wo: upcast(&l.wo),
                    mlp_norm: upcast(&l.mlp_norm),
                    fc1: upcast(&l.fc1),
                    fc2: upcast(&l.fc2),
                })
                .collect(),
            final_norm: upcast(&weights.final_norm),
            unembed: upcast(&weights.unembed),
            inv_freq,
            config: cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn empty_cache(&self) -> CacheSet<F> {
        CacheSet::new(self.config.layers, self.config.hidden)
    }

    /// Embedding row for a token id.
    pub fn embed_token(&self, id: usize) -> Result<Vec<F>, EngineError> {
        if id >= self.config.vocab {
            return Err(EngineError::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        let d = self.config.hidden;
        Ok(self.embed[id * d..(id + 1) * d].to_vec())
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Vec<F>, EngineError> {
        let d = self.config.hidden;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.embed_token(id)?);
        }
        Ok(out)
    }

    fn rope_in_place(&self, buf: &mut [F], start_pos: usize) {
        let d = self.config.hidden;
        let dh = self.config.head_dim();
        let half = dh / 2;
        let heads = self.config.heads;
        let inv_freq = &self.inv_freq;
        for_each_row(buf, d, |row_idx, row| {
            let pos = (start_pos + row_idx) as f64;
            for h in 0..heads {
                let base = h * dh;
                for i in 0..half {
                    let (s, c) = (pos * inv_freq[i]).sin_cos();
                    let (s, c) = (F::from_f64(s), F::from_f64(c));
                    let x0 = row[base + i];
                    let x1 = row[base + half + i];
                    row[base + i] = x0 * c - x1 * s;
                    row[base + half + i] = x1 * c + x0 * s;
                }
            }
        });
    }

    fn rms_rows(&self, x: &[F], gain: &[F]) -> Vec<F> {
        let d = self.config.hidden;
        let mut out = vec![F::ZERO; x.len()];
        let rows: Vec<&[F]> = x.chunks(d).collect();
        for_each_row(&mut out, d, |i, row| {
            linalg::rms_norm(rows[i], gain, row);
        });
        out
    }

    fn add_in_place(acc: &mut [F], inc: &[F]) {
        for (a, b) in acc.iter_mut().zip(inc) {
            *a += *b;
        }
    }

    fn mlp(&self, layer: &TypedLayer<F>, hidden: &mut Vec<F>, n: usize) {
        let d = self.config.hidden;
        let mh = self.config.mlp_hidden();
        let normed = self.rms_rows(hidden, &layer.mlp_norm);
        let mut up = linalg::matmul(&normed, n, d, &layer.fc1, mh);
        for_each_row(&mut up, mh, |_, row| {
            for v in row.iter_mut() {
                *v = linalg::gelu(*v);
            }
        });
        let down = linalg::matmul(&up, n, mh, &layer.fc2, d);
        Self::add_in_place(hidden, &down);
    }

    /// Final RMS norm + unembedding for every row, `n × vocab`.
    pub fn logits_all(&self, hidden: &[F]) -> Vec<F> {
        let d = self.config.hidden;
        let n = hidden.len() / d;
        let normed = self.rms_rows(hidden, &self.final_norm);
        linalg::matmul(&normed, n, d, &self.unembed, self.config.vocab)
    }

    /// Logits of the last row only.
    pub fn tail_logits(&self, hidden: &[F]) -> Vec<F> {
        let d = self.config.hidden;
        let n = hidden.len() / d;
        self.logits_all(&hidden[(n - 1) * d..])
    }

    /// One layer over one chunk against cached history.
    ///
    /// History keys are visible to every query; chunk keys are causally
    /// masked. The returned attention block is the raw softmax sub-block over
    /// chunk keys unless `opts.renormalize_block` asks otherwise.
    pub fn layer_forward(
        &self,
        layer: usize,
        hidden: &[F],
        cache: &LayerKvCache<F>,
        start_pos: usize,
        opts: &AttnOptions,
    ) -> Result<LayerStep<F>, EngineError> {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let l_q = hidden.len() / d;
        if l_q == 0 {
            return Err(EngineError::EmptyInput);
        }
        debug_assert_eq!(hidden.len(), l_q * d);
        if start_pos + l_q > self.config.max_positions {
            return Err(EngineError::Capacity {
                needed: start_pos + l_q,
                max: self.config.max_positions,
            });
        }
        if let Some(last) = cache.last_position() {
            if last >= start_pos {
                return Err(EngineError::PositionOrder(format!(
                    "cache tail position {last} not before chunk start {start_pos}"
                )));
            }
        }
        let lw = &self.layers[layer];
        let hist = cache.len();

        let normed = self.rms_rows(hidden, &lw.attn_norm);
        let mut q = linalg::matmul(&normed, l_q, d, &lw.wq, d);
        let mut k = linalg::matmul(&normed, l_q, d, &lw.wk, d);
        let v = linalg::matmul(&normed, l_q, d, &lw.wv, d);
        self.rope_in_place(&mut q, start_pos);
        self.rope_in_place(&mut k, start_pos);

        // One parallel task per (head, query) pair; each writes its own
        // attention row and context row.
        let attn_width = if opts.keep_full_attention { hist + l_q } else { l_q };
        let mut attn = vec![F::ZERO; heads * l_q * attn_width];
        let mut heads_out = vec![F::ZERO; heads * l_q * dh];
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        let q_ref = &q;
        let k_ref = &k;
        let v_ref = &v;
        for_each_row_pair(&mut attn, attn_width, &mut heads_out, dh, |idx, a_row, o_row| {
            let head = idx / l_q;
            let qi = idx % l_q;
            let hoff = head * dh;
            let q_vec = &q_ref[qi * d + hoff..qi * d + hoff + dh];
            let visible = hist + qi + 1;
            let mut scores = Vec::with_capacity(visible);
            for t in 0..hist {
                let key = &cache.key_row(t)[hoff..hoff + dh];
                scores.push(linalg::dot(q_vec, key) * inv_sqrt);
            }
            for t in 0..=qi {
                let key = &k_ref[t * d + hoff..t * d + hoff + dh];
                scores.push(linalg::dot(q_vec, key) * inv_sqrt);
            }
            linalg::softmax_in_place(&mut scores);
            for (t, p) in scores.iter().enumerate().take(hist) {
                let val = &cache.value_row(t)[hoff..hoff + dh];
                for (c, o) in o_row.iter_mut().enumerate() {
                    *o += *p * val[c];
                }
            }
            for t in 0..=qi {
                let p = scores[hist + t];
                let val = &v_ref[t * d + hoff..t * d + hoff + dh];
                for (c, o) in o_row.iter_mut().enumerate() {
                    *o += p * val[c];
                }
            }
            if opts.keep_full_attention {
                a_row[..visible].copy_from_slice(&scores);
            } else {
                a_row[..=qi].copy_from_slice(&scores[hist..]);
            }
        });

        // Interleave heads back into token-major layout.
        let mut ctx = vec![F::ZERO; l_q * d];
        for head in 0..heads {
            for qi in 0..l_q {
                let src = (head * l_q + qi) * dh;
                let dst = qi * d + head * dh;
                ctx[dst..dst + dh].copy_from_slice(&heads_out[src..src + dh]);
            }
        }

        let proj = linalg::matmul(&ctx, l_q, d, &lw.wo, d);
        let mut out = hidden.to_vec();
        Self::add_in_place(&mut out, &proj);
        self.mlp(lw, &mut out, l_q);

        let (block, full) = if opts.keep_full_attention {
            let mut block = vec![F::ZERO; heads * l_q * l_q];
            for idx in 0..heads * l_q {
                let qi = idx % l_q;
                let src = idx * attn_width + hist;
                block[idx * l_q..idx * l_q + qi + 1]
                    .copy_from_slice(&attn[src..src + qi + 1]);
            }
            (block, Some(attn))
        } else {
            (attn, None)
        };
        let mut block = block;
        if opts.renormalize_block {
            for_each_row(&mut block, l_q, |idx, row| {
                let qi = idx % l_q;
                let sum: F = row[..=qi].iter().copied().sum();
                if sum > F::ZERO {
                    for p in &mut row[..=qi] {
                        *p = *p / sum;
                    }
                }
            });
        }

        Ok(LayerStep {
            hidden: out,
            kv: ChunkKv {
                keys: k,
                values: v,
                positions: (start_pos..start_pos + l_q).collect(),
                dim: d,
            },
            attention: block,
            full_attention: full,
        })
    }

    /// One-shot prefill over a whole sequence; the reference for the chunked
    /// route. Returns per-row logits and the full uncompressed caches.
    pub fn prefill_full(&self, embeddings: &[F]) -> Result<(Vec<F>, CacheSet<F>), EngineError> {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        if embeddings.is_empty() {
            return Err(EngineError::EmptyInput);
        }
        debug_assert_eq!(embeddings.len() % d, 0);
        let n = embeddings.len() / d;
        if n > self.config.max_positions {
            return Err(EngineError::Capacity {
                needed: n,
                max: self.config.max_positions,
            });
        }
        let mut caches = self.empty_cache();
        let mut hidden = embeddings.to_vec();
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        for (layer_idx, lw) in self.layers.iter().enumerate() {
            let normed = self.rms_rows(&hidden, &lw.attn_norm);
            let mut q = linalg::matmul(&normed, n, d, &lw.wq, d);
            let mut k = linalg::matmul(&normed, n, d, &lw.wk, d);
            let v = linalg::matmul(&normed, n, d, &lw.wv, d);
            self.rope_in_place(&mut q, 0);
            self.rope_in_place(&mut k, 0);

            let q_ref = &q;
            let k_ref = &k;
            let v_ref = &v;
            let mut heads_out = vec![F::ZERO; heads * n * dh];
            for_each_row(&mut heads_out, dh, |idx, o_row| {
                let head = idx / n;
                let qi = idx % n;
                let hoff = head * dh;
                let q_vec = &q_ref[qi * d + hoff..qi * d + hoff + dh];
                let mut scores = Vec::with_capacity(qi + 1);
                for t in 0..=qi {
                    let key = &k_ref[t * d + hoff..t * d + hoff + dh];
                    scores.push(linalg::dot(q_vec, key) * inv_sqrt);
                }
                linalg::softmax_in_place(&mut scores);
                for (t, p) in scores.iter().enumerate() {
                    let val = &v_ref[t * d + hoff..t * d + hoff + dh];
                    for (c, o) in o_row.iter_mut().enumerate() {
                        *o += *p * val[c];
                    }
                }
            });
            let mut ctx = vec![F::ZERO; n * d];
            for head in 0..heads {
                for qi in 0..n {
                    let src = (head * n + qi) * dh;
                    let dst = qi * d + head * dh;
                    ctx[dst..dst + dh].copy_from_slice(&heads_out[src..src + dh]);
                }
            }
            let proj = linalg::matmul(&ctx, n, d, &lw.wo, d);
            Self::add_in_place(&mut hidden, &proj);
            self.mlp(lw, &mut hidden, n);

            caches.layers[layer_idx]
                .append_rows(&k, &v, &(0..n).collect::<Vec<_>>())
                .expect("fresh cache accepts ascending positions");
        }
        caches.advance(n);
        Ok((self.logits_all(&hidden), caches))
    }

    /// Prefills one chunk on top of read-only cached history; the caller
    /// decides what to append (compressed or not).
    pub fn prefill_chunk(
        &self,
        embeddings: &[F],
        caches: &CacheSet<F>,
        opts: &AttnOptions,
    ) -> Result<ChunkOutput<F>, EngineError> {
        let d = self.config.hidden;
        if embeddings.is_empty() {
            return Err(EngineError::EmptyInput);
        }
        let l_q = embeddings.len() / d;
        let start = caches.next_position();
        let mut hidden = embeddings.to_vec();
        let mut layer_kv = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut full_attention = Vec::with_capacity(self.layers.len());
        for layer in 0..self.layers.len() {
            let step = self.layer_forward(layer, &hidden, &caches.layers[layer], start, opts)?;
            hidden = step.hidden;
            layer_kv.push(step.kv);
            attention.push(step.attention);
            full_attention.push(step.full_attention);
        }
        Ok(ChunkOutput {
            layer_kv,
            attention,
            full_attention,
            tail_logits: self.tail_logits(&hidden),
            chunk_len: l_q,
        })
    }

    /// Appends one token at the next layout position and returns its logits.
    pub fn decode_step(
        &self,
        caches: &mut CacheSet<F>,
        token_embedding: &[F],
    ) -> Result<Vec<F>, EngineError> {
        let d = self.config.hidden;
        debug_assert_eq!(token_embedding.len(), d);
        if caches.context_len() == 0 {
            return Err(EngineError::EmptyInput);
        }
        let pos = caches.next_position();
        if pos + 1 > self.config.max_positions {
            return Err(EngineError::Capacity {
                needed: pos + 1,
                max: self.config.max_positions,
            });
        }
        let mut hidden = token_embedding.to_vec();
        for layer in 0..self.layers.len() {
            let step =
                self.layer_forward(layer, &hidden, &caches.layers[layer], pos, &AttnOptions::default())?;
            hidden = step.hidden;
            caches.layers[layer].append_rows(&step.kv.keys, &step.kv.values, &step.kv.positions)?;
        }
        caches.advance(1);
        Ok(self.tail_logits(&hidden))
    }
}

/// Greedy argmax with ties to the lower token id.
pub fn argmax<F: Scalar>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_model, ModelConfig, Precision};
    use crate::rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 8,
            mlp_ratio: 2.0,
            vocab: 16,
            max_positions: 48,
            precision: Precision::F64,
            seed: 5,
        }
    }

    fn small_model() -> Model<f64> {
        Model::new(&init_model(&small_config()).unwrap()).unwrap()
    }

    fn random_embeddings(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n * d).map(|_| rng::gauss(&mut r)).collect()
    }

    #[test]
    fn single_token_prefill_shapes() {
        let model = small_model();
        let emb = random_embeddings(1, 8, 1);
        let (logits, caches) = model.prefill_full(&emb).unwrap();
        assert_eq!(logits.len(), 16);
        assert!(logits.iter().all(|v| v.is_finite()));
        for layer in &caches.layers {
            assert_eq!(layer.len(), 1);
        }
        assert_eq!(caches.next_position(), 1);
    }

    #[test]
    fn chunk_attention_rows_are_softmax_rows() {
        // Empty history: the chunk block is the whole softmax, rows sum to 1.
        let model = small_model();
        let emb = random_embeddings(5, 8, 2);
        let caches = model.empty_cache();
        let out = model
            .prefill_chunk(&emb, &caches, &AttnOptions::default())
            .unwrap();
        for block in &out.attention {
            for idx in 0..2 * 5 {
                let qi = idx % 5;
                let row = &block[idx * 5..(idx + 1) * 5];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                // Causal zeros above the diagonal.
                assert!(row[qi + 1..].iter().all(|p| *p == 0.0));
            }
        }
    }

    #[test]
    fn full_rows_normalize_and_block_is_their_suffix() {
        // History of 5, chunk of 3: softmax rows span 8 keys and sum to 1;
        // the returned block is exactly the chunk-key slice.
        let model = small_model();
        let emb = random_embeddings(8, 8, 3);
        let (_, caches) = model.prefill_full(&emb[..5 * 8]).unwrap();
        let opts = AttnOptions {
            keep_full_attention: true,
            ..Default::default()
        };
        let out = model.prefill_chunk(&emb[5 * 8..], &caches, &opts).unwrap();
        for (block, full) in out.attention.iter().zip(&out.full_attention) {
            let full = full.as_ref().unwrap();
            for idx in 0..2 * 3 {
                let qi = idx % 3;
                let frow = &full[idx * 8..idx * 8 + 5 + qi + 1];
                let sum: f64 = frow.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "full row sum {sum}");
                let brow = &block[idx * 3..idx * 3 + qi + 1];
                assert_eq!(brow, &frow[5..]);
            }
        }
    }

    #[test]
    fn chunked_prefill_matches_full_prefill() {
        let model = small_model();
        let emb = random_embeddings(12, 8, 4);
        let (full_logits, full_caches) = model.prefill_full(&emb).unwrap();

        let mut caches = model.empty_cache();
        let mut tail = Vec::new();
        for chunk in emb.chunks(4 * 8) {
            let out = model
                .prefill_chunk(chunk, &caches, &AttnOptions::default())
                .unwrap();
            caches.append_chunk(&out.layer_kv).unwrap();
            tail = out.tail_logits;
        }
        let full_tail = &full_logits[11 * 16..];
        for (a, b) in tail.iter().zip(full_tail) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
        // Uncompressed chunked caches equal the full-prefill caches.
        for (a, b) in caches.layers.iter().zip(&full_caches.layers) {
            assert_eq!(a.positions(), b.positions());
            for i in 0..a.len() {
                assert_eq!(a.key_row(i), b.key_row(i));
                assert_eq!(a.value_row(i), b.value_row(i));
            }
        }
    }

    #[test]
    fn single_chunk_equals_full_prefill_exactly() {
        let model = small_model();
        let emb = random_embeddings(7, 8, 6);
        let (full_logits, _) = model.prefill_full(&emb).unwrap();
        let caches = model.empty_cache();
        let out = model
            .prefill_chunk(&emb, &caches, &AttnOptions::default())
            .unwrap();
        assert_eq!(out.tail_logits, full_logits[6 * 16..].to_vec());
    }

    #[test]
    fn causality_is_exact() {
        let model = small_model();
        let mut emb = random_embeddings(6, 8, 7);
        let (logits_a, _) = model.prefill_full(&emb).unwrap();
        // Zero the last token's embedding; logits of earlier rows must not
        // move at all.
        for v in &mut emb[5 * 8..] {
            *v = 0.0;
        }
        let (logits_b, _) = model.prefill_full(&emb).unwrap();
        assert_eq!(&logits_a[..5 * 16], &logits_b[..5 * 16]);
    }

    #[test]
    fn decode_matches_teacher_forcing() {
        let model = small_model();
        let emb = random_embeddings(9, 8, 8);
        let (_, mut caches) = model.prefill_full(&emb[..8 * 8]).unwrap();
        let step_logits = model.decode_step(&mut caches, &emb[8 * 8..]).unwrap();
        let (full_logits, _) = model.prefill_full(&emb).unwrap();
        assert_eq!(step_logits, full_logits[8 * 16..].to_vec());
    }

    #[test]
    fn decode_appends_one_row_per_layer() {
        let model = small_model();
        let emb = random_embeddings(3, 8, 9);
        let (_, mut caches) = model.prefill_full(&emb).unwrap();
        let token = model.embed_token(4).unwrap();
        model.decode_step(&mut caches, &token).unwrap();
        for layer in &caches.layers {
            assert_eq!(layer.len(), 4);
            assert_eq!(layer.positions().last(), Some(&3));
        }
        assert_eq!(caches.next_position(), 4);
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let model = small_model();
        let emb = random_embeddings(4, 8, 10);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let (logits, mut caches) = model.prefill_full(&emb).unwrap();
            let mut token = argmax(&logits[3 * 16..]);
            let mut seq = vec![token];
            for _ in 0..5 {
                let e = model.embed_token(token).unwrap();
                let l = model.decode_step(&mut caches, &e).unwrap();
                token = argmax(&l);
                seq.push(token);
            }
            outputs.push(seq);
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn capacity_errors() {
        let model = small_model();
        let emb = random_embeddings(49, 8, 11);
        assert!(matches!(
            model.prefill_full(&emb),
            Err(EngineError::Capacity { needed: 49, max: 48 })
        ));
        let (_, mut caches) = model
            .prefill_full(&random_embeddings(48, 8, 12))
            .unwrap();
        let token = model.embed_token(1).unwrap();
        assert!(matches!(
            model.decode_step(&mut caches, &token),
            Err(EngineError::Capacity { .. })
        ));
    }

    #[test]
    fn stale_cache_position_rejected() {
        let model = small_model();
        let emb = random_embeddings(4, 8, 13);
        let (_, caches) = model.prefill_full(&emb).unwrap();
        // A fresh chunk claiming to start inside the cached range.
        let step = model.layer_forward(0, &emb[..8], &caches.layers[0], 2, &AttnOptions::default());
        assert!(matches!(step, Err(EngineError::PositionOrder(_))));
    }

    #[test]
    fn renormalized_block_rows_sum_to_one() {
        let model = small_model();
        let emb = random_embeddings(6, 8, 14);
        let (_, caches) = model.prefill_full(&emb[..3 * 8]).unwrap();
        let opts = AttnOptions {
            renormalize_block: true,
            ..Default::default()
        };
        let out = model.prefill_chunk(&emb[3 * 8..], &caches, &opts).unwrap();
        for block in &out.attention {
            for idx in 0..2 * 3 {
                let qi = idx % 3;
                let sum: f64 = block[idx * 3..idx * 3 + qi + 1].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }
}
