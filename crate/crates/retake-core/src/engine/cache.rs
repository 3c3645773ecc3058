//! Per-layer KV cache with original-position bookkeeping.
//!
//! Rows are stored token-major (`[len × hidden]`, heads interleaved inside a
//! row), so appending a chunk or a subset of its tokens is a plain row copy.
//! `positions` carries the original layout position of every retained row and
//! must stay strictly increasing; compression never renumbers survivors.

use crate::scalar::Scalar;

use super::EngineError;

/// Key/value rows a single prefilled chunk produced for one layer, before any
/// compression.
#[derive(Debug, Clone)]
pub struct ChunkKv<F> {
    pub keys: Vec<F>,
    pub values: Vec<F>,
    pub positions: Vec<usize>,
    pub dim: usize,
}

impl<F: Scalar> ChunkKv<F> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn key_row(&self, i: usize) -> &[F] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value_row(&self, i: usize) -> &[F] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct LayerKvCache<F> {
    keys: Vec<F>,
    values: Vec<F>,
    positions: Vec<usize>,
    dim: usize,
}

impl<F: Scalar> LayerKvCache<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    pub fn key_row(&self, i: usize) -> &[F] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value_row(&self, i: usize) -> &[F] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends already-ordered rows; positions must continue strictly
    /// increasing past the current tail.
    pub fn append_rows(
        &mut self,
        keys: &[F],
        values: &[F],
        positions: &[usize],
    ) -> Result<(), EngineError> {
        debug_assert_eq!(keys.len(), positions.len() * self.dim);
        debug_assert_eq!(values.len(), positions.len() * self.dim);
        let mut last = self.last_position();
        for &p in positions {
            if let Some(prev) = last {
                if p <= prev {
                    return Err(EngineError::PositionOrder(format!(
                        "appending position {p} after {prev}"
                    )));
                }
            }
            last = Some(p);
        }
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        self.positions.extend_from_slice(positions);
        Ok(())
    }
}

/// All layers' caches plus the layout cursor: the next original position to
/// assign. The cursor advances by the full (uncompressed) chunk length even
/// when compression keeps fewer rows.
#[derive(Debug, Clone)]
pub struct CacheSet<F> {
    pub layers: Vec<LayerKvCache<F>>,
    next_position: usize,
}

impl<F: Scalar> CacheSet<F> {
    pub fn new(layers: usize, dim: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerKvCache::new(dim)).collect(),
            next_position: 0,
        }
    }

    /// Reassembles a cache set from externally built layers (the pipelined
    /// executor hands layers between workers).
    pub fn from_layers(layers: Vec<LayerKvCache<F>>, next_position: usize) -> Self {
        Self {
            layers,
            next_position,
        }
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn advance(&mut self, by: usize) {
        self.next_position += by;
    }

    /// Retained rows in layer 0; layers always shrink in lockstep under the
    /// per-chunk budget, so this is the context length.
    pub fn context_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn per_layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    /// Appends a whole uncompressed chunk (the prompt path) and advances the
    /// cursor by its length.
    pub fn append_chunk(&mut self, chunk: &[ChunkKv<F>]) -> Result<(), EngineError> {
        debug_assert_eq!(chunk.len(), self.layers.len());
        let len = chunk.first().map_or(0, ChunkKv::len);
        for (layer, ck) in self.layers.iter_mut().zip(chunk) {
            layer.append_rows(&ck.keys, &ck.values, &ck.positions)?;
        }
        self.advance(len);
        Ok(())
    }
}
