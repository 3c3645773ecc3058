//! Prefill/compression task scheduling over two execution lanes.
//!
//! Tasks form a DAG per (chunk `i`, layer `l`):
//!
//! * `F[i][l] -> F[i][l+1]` — a chunk moves through layers in order;
//! * `F[i][l] -> C[i][l]`  — compression reads the layer's fresh KV;
//! * `C[i][l] -> F[i+1][l]` — the next chunk's prefill needs the compressed
//!   cache (or `F[i][l] -> F[i+1][l]` when chunk `i` is not compressed).
//!
//! Sequential mode serializes everything on one lane in chunk-major,
//! layer-minor order with each compression right after its prefill. Overlapped
//! mode runs one prefill lane and one compression lane, each FIFO in the same
//! task order, so layer `l`'s compression runs alongside layer `l+1`'s
//! prefill. TTFT is when every task has finished: decoding may only read
//! fully compressed caches.

use serde::{Deserialize, Serialize};

use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Prefill,
    Compress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnits {
    Flops,
    Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub chunk: usize,
    pub layer: usize,
    pub kind: TaskKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timeline {
    pub schema_version: u32,
    pub units: TimeUnits,
    pub events: Vec<TimelineEvent>,
    pub ttft: f64,
    pub tpot: Option<f64>,
}

impl Timeline {
    /// Checks every dependency edge and per-lane exclusivity; returns a
    /// description of the first violation. Works for simulated and measured
    /// timelines alike.
    pub fn verify_dependencies(&self) -> Result<(), String> {
        let find = |chunk: usize, layer: usize, kind: TaskKind| {
            self.events
                .iter()
                .find(|e| e.chunk == chunk && e.layer == layer && e.kind == kind)
        };
        for e in &self.events {
            if e.end < e.start {
                return Err(format!("event {e:?} ends before it starts"));
            }
            match e.kind {
                TaskKind::Prefill => {
                    if e.layer > 0 {
                        let dep = find(e.chunk, e.layer - 1, TaskKind::Prefill)
                            .ok_or_else(|| format!("missing F[{}][{}]", e.chunk, e.layer - 1))?;
                        if e.start < dep.end {
                            return Err(format!("{e:?} starts before {dep:?} ends"));
                        }
                    }
                    if e.chunk > 0 {
                        // Compressed predecessor if present, else its prefill.
                        let dep = find(e.chunk - 1, e.layer, TaskKind::Compress)
                            .or_else(|| find(e.chunk - 1, e.layer, TaskKind::Prefill))
                            .ok_or_else(|| format!("missing predecessor of {e:?}"))?;
                        if e.start < dep.end {
                            return Err(format!("{e:?} starts before {dep:?} ends"));
                        }
                    }
                }
                TaskKind::Compress => {
                    let dep = find(e.chunk, e.layer, TaskKind::Prefill)
                        .ok_or_else(|| format!("missing F[{}][{}]", e.chunk, e.layer))?;
                    if e.start < dep.end {
                        return Err(format!("{e:?} starts before {dep:?} ends"));
                    }
                }
            }
        }
        // No two tasks of the same kind may overlap on their lane.
        for kind in [TaskKind::Prefill, TaskKind::Compress] {
            let mut lane: Vec<&TimelineEvent> =
                self.events.iter().filter(|e| e.kind == kind).collect();
            lane.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
            for pair in lane.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(format!("lane overlap: {:?} and {:?}", pair[0], pair[1]));
                }
            }
        }
        Ok(())
    }
}

/// Per-(chunk, layer) costs; `compress` is `None` for chunks that skip
/// compression (the prompt chunk).
#[derive(Debug, Clone)]
pub struct TaskCosts {
    pub chunks: usize,
    pub layers: usize,
    prefill: Vec<u64>,
    compress: Vec<Option<u64>>,
}

impl TaskCosts {
    pub fn new(chunks: usize, layers: usize) -> Self {
        Self {
            chunks,
            layers,
            prefill: vec![0; chunks * layers],
            compress: vec![None; chunks * layers],
        }
    }

    /// Same prefill and compression cost for every task; handy for worked
    /// examples.
    pub fn uniform(chunks: usize, layers: usize, p: u64, c: Option<u64>) -> Self {
        let mut t = Self::new(chunks, layers);
        for i in 0..chunks {
            for l in 0..layers {
                t.set_prefill(i, l, p);
                if let Some(c) = c {
                    t.set_compress(i, l, c);
                }
            }
        }
        t
    }

    fn idx(&self, chunk: usize, layer: usize) -> usize {
        chunk * self.layers + layer
    }

    pub fn set_prefill(&mut self, chunk: usize, layer: usize, cost: u64) {
        let i = self.idx(chunk, layer);
        self.prefill[i] = cost;
    }

    pub fn set_compress(&mut self, chunk: usize, layer: usize, cost: u64) {
        let i = self.idx(chunk, layer);
        self.compress[i] = Some(cost);
    }

    pub fn prefill(&self, chunk: usize, layer: usize) -> u64 {
        self.prefill[self.idx(chunk, layer)]
    }

    pub fn compress(&self, chunk: usize, layer: usize) -> Option<u64> {
        self.compress[self.idx(chunk, layer)]
    }

    pub fn total_prefill(&self) -> u64 {
        self.prefill.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Sequential,
    Overlapped,
}

/// Simulates the task DAG under the chosen lane discipline; times are in cost
/// units (FLOPs).
pub fn schedule(costs: &TaskCosts, mode: ScheduleMode) -> Timeline {
    let mut events = Vec::with_capacity(costs.chunks * costs.layers * 2);
    match mode {
        ScheduleMode::Sequential => {
            let mut cursor = 0.0f64;
            for chunk in 0..costs.chunks {
                for layer in 0..costs.layers {
                    let p = costs.prefill(chunk, layer) as f64;
                    events.push(TimelineEvent {
                        chunk,
                        layer,
                        kind: TaskKind::Prefill,
                        start: cursor,
                        end: cursor + p,
                    });
                    cursor += p;
                    if let Some(c) = costs.compress(chunk, layer) {
                        events.push(TimelineEvent {
                            chunk,
                            layer,
                            kind: TaskKind::Compress,
                            start: cursor,
                            end: cursor + c as f64,
                        });
                        cursor += c as f64;
                    }
                }
            }
        }
        ScheduleMode::Overlapped => {
            // `ready[l]` is when the previous chunk's layer-l cache became
            // final (compression end, or prefill end when uncompressed).
            let mut ready = vec![0.0f64; costs.layers];
            let mut prev_layer_end = 0.0f64;
            let mut f_lane = 0.0f64;
            let mut c_lane = 0.0f64;
            for chunk in 0..costs.chunks {
                for layer in 0..costs.layers {
                    let mut start = f_lane.max(ready[layer]);
                    if layer > 0 {
                        start = start.max(prev_layer_end);
                    }
                    let end = start + costs.prefill(chunk, layer) as f64;
                    events.push(TimelineEvent {
                        chunk,
                        layer,
                        kind: TaskKind::Prefill,
                        start,
                        end,
                    });
                    f_lane = end;
                    prev_layer_end = end;
                    if let Some(c) = costs.compress(chunk, layer) {
                        let cstart = c_lane.max(end);
                        let cend = cstart + c as f64;
                        events.push(TimelineEvent {
                            chunk,
                            layer,
                            kind: TaskKind::Compress,
                            start: cstart,
                            end: cend,
                        });
                        c_lane = cend;
                        ready[layer] = cend;
                    } else {
                        ready[layer] = end;
                    }
                }
            }
        }
    }
    let ttft = events.iter().fold(0.0f64, |acc, e| acc.max(e.end));
    Timeline {
        schema_version: SCHEMA_VERSION,
        units: TimeUnits::Flops,
        events,
        ttft,
        tpot: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_sequential_6_overlapped_5() {
        // 1 chunk, 2 layers, p = 2, c = 1.
        let costs = TaskCosts::uniform(1, 2, 2, Some(1));
        let seq = schedule(&costs, ScheduleMode::Sequential);
        assert_eq!(seq.ttft, 6.0);
        let ov = schedule(&costs, ScheduleMode::Overlapped);
        assert_eq!(ov.ttft, 5.0);
        seq.verify_dependencies().unwrap();
        ov.verify_dependencies().unwrap();
    }

    #[test]
    fn free_compression_reduces_to_prefill_chain() {
        let costs = TaskCosts::uniform(3, 4, 7, Some(0));
        let ov = schedule(&costs, ScheduleMode::Overlapped);
        assert_eq!(ov.ttft, costs.total_prefill() as f64);
        ov.verify_dependencies().unwrap();
    }

    #[test]
    fn cheap_compression_exposes_only_the_last_task() {
        // c < p: every compression hides behind the next prefill except the
        // final one.
        let costs = TaskCosts::uniform(3, 5, 10, Some(3));
        let ov = schedule(&costs, ScheduleMode::Overlapped);
        assert_eq!(ov.ttft, costs.total_prefill() as f64 + 3.0);
        ov.verify_dependencies().unwrap();
    }

    #[test]
    fn uncompressed_tail_chunk_has_no_compress_events() {
        let mut costs = TaskCosts::new(2, 2);
        for l in 0..2 {
            costs.set_prefill(0, l, 4);
            costs.set_compress(0, l, 1);
            costs.set_prefill(1, l, 2);
        }
        let ov = schedule(&costs, ScheduleMode::Overlapped);
        let compress_events: Vec<_> = ov
            .events
            .iter()
            .filter(|e| e.kind == TaskKind::Compress)
            .collect();
        assert_eq!(compress_events.len(), 2);
        assert!(compress_events.iter().all(|e| e.chunk == 0));
        ov.verify_dependencies().unwrap();
    }

    #[test]
    fn verifier_catches_violations() {
        let costs = TaskCosts::uniform(2, 2, 2, Some(1));
        let mut tl = schedule(&costs, ScheduleMode::Overlapped);
        // Pull a second-layer prefill before its first-layer dependency ends.
        let idx = tl
            .events
            .iter()
            .position(|e| e.layer == 1 && e.kind == TaskKind::Prefill)
            .unwrap();
        tl.events[idx].start = 0.0;
        assert!(tl.verify_dependencies().is_err());
    }
}
