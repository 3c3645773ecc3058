//! Keyframe selection at inter-frame distance peaks.
//!
//! Selection runs in three steps over the token-averaged cosine distance
//! between adjacent frames: find local maxima of the distance sequence with a
//! clipped max-pool window (pivots), top the set up to the frame budget with
//! the highest remaining distances, then gather the chosen frames and mark
//! which of their tokens came from pivot frames.
//!
//! Index conventions, fixed here once:
//! * distance index `i` measures frames `i -> i+1` and designates frame `i+1`
//!   as the candidate, since that frame carries the new content;
//! * the frame budget is `k = max(1, floor(alpha_dp · T))`;
//! * all ties break toward the lower index;
//! * frame 0 has no incoming distance and is only selected through the padding
//!   rule when the candidate pool (frames 1..T-1) is smaller than `k`.

use thiserror::Error;

use crate::featio::FrameFeatures;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("need at least 2 frames to compute inter-frame distances, got {0}")]
    TooFewFrames(usize),
    #[error("zero-norm token vector at frame {frame}, token {token}")]
    DegenerateFeature { frame: usize, token: usize },
    #[error("alpha_dp must be in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("max-pool window must be odd and >= 1, got {0}")]
    InvalidWindow(usize),
}

/// Output of the selection pipeline.
#[derive(Debug, Clone)]
pub struct KeyframeSelection {
    /// Selected frame indices, ascending and unique.
    pub keyframes: Vec<usize>,
    /// Pivot frames (distance peaks); subset of `keyframes`.
    pub pivots: Vec<usize>,
    /// Per-token pivot mask over the compressed sequence, length `|K|·N`.
    pub pivot_mask: Vec<bool>,
    /// Rows of the input gathered at `keyframes`, flattened to `|K|·N × d`.
    pub compressed: Vec<f32>,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub alpha_dp: f64,
}

impl KeyframeSelection {
    pub fn selected_tokens(&self) -> usize {
        self.keyframes.len() * self.tokens_per_frame
    }

    /// Token row `i` of the compressed sequence.
    pub fn token_row(&self, i: usize) -> &[f32] {
        &self.compressed[i * self.dim..(i + 1) * self.dim]
    }
}

/// Token-averaged cosine distance between adjacent frames; entry `i` compares
/// frames `i` and `i+1`. Distances are computed in f64 through the equivalent
/// form `1 - cos(a, b) = |a/|a| - b/|b||² / 2`, which is exactly 0 for
/// bit-identical tokens and never rounds negative.
pub fn frame_distances(m: &FrameFeatures) -> Result<Vec<f64>, DpError> {
    if m.frame_count < 2 {
        return Err(DpError::TooFewFrames(m.frame_count));
    }
    let norms = token_norms(m)?;
    let n = m.tokens_per_frame;
    let mut out = vec![0.0f64; m.frame_count - 1];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            let a = m.token(i, j);
            let b = m.token(i + 1, j);
            let (na, nb) = (norms[i * n + j], norms[(i + 1) * n + j]);
            let diff_sq: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let e = *x as f64 / na - *y as f64 / nb;
                    e * e
                })
                .sum();
            acc += diff_sq / 2.0;
        }
        *slot = acc / n as f64;
    }
    Ok(out)
}

fn token_norms(m: &FrameFeatures) -> Result<Vec<f64>, DpError> {
    let n = m.tokens_per_frame;
    let mut norms = vec![0.0f64; m.frame_count * n];
    for t in 0..m.frame_count {
        for j in 0..n {
            let norm: f64 = m.token(t, j).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(DpError::DegenerateFeature { frame: t, token: j });
            }
            norms[t * n + j] = norm;
        }
    }
    Ok(norms)
}

/// Distance indices that lead their own max-pool window: `i` is a pivot iff
/// the first window position attaining the window maximum is `i` itself.
/// Windows of half-width `w/2` are clipped at the sequence ends.
pub fn find_pivots(distances: &[f64], window: usize) -> Result<Vec<usize>, DpError> {
    if window == 0 || window % 2 == 0 {
        return Err(DpError::InvalidWindow(window));
    }
    let n = distances.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = window / 2;
    let mut pivots = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let mut arg = lo;
        for j in lo + 1..=hi {
            if distances[j] > distances[arg] {
                arg = j;
            }
        }
        if arg == i {
            pivots.push(i);
        }
    }
    Ok(pivots)
}

/// Fills the frame budget from the pivot set, topping up (or trimming) by
/// distance. Returns `(keyframes, pivot_frames)`, both ascending.
pub fn select_keyframes(
    distances: &[f64],
    pivots: &[usize],
    alpha_dp: f64,
    frame_count: usize,
) -> Result<(Vec<usize>, Vec<usize>), DpError> {
    if !(alpha_dp > 0.0 && alpha_dp <= 1.0) {
        return Err(DpError::InvalidAlpha(alpha_dp));
    }
    let k = frame_budget(alpha_dp, frame_count);
    let mut pivots = pivots.to_vec();
    pivots.sort_unstable();
    pivots.dedup();
    let is_pivot = |i: usize| pivots.binary_search(&i).is_ok();

    let mut chosen: Vec<usize>; // distance indices
    let pivot_frames: Vec<usize>;
    if pivots.len() <= k {
        chosen = pivots.to_vec();
        let mut rest: Vec<usize> = (0..distances.len()).filter(|i| !is_pivot(*i)).collect();
        // Highest distance first, ties to the lower index.
        rest.sort_by(|a, b| {
            distances[*b]
                .partial_cmp(&distances[*a])
                .unwrap()
                .then(a.cmp(b))
        });
        chosen.extend(rest.into_iter().take(k - pivots.len()));
        pivot_frames = pivots.iter().map(|i| i + 1).collect();
    } else {
        // Budget smaller than the pivot set: keep the k strongest pivots.
        let mut ranked = pivots.to_vec();
        ranked.sort_by(|a, b| {
            distances[*b]
                .partial_cmp(&distances[*a])
                .unwrap()
                .then(a.cmp(b))
        });
        ranked.truncate(k);
        ranked.sort_unstable();
        chosen = ranked;
        pivot_frames = chosen.iter().map(|i| i + 1).collect();
    }

    chosen.sort_unstable();
    let mut keyframes: Vec<usize> = chosen.iter().map(|i| i + 1).collect();
    if keyframes.len() < k {
        // Candidate pool exhausted; frame 0 is the only frame without an
        // incoming distance.
        keyframes.insert(0, 0);
    }
    debug_assert_eq!(keyframes.len(), k);
    Ok((keyframes, pivot_frames))
}

/// `max(1, floor(alpha_dp · T))`; the floor keeps the context budget an upper
/// bound.
pub fn frame_budget(alpha_dp: f64, frame_count: usize) -> usize {
    ((alpha_dp * frame_count as f64).floor() as usize).max(1)
}

/// Full selection pipeline: distances, pivots, budget fill, gather and mask.
/// A single-frame video degenerates to keeping frame 0 as a pivot.
pub fn dpselect(
    m: &FrameFeatures,
    alpha_dp: f64,
    window: usize,
) -> Result<KeyframeSelection, DpError> {
    if !(alpha_dp > 0.0 && alpha_dp <= 1.0) {
        return Err(DpError::InvalidAlpha(alpha_dp));
    }
    if window == 0 || window % 2 == 0 {
        return Err(DpError::InvalidWindow(window));
    }
    let (keyframes, pivots) = if m.frame_count == 1 {
        (vec![0], vec![0])
    } else {
        let distances = frame_distances(m)?;
        let peak_indices = find_pivots(&distances, window)?;
        select_keyframes(&distances, &peak_indices, alpha_dp, m.frame_count)?
    };

    let n = m.tokens_per_frame;
    let mut compressed = Vec::with_capacity(keyframes.len() * n * m.dim);
    let mut pivot_mask = Vec::with_capacity(keyframes.len() * n);
    for &frame in &keyframes {
        compressed.extend_from_slice(m.frame(frame));
        let is_pivot = pivots.binary_search(&frame).is_ok();
        pivot_mask.extend(std::iter::repeat(is_pivot).take(n));
    }
    Ok(KeyframeSelection {
        keyframes,
        pivots,
        pivot_mask,
        compressed,
        tokens_per_frame: n,
        dim: m.dim,
        alpha_dp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::{generate_scene_video, SceneSpec};

    fn features_from_frames(frames: &[&[f32]], n: usize, d: usize) -> FrameFeatures {
        let mut data = Vec::new();
        for f in frames {
            data.extend_from_slice(f);
        }
        FrameFeatures {
            data,
            frame_count: frames.len(),
            tokens_per_frame: n,
            dim: d,
            fps: 1.0,
            source_id: "test".into(),
        }
    }

    // Sliding-window argmax oracle for find_pivots.
    fn pivot_oracle(d: &[f64], w: usize) -> Vec<usize> {
        let half = w / 2;
        (0..d.len())
            .filter(|&i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(d.len() - 1);
                let max = (lo..=hi).map(|j| d[j]).fold(f64::NEG_INFINITY, f64::max);
                (lo..=hi).find(|&j| d[j] == max) == Some(i)
            })
            .collect()
    }

    #[test]
    fn distances_on_orthogonal_then_identical_frames() {
        let f = features_from_frames(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], 1, 2);
        let d = frame_distances(&f).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn identical_frames_give_zero_distances() {
        let f = features_from_frames(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]], 1, 2);
        let d = frame_distances(&f).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scene_video_distance_peaks_match_oracle() {
        let spec = SceneSpec {
            scene_lengths: vec![4, 2, 4],
            noise_sigma: 0.01,
            seed: 1,
            tokens_per_frame: 2,
            dim: 8,
        };
        let f = generate_scene_video(&spec).unwrap();
        let d = frame_distances(&f).unwrap();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|a, b| d[*b].partial_cmp(&d[*a]).unwrap());
        let mut top2 = vec![order[0], order[1]];
        top2.sort();
        assert_eq!(top2, vec![3, 5]);
    }

    #[test]
    fn zero_norm_token_is_degenerate() {
        let f = features_from_frames(&[&[0.0, 0.0], &[1.0, 0.0]], 1, 2);
        assert!(matches!(
            frame_distances(&f),
            Err(DpError::DegenerateFeature { frame: 0, token: 0 })
        ));
    }

    #[test]
    fn single_frame_has_no_distances() {
        let f = features_from_frames(&[&[1.0, 0.0]], 1, 2);
        assert!(matches!(frame_distances(&f), Err(DpError::TooFewFrames(1))));
    }

    #[test]
    fn pivots_on_worked_example() {
        let d = [0.1, 0.5, 0.2, 0.4, 0.3];
        assert_eq!(find_pivots(&d, 3).unwrap(), vec![1, 3]);
        assert_eq!(pivot_oracle(&d, 3), vec![1, 3]);
    }

    #[test]
    fn constant_plateau_keeps_first_index_only() {
        let d = [0.7; 6];
        let got = find_pivots(&d, 3).unwrap();
        assert_eq!(got, pivot_oracle(&d, 3));
        assert_eq!(got, vec![0]);
    }

    #[test]
    fn strictly_increasing_keeps_last_index_only() {
        let d = [0.1, 0.2, 0.3, 0.4];
        let got = find_pivots(&d, 3).unwrap();
        assert_eq!(got, vec![d.len() - 1]);
        assert_eq!(got, pivot_oracle(&d, 3));
    }

    #[test]
    fn pivots_match_oracle_on_random_inputs() {
        let mut rng = crate::rng::seeded(17);
        for case in 0..200 {
            let len = 1 + case % 17;
            let d: Vec<f64> = (0..len).map(|_| crate::rng::gauss(&mut rng).abs()).collect();
            for w in [1usize, 3, 5] {
                assert_eq!(
                    find_pivots(&d, w).unwrap(),
                    pivot_oracle(&d, w),
                    "len={len} w={w}"
                );
            }
        }
    }

    #[test]
    fn even_window_rejected() {
        assert!(matches!(find_pivots(&[0.1], 2), Err(DpError::InvalidWindow(2))));
    }

    #[test]
    fn worked_selection_example() {
        // T=5, pivots at distance indices {1,3} -> pivot frames {2,4};
        // budget k=4 tops up with distance indices {0,2} -> frames {1,3}.
        let d = [0.1, 0.5, 0.2, 0.4];
        let (k, p) = select_keyframes(&d, &[1, 3], 0.8, 5).unwrap();
        assert_eq!(k, vec![1, 2, 3, 4]);
        assert_eq!(p, vec![2, 4]);
    }

    #[test]
    fn alpha_one_selects_every_frame() {
        let d = [0.3, 0.1, 0.2];
        let pivots = find_pivots(&d, 3).unwrap();
        let (k, p) = select_keyframes(&d, &pivots, 1.0, 4).unwrap();
        assert_eq!(k, vec![0, 1, 2, 3]);
        assert_eq!(p, pivots.iter().map(|i| i + 1).collect::<Vec<_>>());
    }

    #[test]
    fn pivots_filling_budget_exactly_become_the_selection() {
        let d = [0.9, 0.1, 0.8, 0.1];
        // pivots at 0 and 2; k = floor(0.5·5) = 2.
        let (k, p) = select_keyframes(&d, &[0, 2], 0.5, 5).unwrap();
        assert_eq!(k, vec![1, 3]);
        assert_eq!(p, vec![1, 3]);
    }

    #[test]
    fn pivot_overflow_keeps_strongest_by_distance() {
        let d = [0.5, 0.9, 0.2, 0.7];
        // Four pivot candidates but budget 2: keep distance indices 1 and 3.
        let (k, p) = select_keyframes(&d, &[0, 1, 2, 3], 0.4, 5).unwrap();
        assert_eq!(k, vec![2, 4]);
        assert_eq!(p, vec![2, 4]);
    }

    #[test]
    fn dpselect_marks_boundary_as_pivot() {
        let spec = SceneSpec {
            scene_lengths: vec![3, 3],
            noise_sigma: 0.0,
            seed: 7,
            tokens_per_frame: 2,
            dim: 4,
        };
        let f = generate_scene_video(&spec).unwrap();
        let sel = dpselect(&f, 0.5, 3).unwrap();
        // Boundary frame 3 (first frame of scene 2) is a pivot.
        assert!(sel.pivots.contains(&3));
        assert_eq!(sel.keyframes.len(), 3);
        let marked = sel.pivot_mask.iter().filter(|b| **b).count();
        assert_eq!(marked, sel.pivots.len() * f.tokens_per_frame);
    }

    #[test]
    fn alpha_one_is_lossless_gather() {
        let spec = SceneSpec {
            scene_lengths: vec![2, 2],
            noise_sigma: 0.05,
            seed: 13,
            tokens_per_frame: 2,
            dim: 4,
        };
        let f = generate_scene_video(&spec).unwrap();
        let sel = dpselect(&f, 1.0, 3).unwrap();
        assert_eq!(sel.keyframes, vec![0, 1, 2, 3]);
        assert_eq!(sel.compressed, f.data);
    }

    #[test]
    fn single_frame_video_keeps_frame_zero_as_pivot() {
        let f = features_from_frames(&[&[1.0, 2.0]], 1, 2);
        let sel = dpselect(&f, 0.3, 3).unwrap();
        assert_eq!(sel.keyframes, vec![0]);
        assert_eq!(sel.pivots, vec![0]);
        assert_eq!(sel.pivot_mask, vec![true]);
    }

    #[test]
    fn budget_invariant_holds() {
        let spec = SceneSpec {
            scene_lengths: vec![5, 4, 6],
            noise_sigma: 0.02,
            seed: 21,
            tokens_per_frame: 1,
            dim: 8,
        };
        let f = generate_scene_video(&spec).unwrap();
        for alpha in [0.07, 0.2, 0.33, 0.5, 0.75, 1.0] {
            let sel = dpselect(&f, alpha, 3).unwrap();
            assert_eq!(sel.keyframes.len(), frame_budget(alpha, f.frame_count));
            // P subset of K, mask count = |P|·N.
            for p in &sel.pivots {
                assert!(sel.keyframes.contains(p));
            }
        }
    }

    #[test]
    fn reversal_mirrors_distances_and_selection_indices() {
        let spec = SceneSpec {
            scene_lengths: vec![3, 4, 2],
            noise_sigma: 0.03,
            seed: 31,
            tokens_per_frame: 2,
            dim: 8,
        };
        let f = generate_scene_video(&spec).unwrap();
        let mut rev = f.clone();
        let w = f.tokens_per_frame * f.dim;
        rev.data = (0..f.frame_count)
            .rev()
            .flat_map(|t| f.data[t * w..(t + 1) * w].to_vec())
            .collect();

        let d = frame_distances(&f).unwrap();
        let dr = frame_distances(&rev).unwrap();
        let mirrored: Vec<f64> = d.iter().rev().copied().collect();
        for (a, b) in dr.iter().zip(&mirrored) {
            assert!((a - b).abs() < 1e-12);
        }

        // Distinct distances only: noise makes ties measure-zero; selection at
        // the distance-index level mirrors.
        let n = d.len();
        let pv = find_pivots(&d, 3).unwrap();
        let pv_rev = find_pivots(&dr, 3).unwrap();
        let mirrored_pivots: Vec<usize> = pv.iter().rev().map(|i| n - 1 - i).collect();
        assert_eq!(pv_rev, mirrored_pivots);

        let (kf, _) = select_keyframes(&d, &pv, 0.5, f.frame_count).unwrap();
        let (kf_rev, _) = select_keyframes(&dr, &pv_rev, 0.5, f.frame_count).unwrap();
        let chosen: Vec<usize> = kf.iter().map(|f| f - 1).collect();
        let chosen_rev: Vec<usize> = kf_rev.iter().map(|f| f - 1).collect();
        let mirrored_chosen: Vec<usize> = chosen.iter().rev().map(|i| n - 1 - i).collect();
        assert_eq!(chosen_rev, mirrored_chosen);
    }
}
