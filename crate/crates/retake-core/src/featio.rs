//! Frame-feature tensors: synthetic scene-structured generation and RTKF
//! file I/O.
//!
//! A generated video is a sequence of scenes. Each scene has one unit-norm
//! base vector per token position; frames inside the scene are that base plus
//! i.i.d. Gaussian noise. Bases for the same token position are
//! Gram-Schmidt-orthogonalized across scenes, so with zero noise the
//! inter-frame cosine distance is exactly 0 inside a scene and exactly 1 at a
//! scene boundary (as long as the feature dimension is at least the number of
//! scenes). That makes boundary frames analytically known ground truth for
//! keyframe selection.
//!
//! RTKF layout (all little-endian):
//!
//! ```text
//! offset 0   magic "RTKF" (52 54 4B 46)
//! offset 4   version u16 (= 1)
//! offset 6   frame count T   u64
//! offset 14  tokens/frame N  u64
//! offset 22  feature dim d   u64
//! offset 30  fps             f64
//! offset 38  payload         T·N·d f32, frame-major then token then component
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

use crate::fileio::{checked_mul, to_count, FormatError, Reader, Writer};
use crate::rng;

pub const RTKF_MAGIC: [u8; 4] = *b"RTKF";
pub const RTKF_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid frame features: {0}")]
    InvalidFeatures(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A video feature tensor of `frame_count` frames, each holding
/// `tokens_per_frame` tokens of dimension `dim`. Frame-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub data: Vec<f32>,
    pub frame_count: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub fps: f64,
    pub source_id: String,
}

impl FrameFeatures {
    pub fn validate(&self) -> Result<(), FeatError> {
        if self.frame_count == 0 || self.tokens_per_frame == 0 || self.dim == 0 {
            return Err(FeatError::InvalidFeatures(
                "frame_count, tokens_per_frame and dim must all be positive".into(),
            ));
        }
        let expect = self
            .frame_count
            .checked_mul(self.tokens_per_frame)
            .and_then(|x| x.checked_mul(self.dim))
            .ok_or_else(|| FeatError::InvalidFeatures("element count overflows".into()))?;
        if self.data.len() != expect {
            return Err(FeatError::InvalidFeatures(format!(
                "data holds {} values, expected {}",
                self.data.len(),
                expect
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(FeatError::InvalidFeatures("fps must be positive".into()));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(FeatError::InvalidFeatures(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(())
    }

    /// All tokens of frame `t`, as one `tokens_per_frame · dim` slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let w = self.tokens_per_frame * self.dim;
        &self.data[t * w..(t + 1) * w]
    }

    /// Token `j` of frame `t`.
    pub fn token(&self, t: usize, j: usize) -> &[f32] {
        let start = (t * self.tokens_per_frame + j) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn total_tokens(&self) -> usize {
        self.frame_count * self.tokens_per_frame
    }
}

/// Recipe for a synthetic scene-structured video.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Frames per scene; the generated video has `sum(scene_lengths)` frames.
    pub scene_lengths: Vec<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub tokens_per_frame: usize,
    pub dim: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), FeatError> {
        if self.scene_lengths.is_empty() {
            return Err(FeatError::InvalidSpec("scene_lengths is empty".into()));
        }
        if self.scene_lengths.iter().any(|&l| l == 0) {
            return Err(FeatError::InvalidSpec("scene length of zero".into()));
        }
        if self.tokens_per_frame == 0 || self.dim == 0 {
            return Err(FeatError::InvalidSpec(
                "tokens_per_frame and dim must be positive".into(),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(FeatError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        // Keep within-scene distances (~ sigma²·d) well below the boundary
        // distance of 1 so ground-truth boundaries stay recoverable.
        if self.noise_sigma * (self.dim as f64).sqrt() > 0.5 {
            return Err(FeatError::InvalidSpec(format!(
                "noise_sigma {} too large for dim {}: sigma·sqrt(d) must be <= 0.5",
                self.noise_sigma, self.dim
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.scene_lengths.iter().sum()
    }
}

/// Generates a scene-structured video. Pure function of the spec: the same
/// spec always yields the same tensor.
pub fn generate_scene_video(spec: &SceneSpec) -> Result<FrameFeatures, FeatError> {
    spec.validate()?;
    let scenes = spec.scene_lengths.len();
    let n = spec.tokens_per_frame;
    let d = spec.dim;
    let t_total = spec.frame_count();
    let mut rng = rng::seeded(spec.seed);

    // One base per (token position, scene), orthogonalized across scenes.
    // Draw order is fixed: token-major, scene-minor.
    let mut bases = vec![0.0f64; n * scenes * d];
    for j in 0..n {
        for s in 0..scenes {
            let start = (j * scenes + s) * d;
            for c in 0..d {
                bases[start + c] = rng::gauss(&mut rng);
            }
            // Gram-Schmidt against this token position's earlier scenes.
            for prev in 0..s {
                let pstart = (j * scenes + prev) * d;
                let mut proj = 0.0;
                for c in 0..d {
                    proj += bases[start + c] * bases[pstart + c];
                }
                for c in 0..d {
                    bases[start + c] -= proj * bases[pstart + c];
                }
            }
            let norm: f64 = bases[start..start + d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                // Exhausted dimensions (d < number of scenes): fall back to the
                // raw draw so the vector stays usable; orthogonality to earlier
                // scenes is only guaranteed while d >= scenes.
                for c in 0..d {
                    bases[start + c] = rng::gauss(&mut rng);
                }
                let raw: f64 = bases[start..start + d].iter().map(|v| v * v).sum::<f64>().sqrt();
                for c in 0..d {
                    bases[start + c] /= raw.max(1e-30);
                }
            } else {
                for c in 0..d {
                    bases[start + c] /= norm;
                }
            }
        }
    }

    // Frames: base of the owning scene plus sigma-scaled noise, frame-major.
    let mut data = Vec::with_capacity(t_total * n * d);
    for (s, &len) in spec.scene_lengths.iter().enumerate() {
        for _ in 0..len {
            for j in 0..n {
                let start = (j * scenes + s) * d;
                for c in 0..d {
                    let noise = spec.noise_sigma * rng::gauss(&mut rng);
                    data.push((bases[start + c] + noise) as f32);
                }
            }
        }
    }

    let features = FrameFeatures {
        data,
        frame_count: t_total,
        tokens_per_frame: n,
        dim: d,
        fps: 1.0,
        source_id: format!("scene-video(seed={})", spec.seed),
    };
    features.validate()?;
    Ok(features)
}

pub fn write_features<P: AsRef<Path>>(f: &FrameFeatures, path: P) -> Result<(), FeatError> {
    f.validate()?;
    let file = File::create(path).map_err(FormatError::from)?;
    let mut w = Writer::new(BufWriter::new(file));
    w.magic(RTKF_MAGIC)?;
    w.u16_le(RTKF_VERSION)?;
    w.u64_le(f.frame_count as u64)?;
    w.u64_le(f.tokens_per_frame as u64)?;
    w.u64_le(f.dim as u64)?;
    w.f64_le(f.fps)?;
    w.f32_slice(&f.data)?;
    w.finish()?;
    Ok(())
}

pub fn read_features<P: AsRef<Path>>(path: P) -> Result<FrameFeatures, FeatError> {
    let file = File::open(path).map_err(FormatError::from)?;
    let mut r = Reader::new(BufReader::new(file));
    r.expect_magic(RTKF_MAGIC)?;
    let ver_at = r.offset();
    let version = r.u16_le()?;
    if version != RTKF_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: ver_at,
            version,
        }
        .into());
    }
    let dims_at = r.offset();
    let t = r.u64_le()?;
    let n = r.u64_le()?;
    let d = r.u64_le()?;
    if t == 0 || n == 0 || d == 0 {
        return Err(FormatError::InvalidField {
            offset: dims_at,
            what: format!("dimensions must be positive, got T={t} N={n} d={d}"),
        }
        .into());
    }
    let count = checked_mul(checked_mul(t, n, dims_at, "T·N")?, d, dims_at, "T·N·d")?;
    let count = to_count(count, dims_at, "payload element count")?;
    // Guard the byte size too so Vec allocation cannot overflow.
    checked_mul(count as u64, 4, dims_at, "payload byte size")?;
    let fps_at = r.offset();
    let fps = r.f64_le()?;
    if !(fps.is_finite() && fps > 0.0) {
        return Err(FormatError::InvalidField {
            offset: fps_at,
            what: format!("fps must be positive, got {fps}"),
        }
        .into());
    }
    let data = r.f32_vec(count)?;
    r.expect_eof()?;
    let features = FrameFeatures {
        data,
        frame_count: t as usize,
        tokens_per_frame: n as usize,
        dim: d as usize,
        fps,
        source_id: String::new(),
    };
    features.validate()?;
    Ok(features)
}
