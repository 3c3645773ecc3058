//! Weight initialization and the RTKW weight file.
//!
//! All parameter tensors are drawn from the seeded generator as
//! `N(0, 1) / sqrt(hidden)` values, materialized as f32. Draw order (also the
//! tensor order in RTKW): embedding `[vocab × hidden]`, then per layer
//! attn_norm `[hidden]`, wq/wk/wv/wo `[hidden × hidden]`, mlp_norm `[hidden]`,
//! fc1 `[mlp_hidden × hidden]`, fc2 `[hidden × mlp_hidden]`, then final_norm
//! `[hidden]` and unembedding `[vocab × hidden]`. Matrices are row-major
//! `[out × in]`.
//!
//! RTKW layout (little-endian):
//!
//! ```text
//! offset 0   magic "RTKW" (52 54 4B 57)
//! offset 4   version u16 (= 1)
//! offset 6   layers u64
//! offset 14  heads u64
//! offset 22  hidden u64
//! offset 30  mlp_ratio f64
//! offset 38  vocab u64
//! offset 46  max_positions u64
//! offset 54  precision u8 (0 = f32, 1 = f64)
//! offset 55  seed u64
//! offset 63  tensors, f32 each, in draw order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::fileio::{FormatError, Reader, Writer};
use crate::rng;

use super::{EngineError, ModelConfig, Precision, RTKW_MAGIC, RTKW_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub fc1: Vec<f32>,
    pub fc2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub unembed: Vec<f32>,
}

/// Deterministically initializes weights from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights, EngineError> {
    config.validate()?;
    let d = config.hidden;
    let mh = config.mlp_hidden();
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = rng::seeded(config.seed);
    let mut draw = |count: usize| -> Vec<f32> {
        (0..count).map(|_| (rng::gauss(&mut rng) * scale) as f32).collect()
    };

    let embed = draw(config.vocab * d);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            attn_norm: draw(d),
            wq: draw(d * d),
            wk: draw(d * d),
            wv: draw(d * d),
            wo: draw(d * d),
            mlp_norm: draw(d),
            fc1: draw(mh * d),
            fc2: draw(d * mh),
        })
        .collect();
    let final_norm = draw(d);
    let unembed = draw(config.vocab * d);
    Ok(ModelWeights {
        config: config.clone(),
        embed,
        layers,
        final_norm,
        unembed,
    })
}

pub fn write_weights<P: AsRef<Path>>(w: &ModelWeights, path: P) -> Result<(), EngineError> {
    w.config.validate()?;
    let file = File::create(path).map_err(FormatError::from)?;
    let mut out = Writer::new(BufWriter::new(file));
    out.magic(RTKW_MAGIC)?;
    out.u16_le(RTKW_VERSION)?;
    out.u64_le(w.config.layers as u64)?;
    out.u64_le(w.config.heads as u64)?;
    out.u64_le(w.config.hidden as u64)?;
    out.f64_le(w.config.mlp_ratio)?;
    out.u64_le(w.config.vocab as u64)?;
    out.u64_le(w.config.max_positions as u64)?;
    out.u8(match w.config.precision {
        Precision::F32 => 0,
        Precision::F64 => 1,
    })?;
    out.u64_le(w.config.seed)?;
    out.f32_slice(&w.embed)?;
    for layer in &w.layers {
        out.f32_slice(&layer.attn_norm)?;
        out.f32_slice(&layer.wq)?;
        out.f32_slice(&layer.wk)?;
        out.f32_slice(&layer.wv)?;
        out.f32_slice(&layer.wo)?;
        out.f32_slice(&layer.mlp_norm)?;
        out.f32_slice(&layer.fc1)?;
        out.f32_slice(&layer.fc2)?;
    }
    out.f32_slice(&w.final_norm)?;
    out.f32_slice(&w.unembed)?;
    out.finish()?;
    Ok(())
}

pub fn read_weights<P: AsRef<Path>>(path: P) -> Result<ModelWeights, EngineError> {
    let file = File::open(path).map_err(FormatError::from)?;
    let mut r = Reader::new(BufReader::new(file));
    r.expect_magic(RTKW_MAGIC)?;
    let ver_at = r.offset();
    let version = r.u16_le()?;
    if version != RTKW_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: ver_at,
            version,
        }
        .into());
    }
    let header_at = r.offset();
    let layers = r.u64_le()?;
    let heads = r.u64_le()?;
    let hidden = r.u64_le()?;
    let mlp_ratio = r.f64_le()?;
    let vocab = r.u64_le()?;
    let max_positions = r.u64_le()?;
    let precision_at = r.offset();
    let precision = match r.u8()? {
        0 => Precision::F32,
        1 => Precision::F64,
        other => {
            return Err(FormatError::InvalidField {
                offset: precision_at,
                what: format!("unknown precision tag {other}"),
            }
            .into())
        }
    };
    let seed = r.u64_le()?;

    let as_dim = |v: u64, what: &str| -> Result<usize, EngineError> {
        usize::try_from(v)
            .ok()
            .filter(|x| *x <= (1 << 32))
            .ok_or_else(|| {
                EngineError::Format(FormatError::DimensionOverflow {
                    offset: header_at,
                    what: what.to_string(),
                })
            })
    };
    let config = ModelConfig {
        layers: as_dim(layers, "layers")?,
        heads: as_dim(heads, "heads")?,
        hidden: as_dim(hidden, "hidden")?,
        mlp_ratio,
        vocab: as_dim(vocab, "vocab")?,
        max_positions: as_dim(max_positions, "max_positions")?,
        precision,
        seed,
    };
    config.validate()?;
    let d = config.hidden;
    let mh = config.mlp_hidden();
    // Reject configs whose tensors could not be addressed before allocating.
    let per_layer = 2 * d as u64 + 4 * (d as u64 * d as u64) + 2 * (mh as u64 * d as u64);
    let total = 2 * (config.vocab as u64 * d as u64)
        + d as u64
        + config.layers as u64 * per_layer;
    if total > (1 << 40) {
        return Err(FormatError::DimensionOverflow {
            offset: header_at,
            what: format!("total parameter count {total}"),
        }
        .into());
    }

    let embed = r.f32_vec(config.vocab * d)?;
    let layers = (0..config.layers)
        .map(|_| -> Result<LayerWeights, EngineError> {
            Ok(LayerWeights {
                attn_norm: r.f32_vec(d)?,
                wq: r.f32_vec(d * d)?,
                wk: r.f32_vec(d * d)?,
                wv: r.f32_vec(d * d)?,
                wo: r.f32_vec(d * d)?,
                mlp_norm: r.f32_vec(d)?,
                fc1: r.f32_vec(mh * d)?,
                fc2: r.f32_vec(d * mh)?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let final_norm = r.f32_vec(d)?;
    let unembed = r.f32_vec(config.vocab * d)?;
    r.expect_eof()?;
    Ok(ModelWeights {
        config,
        embed,
        layers,
        final_norm,
        unembed,
    })
}
