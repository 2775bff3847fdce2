//! Multi-level transformer encoder over a temporal feature pyramid.
//!
//! A convolutional projection stem maps input features to the model width,
//! a fixed number of pre-norm blocks runs at stride 1 (level 1), then each
//! further level halves the sequence with masked max pooling and applies
//! more blocks. Level l has stride 2^(l-1); input is right-padded with
//! masked zeros so the deepest level divides evenly.

use serde::{Deserialize, Serialize};

use crate::attention::{sparse_local_attention, AttentionConfig, AttnParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_model: usize,
    /// Pyramid depth L; level lengths halve from T_padded down to
    /// T_padded / 2^(L-1).
    pub levels: usize,
    /// Blocks per level below the stem.
    pub blocks_per_level: usize,
    /// Stride-1 blocks forming level 1.
    pub stem_blocks: usize,
    pub ffn_expansion: usize,
    pub attention: AttentionConfig,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.d_in == 0 || self.d_model == 0 {
            return Err(Error::Config("d_in and d_model must be positive".into()));
        }
        if self.d_model != self.attention.d_model {
            return Err(Error::Config(format!(
                "encoder d_model {} disagrees with attention d_model {}",
                self.d_model, self.attention.d_model
            )));
        }
        self.attention.validate()
    }

    /// Smallest multiple of 2^(levels-1) that fits `t`.
    pub fn padded_len(&self, t: usize) -> usize {
        let align = 1usize << (self.levels - 1);
        t.div_ceil(align) * align
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| 1usize << l).collect()
    }
}

/// One pyramid level produced by the encoder, value form.
#[derive(Clone, Debug)]
pub struct LevelFeatures<S: Scalar> {
    pub features: Tensor<S>,
    pub mask: Vec<bool>,
    pub stride: usize,
}

/// Per-level feature matrices with strides and validity masks.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<S: Scalar> {
    pub levels: Vec<LevelFeatures<S>>,
    pub t_padded: usize,
    pub t_orig: usize,
}

/// Same pyramid while still attached to the graph.
pub struct PyramidVars {
    pub levels: Vec<(Var, Vec<bool>, usize)>,
    pub t_padded: usize,
    pub t_orig: usize,
}

impl PyramidVars {
    pub fn detach<S: Scalar>(&self, g: &Graph<S>) -> PyramidFeatures<S> {
        PyramidFeatures {
            levels: self
                .levels
                .iter()
                .map(|(v, mask, stride)| LevelFeatures {
                    features: g.value(*v).clone(),
                    mask: mask.clone(),
                    stride: *stride,
                })
                .collect(),
            t_padded: self.t_padded,
            t_orig: self.t_orig,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttnParams,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
}

impl BlockParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let d = cfg.d_model;
        let hidden = cfg.ffn_expansion * d;
        let ln = |store: &mut ParamStore<S>, name: String, gain: bool| {
            store.register(
                name,
                if gain {
                    Tensor::full(&[d], S::one())
                } else {
                    Tensor::zeros(&[d])
                },
                false,
            )
        };
        let ln1_g = ln(store, format!("{prefix}.ln1.g"), true);
        let ln1_b = ln(store, format!("{prefix}.ln1.b"), false);
        let attn = AttnParams::init(store, &format!("{prefix}.attn"), &cfg.attention, rng);
        let ln2_g = ln(store, format!("{prefix}.ln2.g"), true);
        let ln2_b = ln(store, format!("{prefix}.ln2.b"), false);
        let b1 = (6.0 / (d + hidden) as f64).sqrt();
        let ffn1_w = store.register(
            format!("{prefix}.ffn1.w"),
            Tensor::rand_uniform(&[d, hidden], b1, rng),
            true,
        );
        let ffn1_b = store.register(format!("{prefix}.ffn1.b"), Tensor::zeros(&[hidden]), false);
        let ffn2_w = store.register(
            format!("{prefix}.ffn2.w"),
            Tensor::rand_uniform(&[hidden, d], b1, rng),
            true,
        );
        let ffn2_b = store.register(format!("{prefix}.ffn2.b"), Tensor::zeros(&[d]), false);
        BlockParams {
            ln1_g,
            ln1_b,
            attn,
            ln2_g,
            ln2_b,
            ffn1_w,
            ffn1_b,
            ffn2_w,
            ffn2_b,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub stem: Vec<BlockParams>,
    /// Blocks for levels 2..=L, outer index level-2.
    pub level_blocks: Vec<Vec<BlockParams>>,
}

impl EncoderParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &EncoderConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let bound = (6.0 / (3 * cfg.d_in + cfg.d_model) as f64).sqrt();
        let proj_w = store.register(
            "encoder.proj.w",
            Tensor::rand_uniform(&[3, cfg.d_in, cfg.d_model], bound, rng),
            true,
        );
        let proj_b = store.register("encoder.proj.b", Tensor::zeros(&[cfg.d_model]), false);
        let stem = (0..cfg.stem_blocks)
            .map(|i| BlockParams::init(store, &format!("encoder.stem.{i}"), cfg, rng))
            .collect();
        let level_blocks = (2..=cfg.levels)
            .map(|l| {
                (0..cfg.blocks_per_level)
                    .map(|i| {
                        BlockParams::init(store, &format!("encoder.level{l}.block{i}"), cfg, rng)
                    })
                    .collect()
            })
            .collect();
        EncoderParams {
            proj_w,
            proj_b,
            stem,
            level_blocks,
        }
    }
}

/// Width-3 same-padding convolution to the model width, then GELU; masked
/// positions are zeroed afterwards.
pub fn project<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &EncoderParams,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let conv = g.conv1d(x, bound.var(p.proj_w), Some(bound.var(p.proj_b)), 1, 1, false)?;
    let act = g.gelu(conv);
    g.zero_rows(act, mask)
}

/// Pre-norm transformer block:
/// y = x + Attn(LN1(x)); z = y + FFN(LN2(y)); masked positions stay zero.
pub fn encoder_block<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &BlockParams,
    x: Var,
    mask: &[bool],
    cfg: &EncoderConfig,
) -> Result<Var> {
    let eps = S::cast_from(LN_EPS);
    let ln1 = g.layer_norm(x, bound.var(p.ln1_g), bound.var(p.ln1_b), eps)?;
    let (attn_out, _sel) =
        sparse_local_attention(g, bound, &p.attn, ln1, mask, &cfg.attention)?;
    let y = g.add(x, attn_out)?;
    let ln2 = g.layer_norm(y, bound.var(p.ln2_g), bound.var(p.ln2_b), eps)?;
    let h = g.matmul(ln2, bound.var(p.ffn1_w))?;
    let h = g.add_bias(h, bound.var(p.ffn1_b))?;
    let h = g.gelu(h);
    let h = g.matmul(h, bound.var(p.ffn2_w))?;
    let h = g.add_bias(h, bound.var(p.ffn2_b))?;
    let z = g.add(y, h)?;
    g.zero_rows(z, mask)
}

/// Halves the sequence with width-2 masked max pooling; an output position
/// is valid iff either input position is.
pub fn downsample<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let pooled = g.max_pool2(x, mask)?;
    let out_mask = mask.chunks(2).map(|c| c[0] || c[1]).collect();
    Ok((pooled, out_mask))
}

/// Full encoder: pad, project, stem blocks at stride 1 (level 1), then
/// (downsample, blocks) per further level.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &EncoderParams,
    features: Var,
    mask: &[bool],
    cfg: &EncoderConfig,
) -> Result<PyramidVars> {
    cfg.validate()?;
    let t = g.value(features).shape()[0];
    if g.value(features).shape() != [t, cfg.d_in] {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: g.value(features).shape().to_vec(),
            rhs: vec![t, cfg.d_in],
        });
    }
    if mask.len() != t {
        return Err(Error::InvalidArgument {
            op: "encode",
            msg: format!("mask length {} vs T {}", mask.len(), t),
        });
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::FullyMaskedInput);
    }

    let t_padded = cfg.padded_len(t);
    let mut pad_mask = mask.to_vec();
    pad_mask.resize(t_padded, false);

    // zero masked inputs so the padded tail and interior masks read as zeros
    let x = g.zero_rows(features, mask)?;
    let x = g.pad_rows(x, t_padded)?;
    let mut x = project(g, bound, p, x, &pad_mask)?;
    for block in &p.stem {
        x = encoder_block(g, bound, block, x, &pad_mask, cfg)?;
    }

    let mut levels = vec![(x, pad_mask.clone(), 1usize)];
    let mut cur = x;
    let mut cur_mask = pad_mask;
    for (li, blocks) in p.level_blocks.iter().enumerate() {
        let (down, down_mask) = downsample(g, cur, &cur_mask)?;
        cur = down;
        cur_mask = down_mask;
        for block in blocks {
            cur = encoder_block(g, bound, block, cur, &cur_mask, cfg)?;
        }
        levels.push((cur, cur_mask.clone(), 1usize << (li + 1)));
    }

    Ok(PyramidVars {
        levels,
        t_padded,
        t_orig: t,
    })
}
