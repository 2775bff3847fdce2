//! Anchor-free detection heads over the feature pyramid.
//!
//! Every timestep at every level is a candidate: a shared convolutional
//! trunk feeds per-class sigmoid logits (multi-label) and a pair of
//! nonnegative boundary offsets in level-local units. Decoding maps offsets
//! to absolute seconds through a per-level learnable scale; training uses
//! sigmoid focal loss plus a 1-D interval IoU loss on positive positions.

use serde::{Deserialize, Serialize};

use crate::encoder::{PyramidFeatures, PyramidVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::sigmoid_scalar;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// One regression range [min, max) in base timesteps; `max: None` means
/// unbounded.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegRange {
    pub min: f64,
    pub max: Option<f64>,
}

impl RegRange {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && self.max.map_or(true, |m| v < m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    /// Width-3 convolutions in each head trunk.
    pub head_conv_layers: usize,
    /// Per-level assignment ranges over max(left, right), in base timesteps.
    pub regression_ranges: Vec<RegRange>,
}

impl HeadConfig {
    pub fn default_ranges(levels: usize) -> Vec<RegRange> {
        let mut ranges = Vec::with_capacity(levels);
        let mut lo = 0.0;
        let mut hi = 4.0;
        for l in 0..levels {
            let max = if l + 1 == levels { None } else { Some(hi) };
            ranges.push(RegRange { min: lo, max });
            lo = hi;
            hi *= 2.0;
        }
        ranges
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.regression_ranges.len() != levels {
            return Err(Error::Config(format!(
                "{} regression ranges for {} levels",
                self.regression_ranges.len(),
                levels
            )));
        }
        let r = &self.regression_ranges;
        if r[0].min != 0.0 {
            return Err(Error::Config("regression ranges must start at 0".into()));
        }
        for i in 0..levels - 1 {
            match r[i].max {
                Some(m) if m == r[i + 1].min && m > r[i].min => {}
                _ => {
                    return Err(Error::Config(
                        "regression ranges must be contiguous and increasing".into(),
                    ))
                }
            }
        }
        if r[levels - 1].max.is_some() {
            return Err(Error::Config("last regression range must be unbounded".into()));
        }
        Ok(())
    }
}

/// A labeled ground-truth interval in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub label: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// A scored detection in seconds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub clip_id: String,
    pub label: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

/// Pyramid layout without the feature values: enough for target assignment
/// and decoding.
#[derive(Clone, Debug)]
pub struct LevelGeom {
    pub len: usize,
    pub stride: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct PyrGeom {
    pub levels: Vec<LevelGeom>,
    pub t_orig: usize,
}

impl PyrGeom {
    pub fn of_vars(pyr: &PyramidVars) -> Self {
        PyrGeom {
            levels: pyr
                .levels
                .iter()
                .map(|(_, mask, stride)| LevelGeom {
                    len: mask.len(),
                    stride: *stride,
                    mask: mask.clone(),
                })
                .collect(),
            t_orig: pyr.t_orig,
        }
    }

    pub fn of_features<S: Scalar>(pyr: &PyramidFeatures<S>) -> Self {
        PyrGeom {
            levels: pyr
                .levels
                .iter()
                .map(|l| LevelGeom {
                    len: l.mask.len(),
                    stride: l.stride,
                    mask: l.mask.clone(),
                })
                .collect(),
            t_orig: pyr.t_orig,
        }
    }
}

/// Per-level multi-label targets. `class_targets[i * C + c]` marks position
/// `i` positive for class `c`; positive entries carry (left, right) offsets
/// in level-local units.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub class_targets: Vec<bool>,
    pub offsets: Vec<Option<(f64, f64)>>,
}

#[derive(Clone, Debug)]
pub struct TimestepTargets {
    pub levels: Vec<LevelTargets>,
    pub num_pos: usize,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub cls_trunk: Vec<(ParamId, ParamId)>,
    pub cls_out_w: ParamId,
    pub cls_out_b: ParamId,
    pub reg_trunk: Vec<(ParamId, ParamId)>,
    pub reg_out_w: ParamId,
    pub reg_out_b: ParamId,
    /// Log-parameterized per-level scales: scale_l = exp(s_l) stays
    /// positive for any parameter value; init 0 gives scale 1.
    pub log_scales: Vec<ParamId>,
}

impl HeadParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &HeadConfig,
        d_model: usize,
        levels: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let conv_bound = (6.0 / (4 * d_model) as f64).sqrt();
        let mut trunk = |name: &str| -> Vec<(ParamId, ParamId)> {
            (0..cfg.head_conv_layers)
                .map(|i| {
                    let w = store.register(
                        format!("heads.{name}.trunk{i}.w"),
                        Tensor::rand_uniform(&[3, d_model, d_model], conv_bound, rng),
                        true,
                    );
                    let b = store.register(
                        format!("heads.{name}.trunk{i}.b"),
                        Tensor::zeros(&[d_model]),
                        false,
                    );
                    (w, b)
                })
                .collect()
        };
        let cls_trunk = trunk("cls");
        let reg_trunk = trunk("reg");
        let out_bound = (6.0 / (d_model + cfg.num_classes) as f64).sqrt();
        let cls_out_w = store.register(
            "heads.cls.out.w",
            Tensor::rand_uniform(&[d_model, cfg.num_classes], out_bound, rng),
            true,
        );
        // prior-probability init keeps early scores low for rare positives
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        let cls_out_b = store.register(
            "heads.cls.out.b",
            Tensor::full(&[cfg.num_classes], S::cast_from(prior)),
            false,
        );
        let reg_out_w = store.register(
            "heads.reg.out.w",
            Tensor::rand_uniform(&[d_model, 2], out_bound, rng),
            true,
        );
        let reg_out_b = store.register("heads.reg.out.b", Tensor::zeros(&[2]), false);
        let log_scales = (0..levels)
            .map(|l| store.register(format!("heads.scale{l}"), Tensor::zeros(&[1]), true))
            .collect();
        HeadParams {
            cls_trunk,
            cls_out_w,
            cls_out_b,
            reg_trunk,
            reg_out_w,
            reg_out_b,
            log_scales,
        }
    }

    pub fn scale_value<S: Scalar>(&self, store: &ParamStore<S>, level: usize) -> f64 {
        store.get(self.log_scales[level]).item().cast_f64().exp()
    }
}

fn head_trunk<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    trunk: &[(ParamId, ParamId)],
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let mut cur = x;
    for &(w, b) in trunk {
        let conv = g.conv1d(cur, bound.var(w), Some(bound.var(b)), 1, 1, false)?;
        let act = g.gelu(conv);
        cur = g.zero_rows(act, mask)?;
    }
    Ok(cur)
}

/// Per-level class logits [T_l, C]; one shared head across levels.
pub fn classify<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &HeadParams,
    pyr: &PyramidVars,
) -> Result<Vec<Var>> {
    pyr.levels
        .iter()
        .map(|(x, mask, _)| {
            let t = head_trunk(g, bound, &p.cls_trunk, *x, mask)?;
            let logits = g.matmul(t, bound.var(p.cls_out_w))?;
            g.add_bias(logits, bound.var(p.cls_out_b))
        })
        .collect()
}

/// Per-level nonnegative (left, right) offsets [T_l, 2] in level-local
/// units, before the learnable scale.
pub fn regress<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &HeadParams,
    pyr: &PyramidVars,
) -> Result<Vec<Var>> {
    pyr.levels
        .iter()
        .map(|(x, mask, _)| {
            let t = head_trunk(g, bound, &p.reg_trunk, *x, mask)?;
            let raw = g.matmul(t, bound.var(p.reg_out_w))?;
            let raw = g.add_bias(raw, bound.var(p.reg_out_b))?;
            Ok(g.softplus(raw))
        })
        .collect()
}

/// Decodes per-level logits and offsets into scored detections.
///
/// Level l, position i: center t = (i + 0.5) * stride * delta_base seconds;
/// start = t - scale_l * left * stride * delta_base, end symmetric; start
/// clamps to 0, end to the clip duration; masked positions and empty
/// (end <= start) segments emit nothing.
pub fn decode_segments(
    clip_id: &str,
    logits: &[Tensor<f64>],
    offsets: &[Tensor<f64>],
    scales: &[f64],
    geom: &PyrGeom,
    delta_base_s: f64,
    duration_s: f64,
) -> Result<Vec<Detection>> {
    if delta_base_s <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "decode_segments",
            msg: "delta_base must be positive".into(),
        });
    }
    if logits.len() != geom.levels.len() || offsets.len() != geom.levels.len() {
        return Err(Error::InvalidArgument {
            op: "decode_segments",
            msg: "per-level inputs disagree with geometry".into(),
        });
    }
    let mut out = Vec::new();
    for (l, level) in geom.levels.iter().enumerate() {
        let num_classes = logits[l].shape()[1];
        let step = level.stride as f64 * delta_base_s;
        for i in 0..level.len {
            if !level.mask[i] {
                continue;
            }
            let center = (i as f64 + 0.5) * step;
            let left = offsets[l].at2(i, 0) * scales[l] * step;
            let right = offsets[l].at2(i, 1) * scales[l] * step;
            let start = (center - left).max(0.0);
            let end = (center + right).min(duration_s);
            if end <= start {
                continue;
            }
            for c in 0..num_classes {
                out.push(Detection {
                    clip_id: clip_id.to_string(),
                    label: c,
                    start_s: start,
                    end_s: end,
                    score: sigmoid_scalar(logits[l].at2(i, c)),
                });
            }
        }
    }
    Ok(out)
}

/// Assigns ground-truth segments to pyramid positions.
///
/// A position is positive for class c of segment g iff its center time lies
/// strictly inside g and max(left, right) in base timesteps falls in the
/// level's regression range. Among same-class matches the shortest segment
/// wins. Offsets are stored in level-local units (base timesteps / stride).
pub fn assign_targets(
    gts: &[SegmentAnnotation],
    geom: &PyrGeom,
    cfg: &HeadConfig,
    delta_base_s: f64,
) -> Result<TimestepTargets> {
    cfg.validate(geom.levels.len())?;
    for gt in gts {
        if gt.end_s <= gt.start_s {
            return Err(Error::Data(format!(
                "degenerate segment [{}, {}] for label {}",
                gt.start_s, gt.end_s, gt.label
            )));
        }
        if gt.label >= cfg.num_classes {
            return Err(Error::Data(format!(
                "label {} out of range (C = {})",
                gt.label, cfg.num_classes
            )));
        }
    }
    let c_count = cfg.num_classes;
    let mut num_pos = 0usize;
    let levels = geom
        .levels
        .iter()
        .enumerate()
        .map(|(l, level)| {
            let range = &cfg.regression_ranges[l];
            let mut class_targets = vec![false; level.len * c_count];
            let mut offsets = vec![None; level.len * c_count];
            for i in 0..level.len {
                if !level.mask[i] {
                    continue;
                }
                let center_base = (i as f64 + 0.5) * level.stride as f64;
                for c in 0..c_count {
                    let mut best: Option<(&SegmentAnnotation, f64, f64)> = None;
                    for gt in gts.iter().filter(|g| g.label == c) {
                        let start_base = gt.start_s / delta_base_s;
                        let end_base = gt.end_s / delta_base_s;
                        if !(start_base < center_base && center_base < end_base) {
                            continue;
                        }
                        let left = center_base - start_base;
                        let right = end_base - center_base;
                        if !range.contains(left.max(right)) {
                            continue;
                        }
                        let better = match &best {
                            None => true,
                            Some((cur, _, _)) => {
                                let dur = gt.end_s - gt.start_s;
                                let cur_dur = cur.end_s - cur.start_s;
                                dur < cur_dur
                                    || (dur == cur_dur
                                        && (gt.start_s, gt.end_s) < (cur.start_s, cur.end_s))
                            }
                        };
                        if better {
                            best = Some((gt, left, right));
                        }
                    }
                    if let Some((_, left, right)) = best {
                        class_targets[i * c_count + c] = true;
                        offsets[i * c_count + c] =
                            Some((left / level.stride as f64, right / level.stride as f64));
                        num_pos += 1;
                    }
                }
            }
            LevelTargets {
                class_targets,
                offsets,
            }
        })
        .collect();
    Ok(TimestepTargets { levels, num_pos })
}

/// Loss pieces returned by [`detection_loss`]; `total` stays in the graph
/// for the backward pass, the components are detached values.
pub struct DetectionLoss {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub num_pos: usize,
}

/// Interval IoU loss node: sum over listed positive entries of
/// 1 - IoU([-scale*left, scale*right], [-tl, tr]) with intervals anchored at
/// the shared position center.
fn interval_iou_loss<S: Scalar>(
    g: &mut Graph<S>,
    offsets: Var,
    log_scale: Var,
    positives: &[(usize, f64, f64)],
) -> Result<Var> {
    let t = g.value(offsets).shape()[0];
    if g.value(offsets).shape() != [t, 2] {
        return Err(Error::ShapeMismatch {
            op: "interval_iou_loss",
            lhs: g.value(offsets).shape().to_vec(),
            rhs: vec![t, 2],
        });
    }
    let positives = positives.to_vec();
    let scale = g.value(log_scale).item().exp();
    let mut total = S::zero();
    for &(row, tl, tr) in &positives {
        let (tl, tr) = (S::cast_from(tl), S::cast_from(tr));
        let pl = g.value(offsets).at2(row, 0) * scale;
        let pr = g.value(offsets).at2(row, 1) * scale;
        let inter = pl.min(tl) + pr.min(tr);
        let union = pl.max(tl) + pr.max(tr);
        total = total + S::one() - inter / union;
    }
    let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
        let g0 = ctx.out_grad.item();
        let off = ctx.inputs[0];
        let ls = ctx.inputs[1].item();
        let scale = ls.exp();
        let mut doff = Tensor::zeros(off.shape());
        let mut dls = S::zero();
        for &(row, tl, tr) in &positives {
            let (tl, tr) = (S::cast_from(tl), S::cast_from(tr));
            let (ol, or_) = (off.at2(row, 0), off.at2(row, 1));
            let (pl, pr) = (ol * scale, or_ * scale);
            let inter = pl.min(tl) + pr.min(tr);
            let union = pl.max(tl) + pr.max(tr);
            let u2 = union * union;
            // d(1 - I/U)/dp = -(I'_p U - I U'_p) / U^2, p in {pl, pr}
            let d_pl = {
                let di = if pl <= tl { S::one() } else { S::zero() };
                let du = if pl > tl { S::one() } else { S::zero() };
                -(di * union - inter * du) / u2
            };
            let d_pr = {
                let di = if pr <= tr { S::one() } else { S::zero() };
                let du = if pr > tr { S::one() } else { S::zero() };
                -(di * union - inter * du) / u2
            };
            doff.row_mut(row)[0] = doff.row_mut(row)[0] + g0 * d_pl * scale;
            doff.row_mut(row)[1] = doff.row_mut(row)[1] + g0 * d_pr * scale;
            // d pl / d log_scale = pl
            dls = dls + g0 * (d_pl * pl + d_pr * pr);
        }
        vec![Some(doff), Some(Tensor::scalar(dls))]
    };
    Ok(g.insert(
        Tensor::scalar(total),
        vec![offsets, log_scale],
        Some(Box::new(rule)),
        false,
    ))
}

/// Sigmoid focal loss plus interval IoU regression loss, both normalized by
/// max(1, number of positive (position, class) pairs); total = cls + reg.
pub fn detection_loss<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &HeadParams,
    logits: &[Var],
    offsets: &[Var],
    targets: &TimestepTargets,
    geom: &PyrGeom,
) -> Result<DetectionLoss> {
    if logits.len() != targets.levels.len() || offsets.len() != targets.levels.len() {
        return Err(Error::InvalidArgument {
            op: "detection_loss",
            msg: "level count mismatch".into(),
        });
    }
    let alpha = S::cast_from(FOCAL_ALPHA);
    let gamma = S::cast_from(FOCAL_GAMMA);
    let one = S::one();

    let mut cls_sum: Option<Var> = None;
    let mut reg_sum: Option<Var> = None;
    for (l, level) in targets.levels.iter().enumerate() {
        let shape = g.value(logits[l]).shape().to_vec();
        let (t, c_count) = (shape[0], shape[1]);
        debug_assert_eq!(level.class_targets.len(), t * c_count);

        // constants: targets y, alpha_t, validity
        let mut y = Tensor::<S>::zeros(&[t, c_count]);
        let mut alpha_t = Tensor::<S>::zeros(&[t, c_count]);
        let mut valid = Tensor::<S>::zeros(&[t, c_count]);
        for i in 0..t {
            let is_valid = geom.levels[l].mask[i];
            for c in 0..c_count {
                let idx = i * c_count + c;
                let pos = level.class_targets[idx];
                y.data_mut()[idx] = if pos { one } else { S::zero() };
                alpha_t.data_mut()[idx] = if pos { alpha } else { one - alpha };
                valid.data_mut()[idx] = if is_valid { one } else { S::zero() };
            }
        }
        let yv = g.constant(y);
        let av = g.constant(alpha_t);
        let vv = g.constant(valid);
        let ones = g.constant(Tensor::full(&[t, c_count], one));

        // stable focal: ce = -(y log sig(x) + (1-y) log sig(-x))
        let x = logits[l];
        let nx = g.neg(x);
        let ls_pos = {
            let sp = g.softplus(nx);
            g.neg(sp)
        };
        let ls_neg = {
            let sp = g.softplus(x);
            g.neg(sp)
        };
        let one_minus_y = g.sub(ones, yv)?;
        let ce = {
            let a = g.mul(yv, ls_pos)?;
            let b = g.mul(one_minus_y, ls_neg)?;
            let s = g.add(a, b)?;
            g.neg(s)
        };
        // p_t = y p + (1-y)(1-p)
        let prob = g.sigmoid(x);
        let one_minus_p = g.sub(ones, prob)?;
        let pt = {
            let a = g.mul(yv, prob)?;
            let b = g.mul(one_minus_y, one_minus_p)?;
            g.add(a, b)?
        };
        let focus = {
            let gap = g.sub(ones, pt)?;
            g.pow_scalar(gap, gamma)
        };
        let term = {
            let m = g.mul(av, focus)?;
            let m = g.mul(m, ce)?;
            g.mul(m, vv)?
        };
        let level_cls = g.sum(term);
        cls_sum = Some(match cls_sum {
            Some(acc) => g.add(acc, level_cls)?,
            None => level_cls,
        });

        // regression: positives as (row, target_left, target_right)
        let positives: Vec<(usize, f64, f64)> = (0..t * c_count)
            .filter_map(|idx| {
                level.offsets[idx].map(|(tl, tr)| (idx / c_count, tl, tr))
            })
            .collect();
        if !positives.is_empty() {
            let level_reg =
                interval_iou_loss(g, offsets[l], bound.var(p.log_scales[l]), &positives)?;
            reg_sum = Some(match reg_sum {
                Some(acc) => g.add(acc, level_reg)?,
                None => level_reg,
            });
        }
    }

    let norm = S::one() / S::cast_from(targets.num_pos.max(1) as f64);
    let cls = {
        let raw = cls_sum.expect("at least one level");
        g.scale(raw, norm)
    };
    let reg = match reg_sum {
        Some(raw) => g.scale(raw, norm),
        None => g.constant(Tensor::scalar(S::zero())),
    };
    let total = g.add(cls, reg)?;
    Ok(DetectionLoss {
        total,
        cls: g.value(cls).item().cast_f64(),
        reg: g.value(reg).item().cast_f64(),
        num_pos: targets.num_pos,
    })
}
