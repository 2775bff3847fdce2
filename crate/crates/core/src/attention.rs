//! Multi-head local-window attention with per-head Top-K token pruning.
//!
//! Each query attends inside an odd window of width W. Per head, only the
//! M = ceil(keep_ratio * W) most salient window tokens are retained (the
//! center token always among them), and attention is computed over that
//! reduced set, bringing the per-layer cost from O(T^2) to O(T * W).
//!
//! Besides the main per-head Query-Key saliency there are two ablation
//! variants (head-shared Top-K, static key-norm pruning) and a dense local
//! reference that skips pruning entirely.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "per-head-topk")]
    PerHeadTopK,
    #[serde(rename = "head-shared-topk")]
    HeadSharedTopK,
    #[serde(rename = "static-key-norm")]
    StaticKeyNorm,
    #[serde(rename = "dense")]
    DenseLocal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PerHeadTopK,
        Variant::HeadSharedTopK,
        Variant::StaticKeyNorm,
        Variant::DenseLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PerHeadTopK => "per-head-topk",
            Variant::HeadSharedTopK => "head-shared-topk",
            Variant::StaticKeyNorm => "static-key-norm",
            Variant::DenseLocal => "dense",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant '{s}'")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Odd local window size W.
    pub window: usize,
    /// Keep ratio in (0, 1]; M = ceil(keep_ratio * W) tokens are retained.
    pub keep_ratio: f64,
    pub variant: Variant,
    /// Odd width of the depthwise convolutions in the Q/K/V projections.
    pub qkv_conv_width: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "window {} must be odd and >= 1",
                self.window
            )));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio {} outside (0, 1]",
                self.keep_ratio
            )));
        }
        if self.qkv_conv_width % 2 == 0 {
            return Err(Error::Config(format!(
                "qkv_conv_width {} must be odd",
                self.qkv_conv_width
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Per-head retention budget M = ceil(keep_ratio * W), clamped to [1, W].
    /// The dense variant keeps the whole window regardless of keep_ratio.
    pub fn top_m(&self) -> usize {
        if self.variant == Variant::DenseLocal {
            return self.window;
        }
        let m = (self.keep_ratio * self.window as f64).ceil() as usize;
        m.clamp(1, self.window)
    }
}

/// Retained key indices per head and query: `retained[h][i]` holds the
/// absolute timestep indices kept for query `i` in head `h`, sorted
/// ascending. Masked queries keep an empty list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaliencySelection {
    pub retained: Vec<Vec<Vec<usize>>>,
}

/// Saliency scores for one query over its window candidates, per head.
///
/// `candidates` must be valid (unmasked, in-range) absolute indices.
/// PerHeadTopK and HeadSharedTopK score by scaled Query-Key dot product so
/// ranking matches the attention logits; HeadSharedTopK then averages the
/// head scores into one shared vector (returned duplicated per head).
/// StaticKeyNorm scores by the key L2 norm and ignores the query entirely.
pub fn saliency_scores<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    heads: usize,
    query: usize,
    candidates: &[usize],
    variant: Variant,
) -> Vec<Vec<S>> {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = S::cast_from(1.0 / (dh as f64).sqrt());
    let head_slice = |t: &Tensor<S>, row: usize, h: usize| -> Vec<S> {
        t.data()[row * d + h * dh..row * d + (h + 1) * dh].to_vec()
    };
    let mut scores: Vec<Vec<S>> = (0..heads)
        .map(|h| match variant {
            Variant::StaticKeyNorm => candidates
                .iter()
                .map(|&j| {
                    let kr = head_slice(k, j, h);
                    kr.iter().map(|&x| x * x).sum::<S>().sqrt()
                })
                .collect(),
            _ => {
                let qr = head_slice(q, query, h);
                candidates
                    .iter()
                    .map(|&j| {
                        let kr = head_slice(k, j, h);
                        qr.iter()
                            .zip(kr.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<S>()
                            * scale
                    })
                    .collect()
            }
        })
        .collect();
    if variant == Variant::HeadSharedTopK {
        let inv_h = S::one() / S::cast_from(heads as f64);
        let shared: Vec<S> = (0..candidates.len())
            .map(|c| scores.iter().map(|row| row[c]).sum::<S>() * inv_h)
            .collect();
        for row in scores.iter_mut() {
            *row = shared.clone();
        }
    }
    scores
}

/// Top-M selection over one query's window.
///
/// The center is force-included and occupies one of the M slots. Remaining
/// slots fill by descending score with ties broken by smaller |offset from
/// center| then by lower absolute index, making the selection a total,
/// deterministic function. Returns indices sorted ascending.
pub fn select_top_m<S: Scalar>(
    scores: &[S],
    candidates: &[usize],
    center: usize,
    m: usize,
) -> Vec<usize> {
    debug_assert_eq!(scores.len(), candidates.len());
    debug_assert!(m >= 1);
    let budget = m.min(candidates.len());
    if budget == candidates.len() {
        return candidates.to_vec();
    }
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&c| candidates[c] != center)
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                let da = candidates[a].abs_diff(center);
                let db = candidates[b].abs_diff(center);
                da.cmp(&db)
            })
            .then_with(|| candidates[a].cmp(&candidates[b]))
    });
    let mut retained: Vec<usize> = order
        .into_iter()
        .take(budget.saturating_sub(1))
        .map(|c| candidates[c])
        .collect();
    retained.push(center);
    retained.sort_unstable();
    retained
}

/// Reusable buffers for the attention kernel, so repeated timed calls do
/// not churn the allocator.
pub struct AttendScratch<S> {
    candidates: Vec<usize>,
    scores: Vec<Vec<S>>,
    retained: Vec<Vec<usize>>,
    logits: Vec<S>,
    weights: Vec<S>,
}

impl<S: Scalar> Default for AttendScratch<S> {
    fn default() -> Self {
        AttendScratch {
            candidates: Vec::new(),
            scores: Vec::new(),
            retained: Vec::new(),
            logits: Vec::new(),
            weights: Vec::new(),
        }
    }
}

/// Forward pass of the pruned-attention kernel.
///
/// `out` must be [T, d_model] and is fully overwritten; masked query rows
/// become zero. When `selection`/`weights` collectors are supplied they are
/// filled for the backward pass and for inspection.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_forward_into<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &[bool],
    cfg: &AttentionConfig,
    out: &mut Tensor<S>,
    mut selection: Option<&mut SaliencySelection>,
    mut weights: Option<&mut Vec<Vec<Vec<S>>>>,
    scratch: &mut AttendScratch<S>,
) -> Result<()> {
    let t = q.shape()[0];
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = cfg.d_head();
    let half = cfg.window / 2;
    let m = cfg.top_m();
    let scale = S::cast_from(1.0 / (dh as f64).sqrt());

    out.data_mut().fill(S::zero());
    if let Some(sel) = selection.as_mut() {
        sel.retained = vec![vec![Vec::new(); t]; heads];
    }
    if let Some(w) = weights.as_mut() {
        **w = vec![vec![Vec::new(); t]; heads];
    }

    scratch.retained.resize(heads, Vec::new());

    for i in 0..t {
        if !mask[i] {
            continue;
        }
        scratch.candidates.clear();
        for j in i.saturating_sub(half)..=(i + half).min(t - 1) {
            if mask[j] {
                scratch.candidates.push(j);
            }
        }
        let cand = &scratch.candidates;

        // selection phase
        if m >= cand.len() {
            for h in 0..heads {
                scratch.retained[h].clear();
                scratch.retained[h].extend_from_slice(cand);
            }
        } else {
            match cfg.variant {
                Variant::DenseLocal => unreachable!("dense keeps the full window"),
                Variant::PerHeadTopK | Variant::StaticKeyNorm | Variant::HeadSharedTopK => {
                    scratch.scores = saliency_scores(q, k, heads, i, cand, cfg.variant);
                    for h in 0..heads {
                        scratch.retained[h] = select_top_m(&scratch.scores[h], cand, i, m);
                    }
                }
            }
        }

        // attend phase: identical arithmetic for every variant
        for h in 0..heads {
            let retained = &scratch.retained[h];
            let qrow = &q.data()[i * d + h * dh..i * d + (h + 1) * dh];
            scratch.logits.clear();
            let mut mx = S::neg_infinity();
            for &j in retained {
                let krow = &k.data()[j * d + h * dh..j * d + (h + 1) * dh];
                let mut dot = S::zero();
                for c in 0..dh {
                    dot = dot + qrow[c] * krow[c];
                }
                let logit = dot * scale;
                if logit > mx {
                    mx = logit;
                }
                scratch.logits.push(logit);
            }
            scratch.weights.clear();
            let mut denom = S::zero();
            for &l in scratch.logits.iter() {
                let e = (l - mx).exp();
                scratch.weights.push(e);
                denom = denom + e;
            }
            for w in scratch.weights.iter_mut() {
                *w = *w / denom;
            }
            let orow = &mut out.data_mut()[i * d + h * dh..i * d + (h + 1) * dh];
            for (pos, &j) in retained.iter().enumerate() {
                let w = scratch.weights[pos];
                let vrow = &v.data()[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    orow[c] = orow[c] + w * vrow[c];
                }
            }
            if let Some(sel) = selection.as_mut() {
                sel.retained[h][i] = retained.clone();
            }
            if let Some(wsink) = weights.as_mut() {
                wsink[h][i] = scratch.weights.clone();
            }
        }
    }
    Ok(())
}

/// Value-level kernel run: returns the attended output together with the
/// selection and the attention weights over each retained set.
pub fn attend_values<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<(Tensor<S>, SaliencySelection, Vec<Vec<Vec<S>>>)> {
    cfg.validate()?;
    if !mask.iter().any(|&b| b) {
        return Err(Error::FullyMaskedInput);
    }
    let t = q.shape()[0];
    let mut out = Tensor::zeros(&[t, cfg.d_model]);
    let mut selection = SaliencySelection { retained: Vec::new() };
    let mut weights = Vec::new();
    let mut scratch = AttendScratch::default();
    attend_forward_into(
        q,
        k,
        v,
        mask,
        cfg,
        &mut out,
        Some(&mut selection),
        Some(&mut weights),
        &mut scratch,
    )?;
    Ok((out, selection, weights))
}

/// Parameter handles for one attention layer: depthwise conv + linear per
/// Q/K/V stream, plus the output projection. The K projection carries no
/// bias: a shared key offset shifts all logits of a query equally and
/// cancels in the softmax.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q_dw: ParamId,
    pub k_dw: ParamId,
    pub v_dw: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl AttnParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let d = cfg.d_model;
        let w = cfg.qkv_conv_width;
        let dw_bound = (3.0 / w as f64).sqrt();
        let lin_bound = (6.0 / (2 * d) as f64).sqrt();
        let mut dw = |name: &str| {
            store.register(
                format!("{prefix}.{name}"),
                Tensor::rand_uniform(&[w, d], dw_bound, rng),
                true,
            )
        };
        let (q_dw, k_dw, v_dw) = (dw("q_dw.w"), dw("k_dw.w"), dw("v_dw.w"));
        let mut lin = |name: &str, with_bias: bool| {
            let wid = store.register(
                format!("{prefix}.{name}.w"),
                Tensor::rand_uniform(&[d, d], lin_bound, rng),
                true,
            );
            let bid = with_bias
                .then(|| store.register(format!("{prefix}.{name}.b"), Tensor::zeros(&[d]), false));
            (wid, bid)
        };
        let (q_w, q_b) = lin("q_lin", true);
        let (k_w, _) = lin("k_lin", false);
        let (v_w, v_b) = lin("v_lin", true);
        let (out_w, out_b) = lin("out", true);
        let (q_b, v_b, out_b) = (q_b.unwrap(), v_b.unwrap(), out_b.unwrap());
        AttnParams {
            q_dw,
            k_dw,
            v_dw,
            q_w,
            q_b,
            k_w,
            v_w,
            v_b,
            out_w,
            out_b,
        }
    }
}

/// Q/K/V projection: depthwise convolution then a full linear map, one
/// independent stream each. Head `h` of the result lives in columns
/// [h*d_head, (h+1)*d_head).
pub fn project_qkv<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &AttnParams,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Var, Var)> {
    let pad = (cfg.qkv_conv_width - 1) / 2;
    let stream =
        |g: &mut Graph<S>, dw: ParamId, w: ParamId, b: Option<ParamId>| -> Result<Var> {
            let conv = g.conv1d(x, bound.var(dw), None, 1, pad, true)?;
            let lin = g.matmul(conv, bound.var(w))?;
            match b {
                Some(b) => g.add_bias(lin, bound.var(b)),
                None => Ok(lin),
            }
        };
    let q = stream(g, p.q_dw, p.q_w, Some(p.q_b))?;
    let k = stream(g, p.k_dw, p.k_w, None)?;
    let v = stream(g, p.v_dw, p.v_w, Some(p.v_b))?;
    Ok((q, k, v))
}

/// Graph node for the pruned-attention kernel over projected Q/K/V.
/// Selection is a discrete forward-only choice; gradients flow through the
/// retained paths only.
pub fn attention_core<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<(Var, SaliencySelection)> {
    cfg.validate()?;
    let t = g.value(q).shape()[0];
    if g.value(q).shape() != [t, cfg.d_model] {
        return Err(Error::ShapeMismatch {
            op: "attention_core",
            lhs: g.value(q).shape().to_vec(),
            rhs: vec![t, cfg.d_model],
        });
    }
    if mask.len() != t {
        return Err(Error::InvalidArgument {
            op: "attention_core",
            msg: format!("mask length {} vs T {}", mask.len(), t),
        });
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::FullyMaskedInput);
    }

    let mut out = Tensor::zeros(&[t, cfg.d_model]);
    let mut selection = SaliencySelection { retained: Vec::new() };
    let mut weights: Vec<Vec<Vec<S>>> = Vec::new();
    let mut scratch = AttendScratch::default();
    attend_forward_into(
        g.value(q),
        g.value(k),
        g.value(v),
        mask,
        cfg,
        &mut out,
        Some(&mut selection),
        Some(&mut weights),
        &mut scratch,
    )?;

    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = cfg.d_head();
    let scale = S::cast_from(1.0 / (dh as f64).sqrt());
    let sel_for_rule = selection.retained.clone();
    let mask_owned = mask.to_vec();

    let rule = move |ctx: &crate::graph::BackCtx<'_, S>| {
        let (qv, kv, vv) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let gout = ctx.out_grad;
        let t = qv.shape()[0];
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        let mut dlogits: Vec<S> = Vec::new();
        for i in 0..t {
            if !mask_owned[i] {
                continue;
            }
            for h in 0..heads {
                let retained = &sel_for_rule[h][i];
                let w = &weights[h][i];
                let grow = &gout.data()[i * d + h * dh..i * d + (h + 1) * dh];
                // a_j = g . V_j ; b = sum w_j a_j ; dlogit_j = w_j (a_j - b)
                let mut b_acc = S::zero();
                dlogits.clear();
                for (pos, &j) in retained.iter().enumerate() {
                    let vrow = &vv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    let mut a = S::zero();
                    for c in 0..dh {
                        a = a + grow[c] * vrow[c];
                    }
                    dlogits.push(a);
                    b_acc = b_acc + w[pos] * a;
                    // dV_j += w_j g
                    let dvrow = &mut dv.data_mut()[j * d + h * dh..j * d + (h + 1) * dh];
                    for c in 0..dh {
                        dvrow[c] = dvrow[c] + w[pos] * grow[c];
                    }
                }
                let qrow: Vec<S> =
                    qv.data()[i * d + h * dh..i * d + (h + 1) * dh].to_vec();
                for (pos, &j) in retained.iter().enumerate() {
                    let dl = w[pos] * (dlogits[pos] - b_acc) * scale;
                    let krow = &kv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    let dqrow = &mut dq.data_mut()[i * d + h * dh..i * d + (h + 1) * dh];
                    for c in 0..dh {
                        dqrow[c] = dqrow[c] + dl * krow[c];
                    }
                    let dkrow = &mut dk.data_mut()[j * d + h * dh..j * d + (h + 1) * dh];
                    for c in 0..dh {
                        dkrow[c] = dkrow[c] + dl * qrow[c];
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    };

    let var = g.insert(out, vec![q, k, v], Some(Box::new(rule)), false);
    Ok((var, selection))
}

/// Full attention layer: Q/K/V projection, pruned local attention, head
/// concatenation and output projection. Masked positions output zeros.
pub fn sparse_local_attention<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    p: &AttnParams,
    x: Var,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<(Var, SaliencySelection)> {
    let (q, k, v) = project_qkv(g, bound, p, x, cfg)?;
    let (attended, selection) = attention_core(g, q, k, v, mask, cfg)?;
    let proj = g.matmul(attended, bound.var(p.out_w))?;
    let proj = g.add_bias(proj, bound.var(p.out_b))?;
    let out = g.zero_rows(proj, mask)?;
    Ok((out, selection))
}

/// Splits a [T, d_model] tensor into per-head [T, d_head] tensors
/// (column blocks). Mostly useful in tests.
pub fn split_heads<S: Scalar>(t: &Tensor<S>, heads: usize) -> Vec<Tensor<S>> {
    let (rows, d) = (t.shape()[0], t.shape()[1]);
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                data.extend_from_slice(&t.data()[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            Tensor::new(vec![rows, dh], data).expect("block shape")
        })
        .collect()
}

/// Quadratic full-attention reference (no window, no pruning) used by the
/// benchmark as the O(T^2) baseline.
pub fn full_attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    out: &mut Tensor<S>,
    row_scratch: &mut Vec<S>,
) {
    let t = q.shape()[0];
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = S::cast_from(1.0 / (dh as f64).sqrt());
    out.data_mut().fill(S::zero());
    for i in 0..t {
        for h in 0..heads {
            let qrow = &q.data()[i * d + h * dh..i * d + (h + 1) * dh];
            row_scratch.clear();
            let mut mx = S::neg_infinity();
            for j in 0..t {
                let krow = &k.data()[j * d + h * dh..j * d + (h + 1) * dh];
                let mut dot = S::zero();
                for c in 0..dh {
                    dot = dot + qrow[c] * krow[c];
                }
                let l = dot * scale;
                if l > mx {
                    mx = l;
                }
                row_scratch.push(l);
            }
            let mut denom = S::zero();
            for l in row_scratch.iter_mut() {
                *l = (*l - mx).exp();
                denom = denom + *l;
            }
            let orow = &mut out.data_mut()[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..t {
                let w = row_scratch[j] / denom;
                let vrow = &v.data()[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    orow[c] = orow[c] + w * vrow[c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant) -> AttentionConfig {
        AttentionConfig {
            d_model: 16,
            heads: 2,
            window: 5,
            keep_ratio: 0.5,
            variant,
            qkv_conv_width: 3,
        }
    }

    #[test]
    fn top_m_budget_matches_ceil() {
        let mut c = cfg(Variant::PerHeadTopK);
        c.window = 9;
        c.keep_ratio = 0.5;
        assert_eq!(c.top_m(), 5);
        c.keep_ratio = 1.0;
        assert_eq!(c.top_m(), 9);
        c.keep_ratio = 0.01;
        assert_eq!(c.top_m(), 1);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn select_descending_scores_keeps_near_center() {
        // W=9 window fully valid around center 10, strictly decreasing with
        // distance: retained offsets must be {-2,-1,0,+1,+2}
        let candidates: Vec<usize> = (6..=14).collect();
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&j| 10.0 - (j as f64 - 10.0).abs())
            .collect();
        let retained = select_top_m(&scores, &candidates, 10, 5);
        assert_eq!(retained, vec![8, 9, 10, 11, 12]);
    }

    #[test]
    fn select_all_equal_uses_distance_then_index() {
        let candidates: Vec<usize> = (6..=14).collect();
        let scores = vec![1.0f64; 9];
        let retained = select_top_m(&scores, &candidates, 10, 5);
        assert_eq!(retained, vec![8, 9, 10, 11, 12]);
    }

    #[test]
    fn select_truncated_boundary_window() {
        // query at t=0 with W=9: only offsets 0..=4 exist; M=5 keeps all 5
        let candidates: Vec<usize> = (0..=4).collect();
        let scores = vec![0.0f64; 5];
        let retained = select_top_m(&scores, &candidates, 0, 5);
        assert_eq!(retained, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_query_scores_fall_to_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(Variant::PerHeadTopK);
        let q = Tensor::<f64>::zeros(&[8, 16]);
        let k = Tensor::<f64>::randn(&[8, 16], 1.0, &mut rng);
        let cand: Vec<usize> = (2..=6).collect();
        let scores = saliency_scores(&q, &k, c.heads, 4, &cand, c.variant);
        for h in 0..c.heads {
            assert!(scores[h].iter().all(|&s| s == 0.0));
            let retained = select_top_m(&scores[h], &cand, 4, 3);
            assert_eq!(retained, vec![3, 4, 5]);
        }
    }

    #[test]
    fn static_key_norm_is_query_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::<f64>::randn(&[16, 16], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[16, 16], 1.0, &mut rng);
        let cand: Vec<usize> = (5..=9).collect();
        let base = saliency_scores(&q, &k, 2, 5, &cand, Variant::StaticKeyNorm);
        for i in 0..16 {
            let s = saliency_scores(&q, &k, 2, i, &cand, Variant::StaticKeyNorm);
            assert_eq!(s, base, "query {i} changed static scores");
        }
    }

    #[test]
    fn head_shared_scores_are_identical_across_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::<f64>::randn(&[12, 16], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[12, 16], 1.0, &mut rng);
        let cand: Vec<usize> = (3..=7).collect();
        let s = saliency_scores(&q, &k, 4, 5, &cand, Variant::HeadSharedTopK);
        for h in 1..4 {
            assert_eq!(s[h], s[0]);
        }
    }
}
