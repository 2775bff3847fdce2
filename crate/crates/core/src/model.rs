//! Full detector: encoder, heads and the per-clip forward passes used by
//! training and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode, EncoderConfig, EncoderParams, PyramidVars};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::heads::{
    assign_targets, classify, decode_segments, detection_loss, regress, DetectionLoss,
    Detection, HeadConfig, HeadParams, PyrGeom, SegmentAnnotation,
};
use crate::params::{Bound, ParamStore};
use crate::postprocess::{soft_nms, NmsConfig};
use crate::scalar::Scalar;
use crate::synth::derive_seed;
use crate::tensor::Tensor;

pub struct RaSeformer<S: Scalar> {
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub store: ParamStore<S>,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

/// One clip's graph with every head output still attached.
pub struct ClipForward<S: Scalar> {
    pub graph: Graph<S>,
    pub bound: Bound,
    pub pyramid: PyramidVars,
    pub logits: Vec<Var>,
    pub offsets: Vec<Var>,
}

impl<S: Scalar> RaSeformer<S> {
    pub fn init(encoder_cfg: EncoderConfig, head_cfg: HeadConfig, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        head_cfg.validate(encoder_cfg.levels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init", 0));
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &encoder_cfg, &mut rng);
        let heads = HeadParams::init(
            &mut store,
            &head_cfg,
            encoder_cfg.d_model,
            encoder_cfg.levels,
            &mut rng,
        );
        Ok(RaSeformer {
            encoder_cfg,
            head_cfg,
            store,
            encoder,
            heads,
        })
    }

    pub fn forward(&self, features: &Tensor<S>, mask: &[bool]) -> Result<ClipForward<S>> {
        let mut graph = Graph::new();
        let bound = graph.bind(&self.store);
        let x = graph.constant(features.clone());
        let pyramid = encode(&mut graph, &bound, &self.encoder, x, mask, &self.encoder_cfg)?;
        let logits = classify(&mut graph, &bound, &self.heads, &pyramid)?;
        let offsets = regress(&mut graph, &bound, &self.heads, &pyramid)?;
        Ok(ClipForward {
            graph,
            bound,
            pyramid,
            logits,
            offsets,
        })
    }

    /// Forward plus target assignment plus loss, ready for backward.
    pub fn loss_for_clip(
        &self,
        features: &Tensor<S>,
        mask: &[bool],
        gts: &[SegmentAnnotation],
        delta_base_s: f64,
    ) -> Result<(ClipForward<S>, DetectionLoss)> {
        let mut fwd = self.forward(features, mask)?;
        let geom = PyrGeom::of_vars(&fwd.pyramid);
        let targets = assign_targets(gts, &geom, &self.head_cfg, delta_base_s)?;
        let loss = detection_loss(
            &mut fwd.graph,
            &fwd.bound,
            &self.heads,
            &fwd.logits,
            &fwd.offsets,
            &targets,
            &geom,
        )?;
        Ok((fwd, loss))
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.encoder_cfg.levels)
            .map(|l| self.heads.scale_value(&self.store, l))
            .collect()
    }

    /// Full inference for one clip: forward, decode, Soft-NMS.
    pub fn infer_clip(
        &self,
        clip_id: &str,
        features: &Tensor<S>,
        mask: &[bool],
        delta_base_s: f64,
        duration_s: f64,
        nms: &NmsConfig,
    ) -> Result<Vec<Detection>> {
        let fwd = self.forward(features, mask)?;
        let geom = PyrGeom::of_vars(&fwd.pyramid);
        let logits: Vec<Tensor<f64>> = fwd
            .logits
            .iter()
            .map(|&v| fwd.graph.value(v).cast())
            .collect();
        let offsets: Vec<Tensor<f64>> = fwd
            .offsets
            .iter()
            .map(|&v| fwd.graph.value(v).cast())
            .collect();
        let raw = decode_segments(
            clip_id,
            &logits,
            &offsets,
            &self.scales(),
            &geom,
            delta_base_s,
            duration_s,
        )?;
        soft_nms(&raw, nms)
    }
}
