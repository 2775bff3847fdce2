//! Inference-time filtering: score floor, per-class Soft-NMS with Gaussian
//! decay, and a global segment cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NmsMethod {
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "hard")]
    Hard,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub sigma: f64,
    pub max_segments: usize,
    pub score_floor: f64,
    pub method: NmsMethod,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.1,
            sigma: 0.5,
            max_segments: 200,
            score_floor: 0.001,
            method: NmsMethod::Gaussian,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!(
                "iou_threshold {} outside [0, 1]",
                self.iou_threshold
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.max_segments == 0 {
            return Err(Error::Config("max_segments must be >= 1".into()));
        }
        if self.score_floor < 0.0 {
            return Err(Error::Config("score_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Intersection over union of two 1-D intervals given as (start, end).
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if a.1 <= a.0 || b.1 <= b.0 {
        return Err(Error::InvalidArgument {
            op: "temporal_iou",
            msg: format!("degenerate interval: {a:?} vs {b:?}"),
        });
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// Deterministic ordering: score descending, ties by (start, end, label)
/// ascending.
fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.start_s.partial_cmp(&b.start_s).unwrap())
        .then_with(|| a.end_s.partial_cmp(&b.end_s).unwrap())
        .then_with(|| a.label.cmp(&b.label))
}

/// Per-class Soft-NMS over one clip's detections.
///
/// Per class: repeatedly pop the highest-scored detection; every remaining
/// same-class detection with tIoU above the threshold against it has its
/// score decayed (Gaussian exp(-iou^2 / sigma) or hard (1 - iou)) and is
/// dropped as soon as it falls below the score floor. Afterwards the
/// classes are merged, capped to `max_segments` by final score and sorted
/// score-descending with (start, end, label) tie-breaks.
pub fn soft_nms(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let clip = &dets[0].clip_id;
    if dets.iter().any(|d| &d.clip_id != clip) {
        return Err(Error::InvalidArgument {
            op: "soft_nms",
            msg: "detections from multiple clips".into(),
        });
    }

    let mut labels: Vec<usize> = dets.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut survivors: Vec<Detection> = Vec::new();
    for label in labels {
        let mut pool: Vec<Detection> = dets
            .iter()
            .filter(|d| d.label == label && d.score >= cfg.score_floor)
            .cloned()
            .collect();
        while !pool.is_empty() {
            let best = pool
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| det_order(a, b))
                .map(|(i, _)| i)
                .expect("non-empty pool");
            let seed = pool.swap_remove(best);
            let mut next = Vec::with_capacity(pool.len());
            for mut d in pool {
                let iou = temporal_iou((seed.start_s, seed.end_s), (d.start_s, d.end_s))?;
                if iou > cfg.iou_threshold {
                    d.score *= match cfg.method {
                        NmsMethod::Gaussian => (-iou * iou / cfg.sigma).exp(),
                        NmsMethod::Hard => 1.0 - iou,
                    };
                }
                if d.score >= cfg.score_floor {
                    next.push(d);
                }
            }
            pool = next;
            survivors.push(seed);
        }
    }

    survivors.sort_by(det_order);
    survivors.truncate(cfg.max_segments);
    Ok(survivors)
}
