//! Detection scoring: per-class average precision with one-to-one greedy
//! matching at each temporal IoU threshold, averaged into mAP.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Detection;
use crate::postprocess::temporal_iou;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// A ground-truth segment bound to its clip.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub clip_id: String,
    pub label: usize,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassEval {
    pub label: usize,
    pub num_gt: usize,
    /// AP per threshold, aligned with `EvalReport::thresholds`.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground truth, ascending by label. Classes
    /// without ground truth are excluded from the means rather than scored 0.
    pub classes: Vec<ClassEval>,
    pub map_per_threshold: Vec<f64>,
    pub final_map: f64,
    /// Same aggregation with the designated background label left out.
    pub excluded_label: Option<usize>,
    pub map_per_threshold_excl: Option<Vec<f64>>,
    pub final_map_excl: Option<f64>,
    pub num_predictions: usize,
    pub num_ground_truths: usize,
}

/// Greedy one-to-one matching for one class at one threshold.
///
/// Predictions are sorted by score descending (ties by start, end, clip);
/// each takes the not-yet-matched same-clip ground truth with the highest
/// tIoU and is a TP iff that tIoU reaches `tau`. Returns TP flags in the
/// sorted order.
pub fn match_predictions(
    preds: &[&Detection],
    gts: &[&GroundTruth],
    tau: f64,
) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (preds[a], preds[b]);
        pb.score
            .partial_cmp(&pa.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| pa.start_s.partial_cmp(&pb.start_s).unwrap())
            .then_with(|| pa.end_s.partial_cmp(&pb.end_s).unwrap())
            .then_with(|| pa.clip_id.cmp(&pb.clip_id))
    });

    let mut by_clip: HashMap<&str, Vec<usize>> = HashMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        by_clip.entry(gt.clip_id.as_str()).or_default().push(gi);
    }
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = preds[pi];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_clip.get(p.clip_id.as_str()) {
            for &gi in cands {
                if taken[gi] {
                    continue;
                }
                let g = gts[gi];
                let iou = temporal_iou((p.start_s, p.end_s), (g.start_s, g.end_s))?;
                let better = match best {
                    None => true,
                    Some((bgi, biou)) => {
                        iou > biou
                            || (iou == biou
                                && (g.start_s, g.end_s)
                                    < (gts[bgi].start_s, gts[bgi].end_s))
                    }
                };
                if better {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, iou)) if iou >= tau => {
                taken[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    Ok(flags)
}

/// Area under the precision envelope (all-points interpolation) given TP
/// flags in score order.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Eval("average_precision needs num_gt >= 1".into()));
    }
    if flags.is_empty() {
        return Ok(0.0);
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // precision envelope: running max from the right
    let mut env = precisions.clone();
    for i in (0..env.len() - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..env.len() {
        ap += (recalls[i] - prev_recall) * env[i];
        prev_recall = recalls[i];
    }
    Ok(ap)
}

/// Full scoring protocol over a prediction/ground-truth set.
///
/// `excluded_label`, when given (the background class), adds a second
/// aggregation that skips it.
pub fn evaluate(
    preds: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    excluded_label: Option<usize>,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Eval("nothing to evaluate: no ground truths".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Eval("no thresholds given".into()));
    }

    let mut labels: Vec<usize> = gts.iter().map(|g| g.label).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut classes = Vec::with_capacity(labels.len());
    for &label in &labels {
        let class_preds: Vec<&Detection> = preds.iter().filter(|p| p.label == label).collect();
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.label == label).collect();
        let mut ap = Vec::with_capacity(thresholds.len());
        for &tau in thresholds {
            let flags = match_predictions(&class_preds, &class_gts, tau)?;
            ap.push(average_precision(&flags, class_gts.len())?);
        }
        classes.push(ClassEval {
            label,
            num_gt: class_gts.len(),
            ap,
        });
    }

    let mean_over = |keep: &dyn Fn(&ClassEval) -> bool| -> Option<Vec<f64>> {
        let kept: Vec<&ClassEval> = classes.iter().filter(|c| keep(c)).collect();
        if kept.is_empty() {
            return None;
        }
        Some(
            (0..thresholds.len())
                .map(|ti| kept.iter().map(|c| c.ap[ti]).sum::<f64>() / kept.len() as f64)
                .collect(),
        )
    };

    let map_per_threshold = mean_over(&|_| true).expect("at least one class");
    let final_map = map_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;

    let (map_excl, final_excl) = match excluded_label {
        Some(bg) => match mean_over(&|c| c.label != bg) {
            Some(m) => {
                let f = m.iter().sum::<f64>() / thresholds.len() as f64;
                (Some(m), Some(f))
            }
            None => (None, None),
        },
        None => (None, None),
    };

    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        map_per_threshold,
        final_map,
        excluded_label,
        map_per_threshold_excl: map_excl,
        final_map_excl: final_excl,
        num_predictions: preds.len(),
        num_ground_truths: gts.len(),
    })
}

/// Aligned plain-text table of per-class AP per threshold.
pub fn render_table(report: &EvalReport, label_names: &[String]) -> String {
    let mut out = String::new();
    let name = |label: usize| -> String {
        label_names
            .get(label)
            .cloned()
            .unwrap_or_else(|| format!("class-{label}"))
    };
    let excl_row = report
        .excluded_label
        .map(|bg| format!("mAP w/o {}", name(bg)));
    let width = report
        .classes
        .iter()
        .map(|c| name(c.label).len())
        .chain(["class".len(), "mAP".len()])
        .chain(excl_row.iter().map(|s| s.len()))
        .max()
        .unwrap_or(8)
        .max(8);
    out.push_str(&format!("{:<width$}  {:>6}", "class", "#gt"));
    for t in &report.thresholds {
        out.push_str(&format!("  {:>7}", format!("AP@{t:.1}")));
    }
    out.push_str(&format!("  {:>7}\n", "mean"));
    for c in &report.classes {
        out.push_str(&format!("{:<width$}  {:>6}", name(c.label), c.num_gt));
        for ap in &c.ap {
            out.push_str(&format!("  {:>7.4}", ap));
        }
        let mean = c.ap.iter().sum::<f64>() / c.ap.len() as f64;
        out.push_str(&format!("  {:>7.4}\n", mean));
    }
    out.push_str(&format!("{:<width$}  {:>6}", "mAP", ""));
    for m in &report.map_per_threshold {
        out.push_str(&format!("  {:>7.4}", m));
    }
    out.push_str(&format!("  {:>7.4}\n", report.final_map));
    if let (Some(excl), Some(f), Some(bg)) = (
        &report.map_per_threshold_excl,
        report.final_map_excl,
        report.excluded_label,
    ) {
        out.push_str(&format!(
            "{:<width$}  {:>6}",
            format!("mAP w/o {}", name(bg)),
            ""
        ));
        for m in excl {
            out.push_str(&format!("  {:>7.4}", m));
        }
        out.push_str(&format!("  {:>7.4}\n", f));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(clip: &str, label: usize, start: f64, end: f64, score: f64) -> Detection {
        Detection {
            clip_id: clip.into(),
            label,
            start_s: start,
            end_s: end,
            score,
        }
    }

    fn gt(clip: &str, label: usize, start: f64, end: f64) -> GroundTruth {
        GroundTruth {
            clip_id: clip.into(),
            label,
            start_s: start,
            end_s: end,
        }
    }

    #[test]
    fn exact_prediction_is_tp_at_every_threshold() {
        let p = det("a", 0, 1.0, 2.0, 0.9);
        let g = gt("a", 0, 1.0, 2.0);
        for tau in DEFAULT_THRESHOLDS {
            let flags = match_predictions(&[&p], &[&g], tau).unwrap();
            assert_eq!(flags, vec![true]);
        }
    }

    #[test]
    fn one_to_one_constraint() {
        let p1 = det("a", 0, 1.0, 2.0, 0.9);
        let p2 = det("a", 0, 1.05, 2.05, 0.8);
        let g = gt("a", 0, 1.0, 2.0);
        let flags = match_predictions(&[&p1, &p2], &[&g], 0.5).unwrap();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn matching_is_per_clip() {
        let p = det("a", 0, 1.0, 2.0, 0.9);
        let g = gt("b", 0, 1.0, 2.0);
        let flags = match_predictions(&[&p], &[&g], 0.3).unwrap();
        assert_eq!(flags, vec![false]);
    }

    #[test]
    fn ap_trivial_cases() {
        assert_eq!(average_precision(&[true, true], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false], 1).unwrap(), 0.0);
        assert!(average_precision(&[], 0).is_err());
    }

    #[test]
    fn ap_hand_computed_fixture() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!(
            (ap - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-12,
            "expected 0.8333.., got {ap}"
        );
    }

    #[test]
    fn greedy_matching_fixture_against_oracle() {
        // 3 gts, 5 preds with mixed overlaps: compare to an independently
        // written greedy that rescans IoUs at each step
        let gts = vec![
            gt("a", 0, 0.0, 2.0),
            gt("a", 0, 3.0, 5.0),
            gt("a", 0, 6.0, 8.0),
        ];
        let preds = vec![
            det("a", 0, 0.2, 2.2, 0.95),
            det("a", 0, 3.1, 4.9, 0.90),
            det("a", 0, 0.0, 2.0, 0.85),
            det("a", 0, 5.8, 7.6, 0.80),
            det("a", 0, 4.0, 6.5, 0.75),
        ];
        let tau = 0.5;
        let pred_refs: Vec<&Detection> = preds.iter().collect();
        let gt_refs: Vec<&GroundTruth> = gts.iter().collect();
        let flags = match_predictions(&pred_refs, &gt_refs, tau).unwrap();

        // oracle: same contract, different bookkeeping
        let mut available: Vec<bool> = vec![true; gts.len()];
        let mut expected = Vec::new();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&x, &y| preds[y].score.partial_cmp(&preds[x].score).unwrap());
        for pi in order {
            let p = &preds[pi];
            let mut best_iou = -1.0;
            let mut best_gi = None;
            for (gi, g) in gts.iter().enumerate() {
                if !available[gi] || g.clip_id != p.clip_id {
                    continue;
                }
                let inter = (p.end_s.min(g.end_s) - p.start_s.max(g.start_s)).max(0.0);
                let union = (p.end_s - p.start_s) + (g.end_s - g.start_s) - inter;
                let iou = inter / union;
                if iou > best_iou {
                    best_iou = iou;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                if best_iou >= tau {
                    available[gi] = false;
                    expected.push(true);
                    continue;
                }
            }
            expected.push(false);
        }
        assert_eq!(flags, expected);
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let gts = vec![gt("a", 0, 1.0, 2.0), gt("a", 1, 3.0, 4.0), gt("b", 0, 0.5, 2.5)];
        let preds: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.clip_id, g.label, g.start_s, g.end_s, 1.0))
            .collect();
        let report = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS, None).unwrap();
        assert_eq!(report.final_map, 1.0);

        let empty = evaluate(&[], &gts, &DEFAULT_THRESHOLDS, None).unwrap();
        assert_eq!(empty.final_map, 0.0);

        assert!(evaluate(&preds, &[], &DEFAULT_THRESHOLDS, None).is_err());
    }

    #[test]
    fn classes_without_gt_are_excluded_not_zeroed() {
        let gts = vec![gt("a", 0, 1.0, 2.0)];
        let preds = vec![
            det("a", 0, 1.0, 2.0, 0.9),
            det("a", 5, 1.0, 2.0, 0.9), // no gt for label 5
        ];
        let report = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS, None).unwrap();
        assert_eq!(report.classes.len(), 1);
        assert_eq!(report.final_map, 1.0);
    }

    #[test]
    fn excluded_label_aggregation() {
        let gts = vec![gt("a", 0, 1.0, 2.0), gt("a", 1, 3.0, 4.0)];
        let preds = vec![det("a", 0, 1.0, 2.0, 0.9)]; // class 1 missed
        let report = evaluate(&preds, &gts, &[0.5], Some(0)).unwrap();
        assert_eq!(report.final_map, 0.5);
        assert_eq!(report.final_map_excl, Some(0.0));
    }

    #[test]
    fn monotone_in_threshold_on_random_fixtures() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for clip in 0..3 {
                let cid = format!("c{clip}");
                for _ in 0..rng.gen_range(1..4) {
                    let s = rng.gen_range(0.0..8.0);
                    let e = s + rng.gen_range(0.3..2.0);
                    gts.push(gt(&cid, rng.gen_range(0..2), s, e));
                }
                for _ in 0..rng.gen_range(0..6) {
                    let s = rng.gen_range(0.0..8.0);
                    let e = s + rng.gen_range(0.3..2.0);
                    preds.push(det(&cid, rng.gen_range(0..2), s, e, rng.gen::<f64>()));
                }
            }
            let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
            let report = evaluate(&preds, &gts, &taus, None).unwrap();
            for c in &report.classes {
                for w in c.ap.windows(2) {
                    assert!(
                        w[0] >= w[1] - 1e-12,
                        "AP not monotone for class {}: {:?}",
                        c.label,
                        c.ap
                    );
                }
            }
        }
    }

    #[test]
    fn equal_score_permutation_invariance() {
        let gts = vec![gt("a", 0, 0.0, 2.0), gt("a", 0, 3.0, 5.0)];
        let mut preds = vec![
            det("a", 0, 0.1, 2.1, 0.8),
            det("a", 0, 3.2, 5.2, 0.8),
            det("a", 0, 0.4, 1.4, 0.8),
        ];
        let r1 = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS, None).unwrap();
        preds.reverse();
        let r2 = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS, None).unwrap();
        assert_eq!(r1.classes[0].ap, r2.classes[0].ap);
    }

    #[test]
    fn table_renders_all_rows() {
        let gts = vec![gt("a", 0, 1.0, 2.0), gt("a", 1, 3.0, 4.0)];
        let preds = vec![det("a", 0, 1.0, 2.0, 0.9)];
        let report = evaluate(&preds, &gts, &DEFAULT_THRESHOLDS, Some(0)).unwrap();
        let table = render_table(&report, &["Normal".into(), "Rearing".into()]);
        assert!(table.contains("Normal"));
        assert!(table.contains("Rearing"));
        assert!(table.contains("mAP w/o Normal"));
        assert!(table.lines().count() >= 5);
    }
}
