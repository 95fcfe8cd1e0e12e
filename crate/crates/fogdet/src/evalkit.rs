//! VOC-style detection evaluation: greedy matching, per-class Average
//! Precision, and mAP, with streamed accumulation across images.
//!
//! AP uses all-point interpolation by default (area under the precision
//! envelope); 11-point interpolation is available for comparison. Score
//! ties are broken by input order (stable sort), so results are
//! deterministic for a fixed detection order.

use std::collections::BTreeMap;

use crate::detection::{iou, Detection, GtBox};

/// How the precision envelope is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApInterpolation {
    /// Exact area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean of envelope precision at recalls 0.0, 0.1, .., 1.0.
    ElevenPoint,
}

/// Evaluation summary. Classes enter `per_class_ap` (and the mean) only
/// when they have at least one ground-truth instance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map_score: f64,
    /// Raw (recall, precision) points per class, at descending score.
    pub pr_curves: BTreeMap<usize, Vec<(f64, f64)>>,
}

/// Greedy per-image matching: in descending score order, each detection
/// takes the highest-IoU unmatched ground truth of its class with
/// IoU ≥ `iou_threshold`. Returned flags are in input order.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_threshold: f32) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut gt_taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f32)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.class_id != d.class_id {
                continue;
            }
            let ov = iou(&d.bbox, &g.bbox);
            if ov >= iou_threshold && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            flags[di] = true;
        }
    }
    flags
}

/// AP from scored TP/FP flags. `None` when `num_gt` is zero: such
/// classes are undefined and excluded from the mean.
pub fn average_precision(
    scored_flags: &[(f32, bool)],
    num_gt: usize,
    interp: ApInterpolation,
) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored_flags.len()).collect();
    order.sort_by(|&a, &b| scored_flags[b].0.total_cmp(&scored_flags[a].0));

    let mut recalls = Vec::with_capacity(order.len());
    let mut precisions = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if scored_flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / num_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }

    // Precision envelope: best precision at any recall ≥ r.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }

    let ap = match interp {
        ApInterpolation::AllPoint => {
            let mut area = 0.0;
            let mut prev_r = 0.0;
            for i in 0..envelope.len() {
                area += (recalls[i] - prev_r) * envelope[i];
                prev_r = recalls[i];
            }
            area
        }
        ApInterpolation::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let r = k as f64 / 10.0;
                let best = recalls
                    .iter()
                    .zip(&envelope)
                    .find(|(rec, _)| **rec >= r - 1e-12)
                    .map_or(0.0, |(_, p)| *p);
                total += best;
            }
            total / 11.0
        }
    };
    Some(ap)
}

/// Streamed evaluation state: add images one at a time, then `finish`.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    iou_threshold: f32,
    scored_flags: BTreeMap<usize, Vec<(f32, bool)>>,
    gt_counts: BTreeMap<usize, usize>,
}

impl EvalAccumulator {
    pub fn new(iou_threshold: f32) -> Self {
        EvalAccumulator {
            iou_threshold,
            ..Default::default()
        }
    }

    pub fn add_image(&mut self, dets: &[Detection], gts: &[GtBox]) {
        let flags = match_detections(dets, gts, self.iou_threshold);
        for (d, tp) in dets.iter().zip(flags) {
            self.scored_flags
                .entry(d.class_id)
                .or_default()
                .push((d.score, tp));
        }
        for g in gts {
            *self.gt_counts.entry(g.class_id).or_default() += 1;
        }
    }

    pub fn finish(&self, interp: ApInterpolation) -> EvalResult {
        let empty: Vec<(f32, bool)> = Vec::new();
        let mut per_class_ap = BTreeMap::new();
        let mut pr_curves = BTreeMap::new();
        for (&class_id, &num_gt) in &self.gt_counts {
            if num_gt == 0 {
                continue;
            }
            let flags = self.scored_flags.get(&class_id).unwrap_or(&empty);
            let ap = average_precision(flags, num_gt, interp)
                .expect("num_gt > 0 always yields an AP");
            per_class_ap.insert(class_id, ap);
            pr_curves.insert(class_id, pr_points(flags, num_gt));
        }
        let map_score = if per_class_ap.is_empty() {
            0.0
        } else {
            per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
        };
        EvalResult {
            per_class_ap,
            map_score,
            pr_curves,
        }
    }
}

fn pr_points(scored_flags: &[(f32, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scored_flags.len()).collect();
    order.sort_by(|&a, &b| scored_flags[b].0.total_cmp(&scored_flags[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    order
        .into_iter()
        .map(|i| {
            if scored_flags[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// One-shot mAP over per-image detection/ground-truth pairs.
pub fn mean_ap(
    per_image: &[(Vec<Detection>, Vec<GtBox>)],
    iou_threshold: f32,
    interp: ApInterpolation,
) -> EvalResult {
    let mut acc = EvalAccumulator::new(iou_threshold);
    for (dets, gts) in per_image {
        acc.add_image(dets, gts);
    }
    acc.finish(interp)
}
