//! Detection and segmentation quality metrics: average precision over IoU
//! thresholds and the overlap precision/recall/F-measure protocol.
//!
//! AP uses greedy score-descending matching (each ground truth claimed at
//! most once) and exact area under the raw precision-recall step curve.
//! Overlap P/R/F pairs predicted and true masks per scene by maximizing the
//! summed pixel F-score via the assignment solver, then aggregates pixel
//! tallies across scenes so the reduction is order-independent.

use crate::matching::hungarian;
use crate::raster::Gray8;

/// Pixel IoU of two masks. Conventions: IoU(empty, empty) = 1,
/// IoU(empty, nonempty) = 0.
pub fn mask_iou(a: &Gray8, b: &Gray8) -> f64 {
    assert_eq!((a.w, a.h), (b.w, b.h), "mask_iou rasters must match");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        let (fa, fb) = (*pa > 127, *pb > 127);
        if fa && fb {
            inter += 1;
        }
        if fa || fb {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One scored detection with its IoU against every ground truth of the same
/// scene (the pooled AP computation never matches across scenes).
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub score: f64,
    pub scene: usize,
    /// IoU against ground truth `g` of this scene.
    pub ious: Vec<f64>,
}

/// Average precision at one IoU threshold; `None` when there is no ground
/// truth at all. Ties in score break by detection index (deterministic).
pub fn average_precision(dets: &[DetectionRecord], gts_per_scene: &[usize], iou_thr: f64) -> Option<f64> {
    let total_gt: usize = gts_per_scene.iter().sum();
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));

    let mut claimed: Vec<Vec<bool>> = gts_per_scene.iter().map(|&n| vec![false; n]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in d.ious.iter().enumerate() {
            if iou >= iou_thr && !claimed[d.scene][g] {
                let better = match best {
                    None => true,
                    Some((_, bi)) => iou > bi,
                };
                if better {
                    best = Some((g, iou));
                }
            }
        }
        match best {
            Some((g, _)) => {
                claimed[d.scene][g] = true;
                tp += 1;
                let recall = tp as f64 / total_gt as f64;
                let precision = tp as f64 / (tp + fp) as f64;
                ap += (recall - prev_recall) * precision;
                prev_recall = recall;
            }
            None => fp += 1,
        }
    }
    Some(ap)
}

/// Mean AP over thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_range_50_95(dets: &[DetectionRecord], gts_per_scene: &[usize]) -> Option<f64> {
    let mut acc = 0.0;
    for k in 0..10 {
        acc += average_precision(dets, gts_per_scene, 0.50 + 0.05 * k as f64)?;
    }
    Some(acc / 10.0)
}

/// Pixel tallies for overlap P/R/F, summable across scenes.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrfTally {
    pub matched_inter: f64,
    pub pred_px: f64,
    pub gt_px: f64,
}

impl PrfTally {
    pub fn merge(&mut self, other: &PrfTally) {
        self.matched_inter += other.matched_inter;
        self.pred_px += other.pred_px;
        self.gt_px += other.gt_px;
    }
}

/// Per-scene tallies: match predicted to true masks by maximizing summed
/// pixel F-score, then count matched intersection pixels.
pub fn overlap_tally(preds: &[Gray8], gts: &[Gray8]) -> PrfTally {
    let pred_px: usize = preds.iter().map(|m| m.count_fg()).sum();
    let gt_px: usize = gts.iter().map(|m| m.count_fg()).sum();
    let mut tally = PrfTally {
        matched_inter: 0.0,
        pred_px: pred_px as f64,
        gt_px: gt_px as f64,
    };
    if preds.is_empty() || gts.is_empty() {
        return tally;
    }
    let mut inter = vec![0.0f64; preds.len() * gts.len()];
    let mut cost = vec![0.0f64; preds.len() * gts.len()];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let mut int_px = 0usize;
            for (a, b) in p.data.iter().zip(&g.data) {
                if *a > 127 && *b > 127 {
                    int_px += 1;
                }
            }
            let f = if p.count_fg() + g.count_fg() > 0 {
                2.0 * int_px as f64 / (p.count_fg() + g.count_fg()) as f64
            } else {
                0.0
            };
            inter[i * gts.len() + j] = int_px as f64;
            cost[i * gts.len() + j] = -f;
        }
    }
    let m = hungarian(&cost, preds.len(), gts.len()).expect("finite costs");
    for &(p, g) in &m.pairs {
        tally.matched_inter += inter[p * gts.len() + g];
    }
    tally
}

/// `(precision, recall, f_measure)` from aggregated tallies, with the
/// 0/0 -> 0 convention throughout.
pub fn prf_from_tally(t: &PrfTally) -> (f64, f64, f64) {
    let p = if t.pred_px > 0.0 { t.matched_inter / t.pred_px } else { 0.0 };
    let r = if t.gt_px > 0.0 { t.matched_inter / t.gt_px } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Ordered metric report with a per-scene breakdown, serialized as flat
/// `key=value` lines.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub metrics: Vec<(String, f64)>,
    pub per_scene: Vec<(String, Vec<(String, f64)>)>,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn push(&mut self, key: &str, value: f64) {
        self.metrics.push((key.to_string(), value));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v:.6}\n"));
        }
        for (scene, entries) in &self.per_scene {
            for (k, v) in entries {
                s.push_str(&format!("scene.{scene}.{k}={v:.6}\n"));
            }
        }
        s
    }
}
