//! Set matching: minimum-cost assignment between predictions and ground
//! truths, the DETR-style matching cost, and plain box geometry (IoU/GIoU).

use crate::config::Config;
use crate::error::{Error, Result};

/// One-to-one assignment between predictions (rows) and ground truths
/// (columns): `min(K, M)` pairs plus the unmatched prediction indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index)` pairs, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions assigned to "no object".
    pub unmatched: Vec<usize>,
}

/// Minimum-cost injective assignment of a `rows x cols` matrix by the
/// O(n^3) augmenting-path (shortest-path with potentials) algorithm.
/// Scan order is ascending row then column, so the result is deterministic.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<MatchResult> {
    if cost.len() != rows * cols {
        return Err(Error::dim("hungarian", format!("{} entries vs {rows}x{cols}", cost.len())));
    }
    if cost.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in assignment cost matrix".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult { pairs: Vec::new(), unmatched: (0..rows).collect() });
    }

    // the core solver needs rows <= cols; transpose if needed
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j * cols + i]
        } else {
            cost[i * cols + j]
        }
    };

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // row assigned to column j (1-based, 0 = free)
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if matched_row[j] != 0 {
            let (r, c) = (matched_row[j] - 1, j - 1);
            pairs.push(if transposed { (c, r) } else { (r, c) });
        }
    }
    pairs.sort_unstable();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let unmatched = (0..rows).filter(|p| !matched.contains(p)).collect();
    Ok(MatchResult { pairs, unmatched })
}

/// Total cost of an assignment under a cost matrix.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * cols + j]).sum()
}

// ── box geometry ─────────────────────────────────────────────────────

/// `(cx, cy, w, h)` to corner form `[x0, y0, x1, y1]`.
pub fn cxcywh_to_corners(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Corner form to `(cx, cy, w, h)`.
pub fn corners_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    let [x0, y0, x1, y1] = b;
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

/// Plain IoU of two corner-form boxes; zero-area union counts as IoU 0.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU of corner-form boxes: `IoU - (hull - union) / hull`,
/// in (-1, 1]. Defined for disjoint and degenerate boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull_w = a[2].max(b[2]) - a[0].min(b[0]);
    let hull_h = a[3].max(b[3]) - a[1].min(b[1]);
    let hull = hull_w * hull_h;
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection_area(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

/// DETR-style matching cost between one prediction and one ground truth:
/// `lambda_cls * (-p_object) + lambda_l1 * |box - gt|_1 + lambda_giou * (1 - GIoU)`.
/// Boxes in normalized `(cx, cy, w, h)`.
pub fn match_cost(p_object: f64, pred_box: [f64; 4], gt_box: [f64; 4], cfg: &Config) -> f64 {
    let l1: f64 = pred_box.iter().zip(&gt_box).map(|(a, b)| (a - b).abs()).sum();
    let g = giou(cxcywh_to_corners(pred_box), cxcywh_to_corners(gt_box));
    cfg.lambda_cls * (-p_object) + cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - g)
}
