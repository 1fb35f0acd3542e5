use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Detection};

use super::data::ObjectRecord;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP at IoU 0.5 per class; `None` for classes without ground truth.
    pub per_class_ap50: Vec<Option<f64>>,
    pub map50: f64,
    /// Mean over the requested thresholds.
    pub map: f64,
    pub thresholds: Vec<f64>,
    pub num_detections: usize,
    pub num_ground_truths: usize,
}

fn by_score(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.0.cmp(&b.0))
        .then(a.1.bbox.x_min.total_cmp(&b.1.bbox.x_min))
        .then(a.1.bbox.y_min.total_cmp(&b.1.bbox.y_min))
        .then(a.1.bbox.x_max.total_cmp(&b.1.bbox.x_max))
        .then(a.1.bbox.y_max.total_cmp(&b.1.bbox.y_max))
}

/// Greedy matching of one class at threshold `t`. Returns true-positive flags
/// in descending-score order and the number of ground truths.
pub fn match_detections(dets: &[Vec<Detection>], gts: &[Vec<ObjectRecord>], class: usize, t: f64) -> (Vec<bool>, usize) {
    let mut flat: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().filter(|d| d.class == class).map(move |d| (i, d)))
        .collect();
    flat.sort_by(by_score);
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let tp = flat
        .iter()
        .map(|&(img, d)| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.get(img).into_iter().flatten().enumerate() {
                if g.class != class || used[img][j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= t && best.map_or(true, |(b, _)| v > b) {
                    best = Some((v, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, n_gt)
}

/// All-point interpolated area under the precision/recall curve.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

fn mean_ap(dets: &[Vec<Detection>], gts: &[Vec<ObjectRecord>], num_classes: usize, t: f64) -> (Vec<Option<f64>>, f64) {
    let aps: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let (tp, n) = match_detections(dets, gts, c, t);
            average_precision(&tp, n)
        })
        .collect();
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    let m = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (aps, m)
}

/// Per-class AP at 0.5 and mAP averaged over `thresholds`. Classes without
/// ground truth are excluded from the means.
pub fn evaluate_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<ObjectRecord>],
    thresholds: &[f64],
    num_classes: usize,
) -> EvalReport {
    let (per_class_ap50, map50) = mean_ap(dets, gts, num_classes, 0.5);
    let map = if thresholds.is_empty() {
        map50
    } else {
        thresholds.iter().map(|&t| mean_ap(dets, gts, num_classes, t).1).sum::<f64>() / thresholds.len() as f64
    };
    EvalReport {
        per_class_ap50,
        map50,
        map,
        thresholds: thresholds.to_vec(),
        num_detections: dets.iter().map(Vec::len).sum(),
        num_ground_truths: gts.iter().map(Vec::len).sum(),
    }
}
