use super::boxes::{iou, Detection};

/// Greedy per-class suppression in descending score order.
///
/// Ties in score keep input order. Returns survivors sorted by class, then
/// score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[a]
            .class
            .cmp(&dets[b].class)
            .then(dets[b].score.total_cmp(&dets[a].score))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class == dets[i].class && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}
