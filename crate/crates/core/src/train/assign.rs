use crate::detector::{iou, BBox};

pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels anchors by their best ground-truth IoU.
///
/// Positive at IoU >= 0.5 (matched to the argmax, lowest index on ties),
/// negative below 0.4, ignored in between. Each ground truth then also
/// claims its single best anchor (lowest anchor index on ties); an anchor
/// claimed by several ground truths keeps the first claim in ground-truth order.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
    let mut labels: Vec<AnchorLabel> = anchors
        .iter()
        .map(|a| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(a, g);
                if v > best.0 {
                    best = (v, gi);
                }
            }
            if best.1 == usize::MAX || best.0 < NEG_IOU {
                AnchorLabel::Negative
            } else if best.0 >= POS_IOU {
                AnchorLabel::Positive(best.1)
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let mut claimed = vec![false; anchors.len()];
    for (gi, g) in gts.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (ai, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if v > best.0 {
                best = (v, ai);
            }
        }
        if best.1 != usize::MAX && !claimed[best.1] {
            claimed[best.1] = true;
            labels[best.1] = AnchorLabel::Positive(gi);
        }
    }
    labels
}
