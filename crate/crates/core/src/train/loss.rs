use crate::tape::{focal_term, smooth_l1_term, FocalParams, Target};

/// Smooth-L1 transition point for box regression.
pub const BOX_BETA: f64 = 0.1;

/// Focal loss summed over non-ignored entries and divided by the number of
/// positives (at least 1).
///
/// Positives contribute `-alpha (1-p)^gamma ln p`, negatives
/// `-(1-alpha) p^gamma ln(1-p)`; `p` is clamped to `[1e-7, 1-1e-7]`.
pub fn focal_loss(probs: &[f64], targets: &[Target], params: FocalParams) -> f64 {
    assert_eq!(probs.len(), targets.len(), "one target per probability");
    let mut total = 0.0;
    let mut positives = 0usize;
    for (&p, &t) in probs.iter().zip(targets) {
        if t != Target::Ignore {
            total += focal_term(p, t, params).0;
        }
        positives += (t == Target::Positive) as usize;
    }
    total / positives.max(1) as f64
}

/// Smooth-L1 summed over the four coordinates, averaged over positive anchors.
pub fn box_loss(pred: &[[f64; 4]], target: &[[f64; 4]], positives: &[bool], beta: f64) -> f64 {
    assert!(pred.len() == target.len() && pred.len() == positives.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, t), &pos) in pred.iter().zip(target).zip(positives) {
        if pos {
            count += 1;
            for j in 0..4 {
                total += smooth_l1_term(p[j] - t[j], beta).0;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_positive_is_free() {
        let l = focal_loss(&[1.0], &[Target::Positive], FocalParams::default());
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn box_loss_edge_cases() {
        let p = [[0.1, 0.2, 0.3, 0.4]];
        assert_eq!(box_loss(&p, &p, &[true], BOX_BETA), 0.0);
        assert_eq!(box_loss(&p, &[[0.0; 4]], &[false], BOX_BETA), 0.0);
    }

    #[test]
    fn ignored_entries_do_not_count() {
        let params = FocalParams::default();
        let a = focal_loss(&[0.3], &[Target::Negative], params);
        let b = focal_loss(&[0.3, 0.9], &[Target::Negative, Target::Ignore], params);
        assert_eq!(a, b);
    }
}
