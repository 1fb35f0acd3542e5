use serde::{Deserialize, Serialize};

use super::anchors::Anchor;

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bound on log-scale deltas before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000 / 16)

/// Regression target of `gt` relative to `a`.
pub fn encode(gt: &BBox, a: &Anchor) -> [f64; 4] {
    let (cx, cy) = gt.center();
    [
        (cx - a.cx) / a.w,
        (cy - a.cy) / a.h,
        (gt.width() / a.w).ln(),
        (gt.height() / a.h).ln(),
    ]
}

/// Inverse of [`encode`], without clipping.
pub fn decode(d: &[f64; 4], a: &Anchor) -> BBox {
    let cx = a.cx + d[0] * a.w;
    let cy = a.cy + d[1] * a.h;
    let w = a.w * d[2].min(MAX_LOG_SCALE).exp();
    let h = a.h * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Decodes every anchor's deltas and clips to the image.
pub fn decode_boxes(deltas: &[[f64; 4]], anchors: &[Anchor], width: f64, height: f64) -> Vec<BBox> {
    assert_eq!(deltas.len(), anchors.len(), "one delta row per anchor");
    deltas
        .iter()
        .zip(anchors)
        .map(|(d, a)| decode(d, a).clip(width, height))
        .collect()
}
