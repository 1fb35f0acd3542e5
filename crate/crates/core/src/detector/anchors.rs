/// Reference box as center and size in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn bbox(&self) -> super::BBox {
        super::BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Anchors for every level, cell (row-major) and aspect ratio, in that order.
///
/// Base size is `base_multiplier * stride`; ratio `r = w / h` keeps the area
/// of the square anchor: `w = base * sqrt(r)`, `h = base / sqrt(r)`.
pub fn generate_anchors(levels: &[LevelGeometry], ratios: &[f64], base_multiplier: f64) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(anchor_count(levels, ratios.len()));
    for lv in levels {
        let s = lv.stride as f64;
        let base = base_multiplier * s;
        for y in 0..lv.height {
            for x in 0..lv.width {
                let cx = (x as f64 + 0.5) * s;
                let cy = (y as f64 + 0.5) * s;
                for &r in ratios {
                    let k = r.sqrt();
                    out.push(Anchor {
                        cx,
                        cy,
                        w: base * k,
                        h: base / k,
                    });
                }
            }
        }
    }
    out
}

pub fn anchor_count(levels: &[LevelGeometry], per_cell: usize) -> usize {
    levels.iter().map(|l| l.height * l.width * per_cell).sum()
}
