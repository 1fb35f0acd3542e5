use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{iou, BBox};
use crate::error::{Result, SacError};
use crate::params::seeded_rng;

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];
pub const IMAGE_MAGIC: &[u8; 4] = b"SIMG";
const ANNOTATIONS: &str = "annotations.json";
const PLACEMENT_TRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub channels: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_objects: usize,
    /// Upper bound on pairwise IoU between objects of one image.
    pub max_overlap: f64,
    /// Standard deviation of the additive background noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            channels: 3,
            min_scale: 8.0,
            max_scale: 48.0,
            max_objects: 4,
            max_overlap: 0.2,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
}

/// One rendered image, planar `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pixels: Vec<f32>,
    pub objects: Vec<ObjectRecord>,
}

fn inside(class: usize, b: &BBox, x: f64, y: f64) -> bool {
    if x < b.x_min || x > b.x_max || y < b.y_min || y > b.y_max {
        return false;
    }
    let s = b.width();
    let (cx, cy) = b.center();
    match class {
        0 => (x - cx).powi(2) + (y - cy).powi(2) <= (s / 2.0).powi(2),
        1 => true,
        _ => (x - cx).abs() <= (y - b.y_min) / 2.0,
    }
}

/// Renders image `index` of the dataset identified by `seed`.
pub fn render_sample(seed: u64, index: u64, cfg: &SynthConfig) -> Sample {
    let mut rng = seeded_rng(seed, index);
    let size = cfg.size as f64;
    let count = rng.gen_range(1..=cfg.max_objects);
    let (lo, hi) = (cfg.min_scale.ln(), cfg.max_scale.ln());

    let mut objects: Vec<ObjectRecord> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..CLASS_NAMES.len());
        let s = rng.gen_range(lo..hi).exp();
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.gen_range(0.0..=size - s);
            let y = rng.gen_range(0.0..=size - s);
            let bbox = BBox::new(x, y, x + s, y + s);
            if objects.iter().all(|o| iou(&o.bbox, &bbox) < cfg.max_overlap) {
                objects.push(ObjectRecord { class, bbox });
                break;
            }
        }
    }

    let plane = cfg.size * cfg.size;
    let mut pixels = vec![0f32; cfg.channels * plane];
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise level");
    for c in 0..cfg.channels {
        let base: f64 = rng.gen_range(0.0..0.3);
        for v in &mut pixels[c * plane..(c + 1) * plane] {
            *v = (base + noise.sample(&mut rng)) as f32;
        }
    }
    // 2x2 supersampling for the shape coverage.
    const OFFS: [f64; 2] = [0.25, 0.75];
    for o in &objects {
        let color: Vec<f64> = (0..cfg.channels).map(|_| rng.gen_range(0.5..1.0)).collect();
        let x0 = o.bbox.x_min.floor() as usize;
        let y0 = o.bbox.y_min.floor() as usize;
        let x1 = (o.bbox.x_max.ceil() as usize).min(cfg.size);
        let y1 = (o.bbox.y_max.ceil() as usize).min(cfg.size);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut hits = 0;
                for oy in OFFS {
                    for ox in OFFS {
                        if inside(o.class, &o.bbox, px as f64 + ox, py as f64 + oy) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / 4.0;
                for (c, col) in color.iter().enumerate() {
                    let v = &mut pixels[c * plane + py * cfg.size + px];
                    *v = ((1.0 - a) * *v as f64 + a * col) as f32;
                }
            }
        }
    }
    Sample { pixels, objects }
}

pub fn write_image_record(path: &Path, shape: [usize; 3], pixels: &[f32]) -> Result<()> {
    let [c, h, w] = shape;
    assert_eq!(pixels.len(), c * h * w);
    let mut buf = Vec::with_capacity(16 + 4 * pixels.len());
    buf.extend_from_slice(IMAGE_MAGIC);
    for d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| SacError::io(path, e))
}

/// Reads an image record, returning `([C, H, W], pixels)`.
pub fn read_image_record(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| SacError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(SacError::format(path, "missing SIMG header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n = shape.iter().product::<usize>();
    if bytes.len() != 16 + 4 * n {
        return Err(SacError::format(
            path,
            format!("header declares {shape:?} ({n} values) but payload has {} bytes", bytes.len() - 16),
        ));
    }
    let pixels = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((shape, pixels))
}

/// Images and annotations held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub images: Vec<Vec<f32>>,
    pub channels: usize,
    pub size: usize,
}

impl Dataset {
    /// Renders images `start .. start + n` of dataset `seed` without touching disk.
    pub fn synthesize(seed: u64, start: u64, n: usize, cfg: &SynthConfig) -> Self {
        let samples: Vec<Sample> = (0..n as u64)
            .into_par_iter()
            .map(|i| render_sample(seed, start + i, cfg))
            .collect();
        let mut records = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n);
        for (i, s) in samples.into_iter().enumerate() {
            let id = start + i as u64;
            records.push(ImageRecord {
                id,
                width: cfg.size as u32,
                height: cfg.size as u32,
                file: format!("images/{id:06}.simg"),
                objects: s.objects,
            });
            images.push(s.pixels);
        }
        Self {
            records,
            images,
            channels: cfg.channels,
            size: cfg.size,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn boxes(&self, i: usize) -> Vec<BBox> {
        self.records[i].objects.iter().map(|o| o.bbox).collect()
    }

    /// Writes `annotations.json` and one image record per image under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| SacError::io(&images_dir, e))?;
        self.records
            .par_iter()
            .zip(&self.images)
            .try_for_each(|(r, px)| write_image_record(&dir.join(&r.file), [self.channels, self.size, self.size], px))?;
        let ann = AnnotationFile {
            images: self.records.clone(),
        };
        let path = dir.join(ANNOTATIONS);
        let text = serde_json::to_string(&ann).expect("annotations serialize");
        fs::write(&path, text).map_err(|e| SacError::io(&path, e))
    }
}

/// Generates `n` images from `seed` into `dir`.
pub fn synth_generate(dir: &Path, seed: u64, n: usize, cfg: &SynthConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(SacError::Invalid("image count must be at least 1".into()));
    }
    let ds = Dataset::synthesize(seed, 0, n, cfg);
    ds.save(dir)?;
    Ok(ds)
}

/// Loads a dataset written by [`synth_generate`]; every image must be square
/// with identical shape.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path: PathBuf = dir.join(ANNOTATIONS);
    let text = fs::read_to_string(&path).map_err(|e| SacError::io(&path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| SacError::format(&path, e.to_string()))?;
    let loaded: Vec<([usize; 3], Vec<f32>)> = ann
        .images
        .par_iter()
        .map(|r| read_image_record(&dir.join(&r.file)))
        .collect::<Result<_>>()?;
    let mut shape = None;
    for (r, (s, _)) in ann.images.iter().zip(&loaded) {
        let file = dir.join(&r.file);
        if s[1] != s[2] || s[1] != r.height as usize || s[2] != r.width as usize {
            return Err(SacError::format(&file, format!("image shape {s:?} disagrees with annotation")));
        }
        if *shape.get_or_insert(*s) != *s {
            return Err(SacError::format(&file, format!("image shape {s:?} differs from {:?}", shape.unwrap())));
        }
        for o in &r.objects {
            if o.class >= CLASS_NAMES.len() {
                return Err(SacError::format(&path, format!("image {}: class {} out of range", r.id, o.class)));
            }
        }
    }
    let [channels, size, _] = shape.unwrap_or([3, 64, 64]);
    Ok(Dataset {
        records: ann.images,
        images: loaded.into_iter().map(|(_, px)| px).collect(),
        channels,
        size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objects_stay_inside() {
        let cfg = SynthConfig::default();
        for i in 0..50 {
            let s = render_sample(3, i, &cfg);
            assert!(!s.objects.is_empty());
            for o in &s.objects {
                let b = o.bbox;
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 64.0 && b.y_max <= 64.0);
            }
            for (a, o) in s.objects.iter().enumerate() {
                for p in &s.objects[a + 1..] {
                    assert!(iou(&o.bbox, &p.bbox) < cfg.max_overlap);
                }
            }
        }
    }

    #[test]
    fn rendering_is_reproducible() {
        let cfg = SynthConfig::default();
        assert_eq!(render_sample(9, 17, &cfg), render_sample(9, 17, &cfg));
        assert_ne!(render_sample(9, 17, &cfg).pixels, render_sample(9, 18, &cfg).pixels);
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.simg");
        write_image_record(&p, [1, 2, 2], &[1.0, -2.0, 0.5, 3.25]).unwrap();
        assert_eq!(read_image_record(&p).unwrap(), ([1, 2, 2], vec![1.0, -2.0, 0.5, 3.25]));
        fs::write(&p, b"SIMG").unwrap();
        assert!(read_image_record(&p).is_err());
    }
}
