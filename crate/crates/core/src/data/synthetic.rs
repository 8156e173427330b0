//! Colored rectangles on a noisy background, for smoke runs and tests.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::GtBox;
use crate::boxes::BBox;
use crate::error::{io_err, DetError, Result};

use super::annotations::{to_yolo_labels, DatasetIndex, ImageRecord};

const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [240, 220, 40],
    [200, 50, 220],
    [40, 220, 220],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub size: u32,
    pub num_classes: usize,
    pub max_boxes: usize,
    /// Side lengths as fractions of the image size.
    pub min_side: f64,
    pub max_side: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_images > 0
            && self.size >= 8
            && (1..=PALETTE.len()).contains(&self.num_classes)
            && self.max_boxes > 0
            && 0.0 < self.min_side
            && self.min_side <= self.max_side
            && self.max_side <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(DetError::Config(format!(
                "synthetic data needs images > 0, size ≥ 8, 1..={} classes, boxes > 0 and 0 < min_side ≤ max_side ≤ 1; got {self:?}",
                PALETTE.len()
            )))
        }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 8,
            size: 64,
            num_classes: 2,
            max_boxes: 2,
            min_side: 0.25,
            max_side: 0.5,
        }
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

/// Draws the dataset in memory. Image paths are `synthetic/<i>.png`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> (DatasetIndex, Vec<RgbImage>) {
    assert!(spec.num_classes <= PALETTE.len(), "at most {} synthetic classes", PALETTE.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size;
    let mut records = Vec::with_capacity(spec.num_images);
    let mut images = Vec::with_capacity(spec.num_images);
    for id in 0..spec.num_images {
        let mut img = RgbImage::from_fn(s, s, |_, _| {
            let v = rng.gen_range(90..130u8);
            Rgb([v, v, v])
        });
        let count = rng.gen_range(1..=spec.max_boxes);
        let mut boxes: Vec<GtBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let side = |rng: &mut ChaCha8Rng| {
                (rng.gen_range(spec.min_side..=spec.max_side) * s as f64).round().max(2.0) as u32
            };
            let (w, h) = (side(&mut rng), side(&mut rng));
            let x = rng.gen_range(0..=s - w);
            let y = rng.gen_range(0..=s - h);
            let class_id = rng.gen_range(0..spec.num_classes);
            for yy in y..y + h {
                for xx in x..x + w {
                    img.put_pixel(xx, yy, Rgb(PALETTE[class_id]));
                }
            }
            let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            // later rectangles paint over earlier ones; keep only visible boxes
            boxes.retain(|b| crate::boxes::iou(&b.bbox, &bbox) < 0.3 && !covers(&bbox, &b.bbox));
            boxes.push(GtBox { class_id, bbox });
        }
        records.push(ImageRecord {
            id,
            path: PathBuf::from(format!("synthetic/{id}.png")),
            width: s,
            height: s,
            boxes,
        });
        images.push(img);
    }
    let index = DatasetIndex {
        images: records,
        class_names: class_names(spec.num_classes),
    };
    (index, images)
}

fn covers(outer: &BBox, inner: &BBox) -> bool {
    outer.x1 <= inner.x1 && outer.y1 <= inner.y1 && outer.x2 >= inner.x2 && outer.y2 >= inner.y2
}

/// Writes a generated split in YOLO layout under `root`.
pub fn write_yolo_split(root: &Path, split: &str, spec: &SyntheticSpec, seed: u64) -> Result<DatasetIndex> {
    let (mut index, images) = generate(spec, seed);
    let image_dir = root.join(split).join("images");
    let label_dir = root.join(split).join("labels");
    for dir in [&image_dir, &label_dir] {
        std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    let classes = index.class_names.join("\n") + "\n";
    let classes_path = root.join("classes.txt");
    std::fs::write(&classes_path, classes).map_err(io_err(format!("writing {}", classes_path.display())))?;
    for (rec, img) in index.images.iter_mut().zip(&images) {
        let name = format!("{:05}", rec.id);
        let path = image_dir.join(format!("{name}.png"));
        img.save(&path).map_err(|e| DetError::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let label = label_dir.join(format!("{name}.txt"));
        std::fs::write(&label, to_yolo_labels(&rec.boxes, rec.width, rec.height))
            .map_err(io_err(format!("writing {}", label.display())))?;
        rec.path = path;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::default();
        let (a, ia) = generate(&spec, 3);
        let (b, ib) = generate(&spec, 3);
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        assert_ne!(generate(&spec, 4).0, a);
    }

    #[test]
    fn boxes_lie_inside_images() {
        let (idx, _) = generate(&SyntheticSpec::default(), 0);
        for im in &idx.images {
            assert!(!im.boxes.is_empty());
            for b in &im.boxes {
                assert!(b.bbox.x1 >= 0.0 && b.bbox.x2 <= 64.0 && !b.bbox.is_degenerate());
            }
        }
    }
}
