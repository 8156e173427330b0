//! Aspect-preserving resize onto a square, gray-padded canvas.

use dsaf_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::assign::GtBox;
use crate::boxes::BBox;

pub const PAD_VALUE: f32 = 114.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxMeta {
    pub scale: f64,
    pub pad_x: u32,
    pub pad_y: u32,
    pub orig_width: u32,
    pub orig_height: u32,
    pub target: u32,
}

impl LetterboxMeta {
    pub fn new(width: u32, height: u32, target: u32) -> Self {
        assert!(width > 0 && height > 0, "image must have positive dimensions");
        let scale = (target as f64 / width as f64).min(target as f64 / height as f64);
        let (rw, rh) = Self::resized(width, height, scale, target);
        Self {
            scale,
            pad_x: (target - rw) / 2,
            pad_y: (target - rh) / 2,
            orig_width: width,
            orig_height: height,
            target,
        }
    }

    fn resized(width: u32, height: u32, scale: f64, target: u32) -> (u32, u32) {
        let r = |v: u32| ((v as f64 * scale).round() as u32).clamp(1, target);
        (r(width), r(height))
    }

    /// Size of the image content inside the canvas.
    pub fn content_size(&self) -> (u32, u32) {
        Self::resized(self.orig_width, self.orig_height, self.scale, self.target)
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.pad_x == 0 && self.pad_y == 0
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            b.x1 * self.scale + px,
            b.y1 * self.scale + py,
            b.x2 * self.scale + px,
            b.y2 * self.scale + py,
        )
    }

    /// Maps a canvas box back to original-image pixels, clipped to the image.
    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            (b.x1 - px) / self.scale,
            (b.y1 - py) / self.scale,
            (b.x2 - px) / self.scale,
            (b.y2 - py) / self.scale,
        )
        .clip(self.orig_width as f64, self.orig_height as f64)
    }

    /// Transforms ground truth onto the canvas, dropping boxes that clip to
    /// nothing.
    pub fn forward_boxes(&self, gts: &[GtBox]) -> Vec<GtBox> {
        let t = self.target as f64;
        gts.iter()
            .map(|g| GtBox {
                class_id: g.class_id,
                bbox: self.forward_box(&g.bbox).clip(t, t),
            })
            .filter(|g| !g.bbox.is_degenerate())
            .collect()
    }
}

/// Returns the `[3, target, target]` canvas with values in `[0, 1]`.
pub fn letterbox(img: &RgbImage, target: u32) -> (Tensor<f32>, LetterboxMeta) {
    let meta = LetterboxMeta::new(img.width(), img.height(), target);
    let (rw, rh) = meta.content_size();
    let resized;
    let content = if (rw, rh) == img.dimensions() {
        img
    } else {
        resized = imageops::resize(img, rw, rh, FilterType::Triangle);
        &resized
    };
    let t = target as usize;
    let mut data = vec![PAD_VALUE; 3 * t * t];
    for (x, y, px) in content.enumerate_pixels() {
        let (cx, cy) = ((x + meta.pad_x) as usize, (y + meta.pad_y) as usize);
        for c in 0..3 {
            data[(c * t + cy) * t + cx] = px.0[c] as f32 / 255.0;
        }
    }
    let tensor = Tensor::new(vec![3, t, t], data).expect("canvas length matches shape");
    (tensor, meta)
}
