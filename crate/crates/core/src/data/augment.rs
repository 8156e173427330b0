//! Horizontal flip and HSV jitter, deterministic per sample seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::GtBox;
use crate::boxes::BBox;

use super::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Maximum relative gains for hue, saturation and value.
    pub hsv_h: f64,
    pub hsv_s: f64,
    pub hsv_v: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            hsv_h: 0.015,
            hsv_s: 0.7,
            hsv_v: 0.4,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

pub fn flip_box(b: &BBox, width: f64) -> BBox {
    BBox::new(width - b.x2, b.y1, width - b.x1, b.y2)
}

pub fn flip_boxes(gts: &[GtBox], width: f64) -> Vec<GtBox> {
    gts.iter()
        .map(|g| GtBox {
            class_id: g.class_id,
            bbox: flip_box(&g.bbox, width),
        })
        .collect()
}

/// Mirrors a `[3, h, w]` image left to right in place.
pub fn flip_image(data: &mut [f32], h: usize, w: usize) {
    for row in data.chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Multiplies hue, saturation and value by the given gains; hue wraps,
/// saturation and value saturate at 1.
pub fn hsv_gain(data: &mut [f32], gains: [f32; 3]) {
    let plane = data.len() / 3;
    let (r, rest) = data.split_at_mut(plane);
    let (g, b) = rest.split_at_mut(plane);
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(r[i], g[i], b[i]);
        let (nr, ng, nb) = hsv_to_rgb(h * gains[0], (s * gains[1]).min(1.0), (v * gains[2]).min(1.0));
        r[i] = nr;
        g[i] = ng;
        b[i] = nb;
    }
}

pub fn augment(mut sample: Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    if !cfg.enabled {
        return sample;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    if rng.gen::<f64>() < cfg.flip_prob {
        flip_image(sample.image.data_mut(), h, w);
        sample.boxes = flip_boxes(&sample.boxes, w as f64);
        sample.flipped = !sample.flipped;
    }
    let mut gain = |g: f64| (1.0 + g * rng.gen_range(-1.0..=1.0)) as f32;
    let gains = [gain(cfg.hsv_h), gain(cfg.hsv_s), gain(cfg.hsv_v)];
    hsv_gain(sample.image.data_mut(), gains);
    sample
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_fixture() {
        assert_eq!(
            flip_box(&BBox::new(10.0, 20.0, 30.0, 40.0), 640.0),
            BBox::new(610.0, 20.0, 630.0, 40.0)
        );
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_gains_preserve_pixels() {
        let mut d = vec![0.1, 0.7, 0.2, 0.4, 0.9, 0.0];
        let orig = d.clone();
        hsv_gain(&mut d, [1.0, 1.0, 1.0]);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn image_flip_mirrors_rows() {
        let mut d: Vec<f32> = (0..12).map(|v| v as f32).collect();
        flip_image(&mut d, 2, 2);
        assert_eq!(d, vec![1.0, 0.0, 3.0, 2.0, 5.0, 4.0, 7.0, 6.0, 9.0, 8.0, 11.0, 10.0]);
    }
}
