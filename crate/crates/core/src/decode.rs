//! Anchor-free decoding of head outputs and non-maximum suppression.

use dsaf_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, Detection};
use crate::model::RawPrediction;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub max_det: usize,
    /// Highest-scoring candidates kept per image before suppression.
    pub max_candidates: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            iou_thresh: 0.7,
            max_det: 300,
            max_candidates: 30_000,
        }
    }
}

impl DecodeOptions {
    /// Low threshold and tighter suppression used when scoring mAP.
    pub fn eval() -> Self {
        Self {
            conf_thresh: 0.001,
            iou_thresh: 0.65,
            ..Self::default()
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Expected bin index `Σ softmax(z)_i · i`.
pub fn expectation(logits: &[f64]) -> f64 {
    softmax(logits).iter().enumerate().map(|(i, p)| i as f64 * p).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-cell view of one image's head outputs in `f64`.
pub struct CellGrid<'a, T> {
    pub cls: &'a [T],
    pub reg: &'a [T],
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub reg_max: usize,
}

impl<T: Real> CellGrid<'_, T> {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Cell centre in grid units.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        ((cell % self.w) as f64 + 0.5, (cell / self.w) as f64 + 0.5)
    }

    pub fn logit(&self, cell: usize, class: usize) -> f64 {
        self.cls[class * self.cells() + cell].as_f64()
    }

    /// Bin logits of one side (0 left, 1 top, 2 right, 3 bottom).
    pub fn side_logits(&self, cell: usize, side: usize) -> Vec<f64> {
        (0..self.reg_max)
            .map(|k| self.reg[(side * self.reg_max + k) * self.cells() + cell].as_f64())
            .collect()
    }

    /// Expected side distances in grid units.
    pub fn sides(&self, cell: usize) -> [f64; 4] {
        std::array::from_fn(|s| expectation(&self.side_logits(cell, s)))
    }

    /// Decoded box in pixels, not clipped.
    pub fn bbox(&self, cell: usize) -> BBox {
        let (cx, cy) = self.center(cell);
        let [l, t, r, b] = self.sides(cell);
        BBox::new(cx - l, cy - t, cx + r, cy + b).scale(self.stride as f64)
    }
}

/// Grids of image `n`, one per level.
pub fn grids<T: Real>(raw: &RawPrediction<T>, n: usize) -> Vec<CellGrid<'_, T>> {
    raw.levels
        .iter()
        .map(|lvl| {
            let (h, w) = (lvl.cls.shape()[2], lvl.cls.shape()[3]);
            let cls_len = raw.num_classes * h * w;
            let reg_len = 4 * raw.reg_max * h * w;
            CellGrid {
                cls: &lvl.cls.value().data()[n * cls_len..(n + 1) * cls_len],
                reg: &lvl.reg.value().data()[n * reg_len..(n + 1) * reg_len],
                stride: lvl.stride,
                h,
                w,
                num_classes: raw.num_classes,
                reg_max: raw.reg_max,
            }
        })
        .collect()
}

/// Every (cell, class) pair scoring above `conf_thresh`, per image, with
/// boxes clipped to the input. Boxes that clip to zero area are dropped.
pub fn decode_predictions<T: Real>(raw: &RawPrediction<T>, conf_thresh: f64) -> Vec<Vec<Detection>> {
    let (ih, iw) = (raw.image_size.0 as f64, raw.image_size.1 as f64);
    (0..raw.batch())
        .map(|n| {
            let mut dets = Vec::new();
            for g in grids(raw, n) {
                for cell in 0..g.cells() {
                    let mut bbox = None;
                    for class_id in 0..g.num_classes {
                        let score = sigmoid(g.logit(cell, class_id));
                        if score <= conf_thresh {
                            continue;
                        }
                        let b = *bbox.get_or_insert_with(|| g.bbox(cell).clip(iw, ih));
                        if !b.is_degenerate() {
                            dets.push(Detection { class_id, score, bbox: b });
                        }
                    }
                }
            }
            dets
        })
        .collect()
}

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy per-class suppression. The result is sorted by descending score;
/// ties keep their input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(by_score_desc);
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Decode, keep the top candidates, suppress and truncate, per image.
pub fn postprocess<T: Real>(raw: &RawPrediction<T>, opts: &DecodeOptions) -> Vec<Vec<Detection>> {
    decode_predictions(raw, opts.conf_thresh)
        .into_iter()
        .map(|mut dets| {
            dets.sort_by(by_score_desc);
            dets.truncate(opts.max_candidates);
            let mut kept = nms(&dets, opts.iou_thresh);
            kept.truncate(opts.max_det);
            kept
        })
        .collect()
}
