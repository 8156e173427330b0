//! Task-aligned target assignment.
//!
//! For each ground-truth box and each level, the cells whose pixel centres lie
//! strictly inside the box are candidates. Each candidate is scored by
//! `score^α · IoU^β`, where `score` is the predicted probability of the box's
//! class and `IoU` compares the decoded prediction with the box. The `top_k`
//! best candidates per level become positives; a cell claimed by several boxes
//! keeps the one with the highest alignment.

use dsaf_tensor::Real;

use crate::boxes::{iou, BBox};
use crate::decode::{grids, sigmoid};
use crate::model::RawPrediction;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug)]
pub struct AssignOptions {
    pub top_k: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AssignOptions {
    fn default() -> Self {
        Self {
            top_k: 10,
            alpha: 0.5,
            beta: 6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub level: usize,
    pub cell: usize,
    pub gt: usize,
    pub align: f64,
    pub iou: f64,
    /// Classification target: alignment rescaled so the best-aligned cell of
    /// each box gets that box's best IoU.
    pub target: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Assignment {
    /// Positives per image, ordered by (level, cell).
    pub positives: Vec<Vec<Positive>>,
    pub skipped_degenerate: usize,
}

impl Assignment {
    pub fn num_positives(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

/// One candidate cell scored against one box.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub level: usize,
    pub cell: usize,
    pub align: f64,
    pub iou: f64,
}

/// Keeps the `k` best candidates; equal alignments keep the earlier one.
pub fn top_k(mut cands: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.align.total_cmp(&a.align));
    cands.truncate(k);
    cands
}

/// Resolves cells claimed by several boxes and computes the classification
/// targets. `per_gt[g]` lists the selected candidates of box `g`.
pub fn resolve(per_gt: &[Vec<Candidate>]) -> Vec<Positive> {
    let mut best: std::collections::BTreeMap<(usize, usize), Positive> = Default::default();
    for (gt, cands) in per_gt.iter().enumerate() {
        for c in cands {
            let p = Positive {
                level: c.level,
                cell: c.cell,
                gt,
                align: c.align,
                iou: c.iou,
                target: 0.0,
            };
            best.entry((c.level, c.cell))
                .and_modify(|cur| {
                    if p.align > cur.align {
                        *cur = p;
                    }
                })
                .or_insert(p);
        }
    }
    let mut positives: Vec<Positive> = best.into_values().collect();
    let mut max_align = vec![0.0f64; per_gt.len()];
    let mut max_iou = vec![0.0f64; per_gt.len()];
    for p in &positives {
        max_align[p.gt] = max_align[p.gt].max(p.align);
        max_iou[p.gt] = max_iou[p.gt].max(p.iou);
    }
    for p in &mut positives {
        p.target = p.align * max_iou[p.gt] / (max_align[p.gt] + 1e-9);
    }
    positives
}

pub fn assign_targets<T: Real>(raw: &RawPrediction<T>, gts: &[Vec<GtBox>], opts: &AssignOptions) -> Assignment {
    let mut out = Assignment::default();
    for (n, image_gts) in gts.iter().enumerate().take(raw.batch()) {
        let levels = grids(raw, n);
        let mut per_gt = Vec::with_capacity(image_gts.len());
        for gt in image_gts {
            if gt.bbox.is_degenerate() || gt.class_id >= raw.num_classes {
                out.skipped_degenerate += 1;
                per_gt.push(Vec::new());
                continue;
            }
            let mut selected = Vec::new();
            for (level, g) in levels.iter().enumerate() {
                let s = g.stride as f64;
                let mut cands = Vec::new();
                for cell in 0..g.cells() {
                    let (cx, cy) = g.center(cell);
                    if !gt.bbox.contains(cx * s, cy * s) {
                        continue;
                    }
                    let score = sigmoid(g.logit(cell, gt.class_id));
                    let overlap = iou(&g.bbox(cell), &gt.bbox);
                    cands.push(Candidate {
                        level,
                        cell,
                        align: score.powf(opts.alpha) * overlap.powf(opts.beta),
                        iou: overlap,
                    });
                }
                selected.extend(top_k(cands, opts.top_k));
            }
            per_gt.push(selected);
        }
        out.positives.push(resolve(&per_gt));
    }
    if out.skipped_degenerate > 0 {
        log::warn!("skipped {} degenerate ground-truth boxes", out.skipped_degenerate);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LevelOutput;
    use dsaf_tensor::{Tape, Tensor};

    /// One class, reg_max 4, three levels on a 64×64 input, uniform logits.
    fn uniform(batch: usize) -> RawPrediction<f64> {
        let tape = Tape::no_grad();
        let levels = [8usize, 16, 32]
            .iter()
            .map(|&s| {
                let g = 64 / s;
                LevelOutput {
                    stride: s,
                    cls: tape.constant(Tensor::zeros(vec![batch, 1, g, g])),
                    reg: tape.constant(Tensor::zeros(vec![batch, 16, g, g])),
                }
            })
            .collect();
        RawPrediction {
            levels,
            reg_max: 4,
            num_classes: 1,
            image_size: (64, 64),
        }
    }

    #[test]
    fn whole_image_box_takes_top_k_per_level() {
        let raw = uniform(1);
        let gt = GtBox {
            class_id: 0,
            bbox: BBox::new(0.0, 0.0, 64.0, 64.0),
        };
        let a = assign_targets(&raw, &[vec![gt]], &AssignOptions::default());
        let per_level: Vec<usize> = (0..3)
            .map(|l| a.positives[0].iter().filter(|p| p.level == l).count())
            .collect();
        // 64, 16 and 4 candidate cells
        assert_eq!(per_level, vec![10, 10, 4]);
    }

    #[test]
    fn no_boxes_no_positives() {
        let a = assign_targets(&uniform(2), &[vec![], vec![]], &AssignOptions::default());
        assert_eq!(a.num_positives(), 0);
        assert_eq!(a.positives.len(), 2);
    }

    #[test]
    fn degenerate_boxes_are_counted() {
        let gt = GtBox {
            class_id: 0,
            bbox: BBox::new(5.0, 5.0, 5.0, 20.0),
        };
        let a = assign_targets(&uniform(1), &[vec![gt]], &AssignOptions::default());
        assert_eq!(a.skipped_degenerate, 1);
        assert_eq!(a.num_positives(), 0);
    }

    #[test]
    fn shared_cell_goes_to_best_alignment() {
        let c = |cell, align| Candidate {
            level: 0,
            cell,
            align,
            iou: align,
        };
        let p = resolve(&[vec![c(0, 0.2), c(1, 0.5)], vec![c(1, 0.7)]]);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].cell, p[0].gt), (0, 0));
        assert_eq!((p[1].cell, p[1].gt), (1, 1));
        // best-aligned cell of each box gets that box's best IoU
        assert!((p[0].target - 0.2).abs() < 1e-6);
        assert!((p[1].target - 0.7).abs() < 1e-6);
    }
}
