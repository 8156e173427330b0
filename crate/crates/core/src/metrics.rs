//! Precision, recall and COCO-style mean average precision.

use serde::{Deserialize, Serialize};

use crate::assign::GtBox;
use crate::boxes::{iou, Detection};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Operating point for the reported precision and recall.
pub const PR_CONF: f64 = 0.25;
pub const PR_IOU: f64 = 0.5;

/// Greedy one-to-one matching within each class. `dets` must be sorted by
/// descending score. Returns, per detection, the index of the matched box.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let (j, _) = best?;
            taken[j] = true;
            Some(j)
        })
        .collect()
}

/// 101-point interpolated AP of detections given as `(score, is_tp)` against
/// `num_gt` boxes. Order among equal scores is kept.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for i in order {
        if scored[i].1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / num_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    sum / 101.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub ap50: f64,
    pub ap50_95: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_images: usize,
    /// Classes with at least one ground-truth box; the means run over these.
    pub classes: Vec<ClassReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub param_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flops: Option<u64>,
}

/// One image: its detections (any order) and ground truth.
pub struct ImageResult<'a> {
    pub dets: &'a [Detection],
    pub gts: &'a [GtBox],
}

pub fn evaluate_detections(images: &[ImageResult<'_>], class_names: &[String]) -> EvalReport {
    let nc = class_names.len();
    let sorted: Vec<Vec<Detection>> = images
        .iter()
        .map(|im| {
            let mut d = im.dets.to_vec();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d
        })
        .collect();
    let mut num_gt = vec![0usize; nc];
    for im in images {
        for g in im.gts {
            if g.class_id < nc {
                num_gt[g.class_id] += 1;
            }
        }
    }

    let thresholds = iou_thresholds();
    // scored[t][c]: (score, tp) of every detection of class c at threshold t
    let mut scored = vec![vec![Vec::new(); nc]; thresholds.len()];
    for (t, &thr) in thresholds.iter().enumerate() {
        for (im, dets) in images.iter().zip(&sorted) {
            for (d, m) in dets.iter().zip(match_detections(dets, im.gts, thr)) {
                if d.class_id < nc {
                    scored[t][d.class_id].push((d.score, m.is_some()));
                }
            }
        }
    }

    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut class_tp = vec![0usize; nc];
    let mut class_det = vec![0usize; nc];
    for (im, dets) in images.iter().zip(&sorted) {
        let confident: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= PR_CONF).collect();
        let m = match_detections(&confident, im.gts, PR_IOU);
        for (d, m) in confident.iter().zip(&m) {
            if d.class_id < nc {
                class_det[d.class_id] += 1;
                class_tp[d.class_id] += usize::from(m.is_some());
            }
        }
        let hits = m.iter().filter(|m| m.is_some()).count();
        tp += hits;
        fp += confident.len() - hits;
        fn_ += im.gts.len() - hits;
    }

    let classes: Vec<ClassReport> = (0..nc)
        .filter(|&c| num_gt[c] > 0)
        .map(|c| {
            let aps: Vec<f64> = (0..thresholds.len())
                .map(|t| average_precision(&scored[t][c], num_gt[c]))
                .collect();
            ClassReport {
                class_id: c,
                name: class_names[c].clone(),
                num_gt: num_gt[c],
                ap50: aps[0],
                ap50_95: aps.iter().sum::<f64>() / aps.len() as f64,
                precision: if class_det[c] == 0 {
                    0.0
                } else {
                    class_tp[c] as f64 / class_det[c] as f64
                },
                recall: class_tp[c] as f64 / num_gt[c] as f64,
            }
        })
        .collect();
    let mean = |f: fn(&ClassReport) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    EvalReport {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        map50: mean(|c| c.ap50),
        map50_95: mean(|c| c.ap50_95),
        tp,
        fp,
        fn_,
        num_images: images.len(),
        classes,
        param_count: None,
        flops: None,
    }
}

pub const CSV_HEADER: &str = "model,P,R,mAP50,mAP50-95,Params(M),FLOPs(G),Size(MB)";
pub const ABLATION_CSV_HEADER: &str = "DSAF,SD,P,R,mAP50,mAP50-95,Params(M),FLOPs(G)";

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

/// Summary row with percentages, parameter millions, GFLOPs and megabytes.
pub fn csv_row(model: &str, r: &EvalReport, size_bytes: Option<usize>) -> String {
    format!(
        "{model},{:.1},{:.1},{:.1},{:.1},{},{},{}",
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.map50,
        100.0 * r.map50_95,
        opt(r.param_count.map(|p| p as f64 / 1e6), 2),
        opt(r.flops.map(|f| f as f64 / 1e9), 1),
        opt(size_bytes.map(|s| s as f64 / 1e6), 1),
    )
}

pub fn ablation_csv_row(use_dsaf: bool, use_sd: bool, r: &EvalReport) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    format!(
        "{},{},{:.1},{:.1},{:.1},{:.1},{},{}",
        mark(use_dsaf),
        mark(use_sd),
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.map50,
        100.0 * r.map50_95,
        opt(r.param_count.map(|p| p as f64 / 1e6), 2),
        opt(r.flops.map(|f| f as f64 / 1e9), 1),
    )
}
