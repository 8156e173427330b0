use std::sync::Arc;

use dsaf_tensor::{Tape, Tensor};
use dsafdet::assign::{assign_targets, AssignOptions, GtBox};
use dsafdet::boxes::{iou, BBox};
use dsafdet::data::synthetic::{generate, SyntheticSpec};
use dsafdet::data::{BatchLoader, Dataset, LoaderOptions};
use dsafdet::decode::decode_predictions;
use dsafdet::loss::{compute_loss, LossWeights};
use dsafdet::model::{Ablation, Detector, LevelOutput, ModelConfig, RawPrediction};
use dsafdet::params::Ctx;
use dsafdet::trainer::forward_backward;
use proptest::prelude::*;

fn tiny(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        stage_channels: vec![8, 8, 16, 16, 16],
        reg_max: 8,
        ..ModelConfig::default()
    }
    .with_ablation(ablation)
}

/// One level of raw outputs from per-cell class logits and per-cell side
/// logits, laid out as the head produces them.
fn raw_level(
    stride: usize,
    (h, w): (usize, usize),
    nc: usize,
    reg_max: usize,
    cls: impl Fn(usize, usize) -> f64,
    reg: impl Fn(usize, usize, usize) -> f64,
) -> RawPrediction<f64> {
    let tape = Tape::no_grad();
    let cells = h * w;
    let mut c = vec![0.0; nc * cells];
    let mut r = vec![0.0; 4 * reg_max * cells];
    for cell in 0..cells {
        for k in 0..nc {
            c[k * cells + cell] = cls(cell, k);
        }
        for s in 0..4 {
            for b in 0..reg_max {
                r[(s * reg_max + b) * cells + cell] = reg(cell, s, b);
            }
        }
    }
    RawPrediction {
        levels: vec![LevelOutput {
            stride,
            cls: tape.constant(Tensor::from_f64(vec![1, nc, h, w], &c).unwrap()),
            reg: tape.constant(Tensor::from_f64(vec![1, 4 * reg_max, h, w], &r).unwrap()),
        }],
        reg_max,
        num_classes: nc,
        image_size: (h * stride, w * stride),
    }
}

/// Logits whose softmax is the two-hot encoding of `d`.
fn two_hot_logit(d: f64, bin: usize) -> f64 {
    let left = d.floor() as usize;
    let p = if bin == left {
        left as f64 + 1.0 - d
    } else if bin == left + 1 {
        d - left as f64
    } else {
        0.0
    };
    if p > 0.0 {
        p.ln()
    } else {
        -80.0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_boxes_round_trip_within_one_bin(
        cell in 0usize..16,
        sides in prop::array::uniform4(0.0f64..14.9),
    ) {
        let (stride, reg_max) = (8usize, 16usize);
        let raw = raw_level(stride, (4, 4), 1, reg_max, |c, _| if c == cell { 5.0 } else { -20.0 }, |c, s, b| {
            if c == cell { two_hot_logit(sides[s], b) } else { -80.0 }
        });
        let (cx, cy) = ((cell % 4) as f64 + 0.5, (cell / 4) as f64 + 0.5);
        let sf = stride as f64;
        let want = BBox::new((cx - sides[0]) * sf, (cy - sides[1]) * sf, (cx + sides[2]) * sf, (cy + sides[3]) * sf)
            .clip(32.0, 32.0);
        let dets = decode_predictions(&raw, 0.5);
        if want.is_degenerate() {
            prop_assert!(dets[0].is_empty());
        } else {
            prop_assert_eq!(dets[0].len(), 1);
            let got = dets[0][0].bbox;
            for (a, b) in [(got.x1, want.x1), (got.y1, want.y1), (got.x2, want.x2), (got.y2, want.y2)] {
                prop_assert!((a - b).abs() <= sf, "{:?} vs {:?}", got, want);
            }
        }
    }

    /// Two boxes on a two-cell grid: with top-k at least the number of
    /// cells, the assignment must equal the best of all cell-to-box maps.
    #[test]
    fn assignment_matches_exhaustive_oracle(
        a in (0.0f64..7.0, 0.0f64..7.0, 9.0f64..16.0, 1.0f64..8.0),
        b in (0.0f64..15.0, 0.0f64..7.0, 1.0f64..16.0, 1.0f64..8.0),
        logits in prop::collection::vec(-3.0f64..3.0, 2 + 2 * 16),
    ) {
        let (nc, reg_max) = (1, 4);
        let raw = raw_level(8, (1, 2), nc, reg_max, |c, _| logits[c], |c, s, k| logits[2 + (c * 4 + s) * 2 + k % 2] + k as f64 * 0.1);
        let gta = BBox::new(a.0, a.1, a.2, a.1 + a.3);
        let gtb = BBox::new(b.0, b.1, (b.0 + b.2).min(16.0), b.1 + b.3);
        let gts = vec![GtBox { class_id: 0, bbox: gta }, GtBox { class_id: 0, bbox: gtb }];
        let got = assign_targets(&raw, std::slice::from_ref(&gts), &AssignOptions::default());

        // independent decode and alignment
        let soft_exp = |cell: usize, s: usize| {
            let z: Vec<f64> = (0..reg_max).map(|k| logits[2 + (cell * 4 + s) * 2 + k % 2] + k as f64 * 0.1).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let t: f64 = e.iter().sum();
            e.iter().enumerate().map(|(k, v)| k as f64 * v / t).sum::<f64>()
        };
        let align = |cell: usize, g: &BBox| {
            let cx = cell as f64 + 0.5;
            let pred = BBox::new((cx - soft_exp(cell, 0)) * 8.0, (0.5 - soft_exp(cell, 1)) * 8.0,
                                 (cx + soft_exp(cell, 2)) * 8.0, (0.5 + soft_exp(cell, 3)) * 8.0);
            let score = 1.0 / (1.0 + (-logits[cell]).exp());
            let o = iou(&pred, g);
            (score.powf(0.5) * o.powf(6.0), o)
        };
        let inside = |cell: usize, g: &BBox| {
            let (x, y) = (cell as f64 * 8.0 + 4.0, 4.0);
            g.x1 < x && x < g.x2 && g.y1 < y && y < g.y2
        };
        let mut best: (f64, [Option<usize>; 2]) = (-1.0, [None, None]);
        for m0 in [None, Some(0), Some(1)] {
            for m1 in [None, Some(0), Some(1)] {
                let map = [m0, m1];
                if (0..2).any(|c| map[c].is_some_and(|g| !inside(c, &gts[g].bbox))) {
                    continue;
                }
                let total: f64 = (0..2).filter_map(|c| map[c].map(|g| align(c, &gts[g].bbox).0)).sum();
                // zero-alignment cells stay candidates, so prefer more matches on ties
                let better = total > best.0 + 1e-15
                    || ((total - best.0).abs() <= 1e-15 && map.iter().flatten().count() > best.1.iter().flatten().count());
                if better {
                    best = (total, map);
                }
            }
        }
        let mine: Vec<(usize, usize)> = got.positives[0].iter().map(|p| (p.cell, p.gt)).collect();
        let want: Vec<(usize, usize)> = (0..2).filter_map(|c| best.1[c].map(|g| (c, g))).collect();
        // equal alignments may legitimately resolve to either box
        let tie = (0..2).any(|c| inside(c, &gta) && inside(c, &gtb) && align(c, &gta).0 == align(c, &gtb).0);
        if !tie {
            prop_assert_eq!(&mine, &want);
        }
        for p in &got.positives[0] {
            let (al, o) = align(p.cell, &gts[p.gt].bbox);
            prop_assert!((p.align - al).abs() <= 1e-9 * al.max(1.0), "{} vs {}", p.align, al);
            prop_assert!((p.iou - o).abs() < 1e-9);
        }
    }
}

#[test]
fn perfect_prediction_has_no_box_or_distribution_loss() {
    // box edges on half-cells give integer distances from every centre
    let (stride, reg_max) = (8usize, 16usize);
    let gt = BBox::new(0.5 * 8.0, 0.5 * 8.0, 3.5 * 8.0, 4.5 * 8.0);
    let side_bins = |cell: usize| {
        let (cx, cy) = ((cell % 6) as f64 + 0.5, (cell / 6) as f64 + 0.5);
        [cx - 0.5, cy - 0.5, 3.5 - cx, 4.5 - cy].map(|d| d.max(0.0) as usize)
    };
    let raw = raw_level(stride, (6, 6), 1, reg_max, |_, _| 8.0, |c, s, b| if side_bins(c)[s] == b { 40.0 } else { -40.0 });
    let gts = vec![vec![GtBox { class_id: 0, bbox: gt }]];
    let a = assign_targets(&raw, &gts, &AssignOptions::default());
    assert!(a.num_positives() > 0);
    let out = compute_loss(&raw, &gts, &a, &LossWeights::default()).unwrap();
    assert!(out.parts.box_iou < 1e-6, "{:?}", out.parts);
    assert!(out.parts.dfl < 1e-6, "{:?}", out.parts);
}

#[test]
fn forward_output_shapes() {
    let cfg = tiny(Ablation::Full);
    let (model, store) = Detector::new::<f64>(cfg.clone(), 0).unwrap();
    let ctx = Ctx::eval(&store);
    let x = ctx.tape().constant(Tensor::zeros(vec![2, 3, 64, 96]));
    let raw = model.forward(&ctx, &x).unwrap();
    assert_eq!(raw.image_size, (64, 96));
    for (lvl, s) in raw.levels.iter().zip([8, 16, 32]) {
        assert_eq!(lvl.stride, s);
        assert_eq!(lvl.cls.shape(), &[2, 2, 64 / s, 96 / s]);
        assert_eq!(lvl.reg.shape(), &[2, 4 * cfg.reg_max, 64 / s, 96 / s]);
    }
}

#[test]
fn every_learnable_parameter_gets_a_gradient() {
    let spec = SyntheticSpec {
        num_images: 4,
        ..SyntheticSpec::default()
    };
    let (index, images) = generate(&spec, 2);
    let ds = Arc::new(Dataset::from_memory(index, images, 64));
    let batch = BatchLoader::new(ds, LoaderOptions::eval(4)).next().unwrap().unwrap();
    for ablation in Ablation::ALL {
        let (model, store) = Detector::new::<f64>(tiny(ablation), 1).unwrap();
        let step = forward_backward(&model, &store, &batch).unwrap();
        assert!(step.parts.total.is_finite() && step.parts.num_pos > 0);
        assert_eq!(step.grads.len(), store.learnable_ids().count());
        let dead: Vec<&str> = step
            .grads
            .iter()
            .filter(|(_, g)| g.max_abs() == 0.0)
            .map(|(id, _)| store.entry(*id).name.as_str())
            .collect();
        assert!(dead.is_empty(), "{ablation}: zero gradient for {dead:?}");
    }
}

#[test]
fn ablation_variants_differ_in_size() {
    let counts: Vec<usize> = Ablation::ALL
        .iter()
        .map(|&a| Detector::new::<f32>(tiny(a), 0).unwrap().1.learnable_count())
        .collect();
    for i in 0..counts.len() {
        for j in i + 1..counts.len() {
            assert_ne!(counts[i], counts[j], "{:?}", Ablation::ALL);
        }
    }
}
