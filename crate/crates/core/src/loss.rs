//! Detection loss: binary cross-entropy on every class logit, `1 − CIoU` and
//! distribution focal loss on positive cells.
//!
//! The loss is recorded as one fused tape op over the head outputs. Its
//! gradient is computed analytically in `f64` during the forward pass; the
//! CIoU term is differentiated in forward mode through [`Dual4`], carrying
//! derivatives with respect to the four predicted side distances.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use dsaf_tensor::{OpKind, Real, Tensor, Var};

use crate::assign::{Assignment, GtBox};
use crate::boxes::BBox;
use crate::decode::{grids, sigmoid, softmax};
use crate::error::{DetError, Result};
use crate::model::RawPrediction;

/// A value with its gradient with respect to four inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    pub fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn max(self, o: Self) -> Self {
        if o.v > self.v {
            o
        } else {
            self
        }
    }

    pub fn min(self, o: Self) -> Self {
        if o.v < self.v {
            o
        } else {
            self
        }
    }

    pub fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Self::constant(0.0)
        }
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual4 {
    type Output = Self;
    // product rule
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual4 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

impl Neg for Dual4 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Add<f64> for Dual4 {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        self + Self::constant(o)
    }
}

impl Mul<f64> for Dual4 {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        self.map(self.v * o, o)
    }
}

const CIOU_EPS: f64 = 1e-7;

/// Complete IoU of a box given as duals against a constant box.
pub fn ciou_dual(p: [Dual4; 4], g: &BBox) -> Dual4 {
    let c = Dual4::constant;
    let [x1, y1, x2, y2] = p;
    let (gx1, gy1, gx2, gy2) = (c(g.x1), c(g.y1), c(g.x2), c(g.y2));
    let w1 = x2 - x1;
    let h1 = y2 - y1 + CIOU_EPS;
    let w2 = gx2 - gx1;
    let h2 = gy2 - gy1 + CIOU_EPS;
    let inter = (x2.min(gx2) - x1.max(gx1)).relu() * (y2.min(gy2) - y1.max(gy1)).relu();
    let union = w1 * h1 + w2 * h2 - inter + CIOU_EPS;
    let iou = inter / union;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let diag = cw.square() + ch.square() + CIOU_EPS;
    let rho2 = ((gx1 + gx2 - x1 - x2).square() + (gy1 + gy2 - y1 - y2).square()) * 0.25;
    let v = ((w2 / h2).atan() - (w1 / h1).atan()).square() * (4.0 / (PI * PI));
    let alpha = v / (v - iou + (1.0 + CIOU_EPS));
    iou - (rho2 / diag + v * alpha)
}

pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    let c = Dual4::constant;
    ciou_dual([c(a.x1), c(a.y1), c(a.x2), c(a.y2)], b).v
}

/// CIoU of the box `(cx − l, cy − t, cx + r, cy + b)` against `gt`, and its
/// gradient with respect to `(l, t, r, b)`.
pub fn ciou_from_sides(center: (f64, f64), sides: [f64; 4], gt: &BBox) -> (f64, [f64; 4]) {
    let (cx, cy) = center;
    let s: [Dual4; 4] = std::array::from_fn(|i| Dual4::var(sides[i], i));
    let cxd = Dual4::constant(cx);
    let cyd = Dual4::constant(cy);
    let r = ciou_dual([cxd - s[0], cyd - s[1], cxd + s[2], cyd + s[3]], gt);
    (r.v, r.d)
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub cls: f64,
    pub box_iou: f64,
    pub dfl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 0.5,
            box_iou: 7.5,
            dfl: 1.5,
        }
    }
}

/// Loss terms, each already divided by the number of positives (at least 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub box_iou: f64,
    pub dfl: f64,
    pub num_pos: usize,
}

pub struct LossOutput<T> {
    pub total: Var<T>,
    pub parts: LossParts,
}

/// Binary cross-entropy with logits and its derivative.
pub fn bce_with_logits(x: f64, t: f64) -> (f64, f64) {
    (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p(), sigmoid(x) - t)
}

/// Cross-entropy of bin logits against the two-hot encoding of a continuous
/// target in `[0, n − 1)`, with its gradient.
pub fn dfl_side(logits: &[f64], target: f64) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let left = (target.floor() as usize).min(logits.len() - 2);
    let wl = left as f64 + 1.0 - target;
    let wr = target - left as f64;
    let loss = -(wl * p[left].max(f64::MIN_POSITIVE).ln() + wr * p[left + 1].max(f64::MIN_POSITIVE).ln());
    let mut g = p;
    g[left] -= wl;
    g[left + 1] -= wr;
    (loss, g)
}

/// Grid-unit distances from a cell centre to the sides of `gt`, clamped to
/// the representable range.
pub fn side_targets(center: (f64, f64), gt: &BBox, reg_max: usize) -> [f64; 4] {
    let hi = reg_max as f64 - 1.0 - 0.01;
    let (cx, cy) = center;
    [cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy].map(|d| d.clamp(0.0, hi))
}

pub fn compute_loss<T: Real>(
    raw: &RawPrediction<T>,
    gts: &[Vec<GtBox>],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<LossOutput<T>> {
    let batch = raw.batch();
    if assignment.positives.len() != batch || gts.len() != batch {
        return Err(DetError::Shape(format!(
            "loss over {batch} images got {} assignments and {} target lists",
            assignment.positives.len(),
            gts.len()
        )));
    }
    let reg_max = raw.reg_max;
    let nc = raw.num_classes;
    let mut cls_grads: Vec<Vec<f64>> = raw.levels.iter().map(|l| vec![0.0; l.cls.value().numel()]).collect();
    let mut reg_grads: Vec<Vec<f64>> = raw.levels.iter().map(|l| vec![0.0; l.reg.value().numel()]).collect();
    let (mut cls_sum, mut box_sum, mut dfl_sum) = (0.0, 0.0, 0.0);
    let num_pos = assignment.num_positives();
    let norm = 1.0 / num_pos.max(1) as f64;

    #[allow(clippy::needless_range_loop)]
    for n in 0..batch {
        let levels = grids(raw, n);
        let mut targets: Vec<Vec<f64>> = levels.iter().map(|g| vec![0.0; nc * g.cells()]).collect();
        for p in &assignment.positives[n] {
            let Some(g) = levels.get(p.level) else {
                return Err(DetError::Shape(format!("positive on missing level {}", p.level)));
            };
            let Some(gt) = gts[n].get(p.gt) else {
                return Err(DetError::Shape(format!("positive refers to missing box {}", p.gt)));
            };
            if p.cell >= g.cells() || gt.class_id >= nc {
                return Err(DetError::Shape(format!("positive {p:?} outside the level grid or class range")));
            }
            targets[p.level][gt.class_id * g.cells() + p.cell] = p.target;

            let center = g.center(p.cell);
            let gt_grid = gt.bbox.scale(1.0 / g.stride as f64);
            let probs: Vec<Vec<f64>> = (0..4).map(|s| softmax(&g.side_logits(p.cell, s))).collect();
            let sides: [f64; 4] =
                std::array::from_fn(|s| probs[s].iter().enumerate().map(|(i, q)| i as f64 * q).sum());
            let (c, dc) = ciou_from_sides(center, sides, &gt_grid);
            box_sum += 1.0 - c;
            let dist = side_targets(center, &gt_grid, reg_max);
            let base = n * 4 * reg_max * g.cells();
            for s in 0..4 {
                let (l, dl) = dfl_side(&g.side_logits(p.cell, s), dist[s]);
                dfl_sum += l / 4.0;
                for k in 0..reg_max {
                    // d(1 − CIoU)/dz_k = −∂CIoU/∂side · p_k (k − E)
                    let d_box = -dc[s] * probs[s][k] * (k as f64 - sides[s]);
                    let idx = base + (s * reg_max + k) * g.cells() + p.cell;
                    reg_grads[p.level][idx] += norm * (weights.box_iou * d_box + weights.dfl * dl[k] / 4.0);
                }
            }
        }
        for (lvl, g) in levels.iter().enumerate() {
            let base = n * nc * g.cells();
            for (i, &t) in targets[lvl].iter().enumerate() {
                let (l, d) = bce_with_logits(g.cls[i].as_f64(), t);
                cls_sum += l;
                cls_grads[lvl][base + i] = norm * weights.cls * d;
            }
        }
    }

    let parts = LossParts {
        cls: cls_sum * norm,
        box_iou: box_sum * norm,
        dfl: dfl_sum * norm,
        total: norm * (weights.cls * cls_sum + weights.box_iou * box_sum + weights.dfl * dfl_sum),
        num_pos,
    };

    let mut inputs = Vec::with_capacity(2 * raw.levels.len());
    let mut grads = Vec::with_capacity(2 * raw.levels.len());
    for (lvl, (cg, rg)) in raw.levels.iter().zip(cls_grads.into_iter().zip(reg_grads)) {
        inputs.push(&lvl.cls);
        grads.push(Tensor::<T>::from_f64(lvl.cls.shape().to_vec(), &cg)?);
        inputs.push(&lvl.reg);
        grads.push(Tensor::<T>::from_f64(lvl.reg.shape().to_vec(), &rg)?);
    }
    let tape = raw.levels[0].cls.tape();
    let value = Tensor::scalar(T::from_f64(parts.total));
    let total = tape.record(OpKind::Custom("detection_loss".into()), &inputs, value, move |g| {
        let s = g.item();
        grads.into_iter().map(|t| Some(t.map(|v| v * s))).collect()
    });
    Ok(LossOutput { total, parts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ciou_overlapping_squares() {
        // IoU 1/7, centre distance² 2, enclosing diagonal² 18, equal aspect
        let c = ciou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
        assert!((c - (1.0 / 7.0 - 2.0 / 18.0)).abs() < 1e-6, "{c}");
    }

    #[test]
    fn ciou_identical_is_one() {
        let b = BBox::new(1.0, 2.0, 4.0, 7.0);
        assert!((1.0 - ciou(&b, &b)).abs() < 1e-6);
    }

    #[test]
    fn ciou_gradient_matches_differences() {
        let gt = BBox::new(0.3, 0.1, 4.2, 2.9);
        let center = (2.5, 1.5);
        let sides = [1.7, 0.9, 1.2, 2.2];
        let (_, d) = ciou_from_sides(center, sides, &gt);
        for i in 0..4 {
            let h = 1e-6;
            let mut a = sides;
            let mut b = sides;
            a[i] += h;
            b[i] -= h;
            let fd = (ciou_from_sides(center, a, &gt).0 - ciou_from_sides(center, b, &gt).0) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-6 * (1.0 + fd.abs()), "side {i}: {fd} vs {}", d[i]);
        }
    }

    #[test]
    fn bce_at_zero_logit() {
        let (l, d) = bce_with_logits(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d, -0.5);
    }

    #[test]
    fn dfl_of_confident_integer_target_vanishes() {
        let mut z = vec![-40.0; 8];
        z[3] = 40.0;
        let (l, g) = dfl_side(&z, 3.0);
        assert!(l < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dfl_two_hot_weights() {
        let z = vec![0.0; 4];
        let (l, g) = dfl_side(&z, 1.25);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[1] - (0.25 - 0.75)).abs() < 1e-12 && (g[2] - (0.25 - 0.25)).abs() < 1e-12);
    }
}
