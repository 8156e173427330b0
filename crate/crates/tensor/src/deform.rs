//! Modulated deformable convolution (DCNv2) and the bilinear sampler it
//! rests on.
//!
//! Offsets come as `[N, 2·K, H', W']` with channel `2k` holding the row (y)
//! displacement and `2k + 1` the column (x) displacement of kernel tap
//! `k = ki·kw + kj`. Masks come as `[N, K, H', W']` and are used as given; the
//! sigmoid is applied by [`deform_conv2d`]. Sampling outside the image reads
//! zeros corner by corner.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::nn::conv::conv_out_size;
use crate::real::{gemm, Real};
use crate::tape::{OpKind, Var};
use crate::tensor::Tensor;

static NEGATE_POSITION_GRAD: AtomicBool = AtomicBool::new(false);

/// Deliberately flips the sign of the sampler's position derivative so that
/// the verification suite can prove it notices a broken kernel.
#[doc(hidden)]
pub fn set_position_grad_fault(on: bool) {
    NEGATE_POSITION_GRAD.store(on, Ordering::SeqCst);
}

/// Corner indices and weights of a bilinear read at `(py, px)`. Corners that
/// fall outside the `h × w` grid get `None`.
#[derive(Clone, Copy, Debug)]
struct Taps<T> {
    idx: [Option<usize>; 4],
    // fractional parts
    ly: T,
    lx: T,
}

impl<T: Real> Taps<T> {
    fn new(py: T, px: T, h: usize, w: usize) -> Self {
        let y0 = py.floor();
        let x0 = px.floor();
        let (ly, lx) = (py - y0, px - x0);
        let (y0, x0) = (y0.as_f64() as i64, x0.as_f64() as i64);
        let at = |y: i64, x: i64| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
        };
        Self {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            ly,
            lx,
        }
    }

    fn weights(&self) -> [T; 4] {
        let (one, ly, lx) = (T::one(), self.ly, self.lx);
        [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx]
    }

    fn corners(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }

    fn sample(&self, plane: &[T]) -> T {
        let v = self.corners(plane);
        let wt = self.weights();
        wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3]
    }

    /// (∂/∂py, ∂/∂px) of the sample. Right-continuous at integer positions.
    fn position_grad(&self, plane: &[T]) -> (T, T) {
        let v = self.corners(plane);
        let (one, ly, lx) = (T::one(), self.ly, self.lx);
        let dy = (one - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
        let dx = (one - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
        if NEGATE_POSITION_GRAD.load(Ordering::Relaxed) {
            (-dy, -dx)
        } else {
            (dy, dx)
        }
    }

    fn scatter(&self, plane: &mut [T], g: T) {
        for (i, wt) in self.idx.iter().zip(self.weights()) {
            if let Some(i) = *i {
                plane[i] += g * wt;
            }
        }
    }
}

/// Bilinear read of every channel of a `[C, H, W]` tensor at `(py, px)`.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, py: T, px: T) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return shape_err("bilinear_sample", format!("expected [C,H,W], got {:?}", x.shape()));
    };
    let taps = Taps::new(py, px, h, w);
    let out = x.data().chunks(h * w).map(|p| taps.sample(p)).collect();
    Tensor::new(vec![c], out)
}

#[derive(Clone, Copy, Debug)]
struct DeformGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl DeformGeometry {
    fn new(x: &[usize], offset: &[usize], mask: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, wc, kh, kw]) = (x, weight) else {
            return shape_err("deform_conv2d", format!("expected 4-D input and weight, got {x:?} and {weight:?}"));
        };
        if wc != c_in {
            return shape_err("deform_conv2d", format!("weight expects {wc} channels, input has {c_in}"));
        }
        if stride == 0 {
            return config_err("deform_conv2d", "stride must be positive");
        }
        let (Some(h_out), Some(w_out)) = (conv_out_size(h, kh, stride, padding), conv_out_size(w, kw, stride, padding)) else {
            return shape_err("deform_conv2d", format!("{kh}x{kw} kernel does not fit {h}x{w} input"));
        };
        let k = kh * kw;
        if offset != [n, 2 * k, h_out, w_out] {
            return config_err(
                "deform_conv2d",
                format!("offset shape {offset:?}, expected [{n}, {}, {h_out}, {w_out}]", 2 * k),
            );
        }
        if mask != [n, k, h_out, w_out] {
            return config_err(
                "deform_conv2d",
                format!("mask shape {mask:?}, expected [{n}, {k}, {h_out}, {w_out}]"),
            );
        }
        Ok(Self { n, c_in, h, w, c_out, kh, kw, stride, padding, h_out, w_out })
    }

    fn k(&self) -> usize {
        self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.h_out * self.w_out
    }

    fn rows(&self) -> usize {
        self.c_in * self.k()
    }

    /// Sampling taps of tap `k` at output position `p` given per-sample
    /// offset data.
    fn taps<T: Real>(&self, off: &[T], k: usize, p: usize) -> Taps<T> {
        let l = self.l();
        let (oy, ox) = (p / self.w_out, p % self.w_out);
        let (ki, kj) = (k / self.kw, k % self.kw);
        let base_y = (oy * self.stride + ki) as f64 - self.padding as f64;
        let base_x = (ox * self.stride + kj) as f64 - self.padding as f64;
        let py = T::from_f64(base_y) + off[2 * k * l + p];
        let px = T::from_f64(base_x) + off[(2 * k + 1) * l + p];
        Taps::new(py, px, self.h, self.w)
    }

    /// Modulated columns `[C·K, L]` for one sample.
    fn columns<T: Real>(&self, x: &[T], off: &[T], mask: &[T], cols: &mut [T]) {
        let (l, k_n, hw) = (self.l(), self.k(), self.h * self.w);
        for k in 0..k_n {
            for p in 0..l {
                let taps = self.taps(off, k, p);
                let m = mask[k * l + p];
                for c in 0..self.c_in {
                    cols[(c * k_n + k) * l + p] = m * taps.sample(&x[c * hw..(c + 1) * hw]);
                }
            }
        }
    }
}

pub struct DeformGrads<T> {
    pub input: Option<Tensor<T>>,
    pub offset: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// `y(p₀) = Σ_k w_k · m_k(p₀) · x(p₀ + p_k + Δp_k(p₀)) + b`.
pub fn modulated_deform_conv2d_forward<T: Real>(
    x: &Tensor<T>,
    offset: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = DeformGeometry::new(x.shape(), offset.shape(), mask.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return shape_err("deform_conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), g.c_out));
        }
    }
    let (l, rows) = (g.l(), g.rows());
    let (xd, od, md, wd) = (x.data(), offset.data(), mask.data(), weight.data());
    let in_sample = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.c_out * l];
    out.par_chunks_mut(g.c_out * l).enumerate().for_each(|(n, y)| {
        let mut cols = vec![T::zero(); rows * l];
        g.columns(
            &xd[n * in_sample..(n + 1) * in_sample],
            &od[n * 2 * g.k() * l..(n + 1) * 2 * g.k() * l],
            &md[n * g.k() * l..(n + 1) * g.k() * l],
            &mut cols,
        );
        gemm(wd, &cols, y, g.c_out, rows, l, false, false, false);
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(l).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

struct SampleGrads<T> {
    dx: Vec<T>,
    doff: Vec<T>,
    dmask: Vec<T>,
    dw: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn modulated_deform_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    offset: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &DeformGeometry,
    need: [bool; 5],
) -> DeformGrads<T> {
    let (l, rows, k_n, hw) = (g.l(), g.rows(), g.k(), g.h * g.w);
    let in_sample = g.c_in * hw;
    let (xd, od, md, wd, gd) = (x.data(), offset.data(), mask.data(), weight.data(), grad_out.data());

    let per_sample: Vec<SampleGrads<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xs = &xd[n * in_sample..(n + 1) * in_sample];
            let off = &od[n * 2 * k_n * l..(n + 1) * 2 * k_n * l];
            let ms = &md[n * k_n * l..(n + 1) * k_n * l];
            let gy = &gd[n * g.c_out * l..(n + 1) * g.c_out * l];
            let mut out = SampleGrads { dx: Vec::new(), doff: Vec::new(), dmask: Vec::new(), dw: Vec::new() };
            if need[3] {
                let mut cols = vec![T::zero(); rows * l];
                g.columns(xs, off, ms, &mut cols);
                out.dw = vec![T::zero(); g.c_out * rows];
                gemm(gy, &cols, &mut out.dw, g.c_out, l, rows, false, true, false);
            }
            if need[0] || need[1] || need[2] {
                let mut dcols = vec![T::zero(); rows * l];
                gemm(wd, gy, &mut dcols, rows, g.c_out, l, true, false, false);
                out.dx = vec![T::zero(); in_sample];
                out.doff = vec![T::zero(); 2 * k_n * l];
                out.dmask = vec![T::zero(); k_n * l];
                for k in 0..k_n {
                    for p in 0..l {
                        let taps = g.taps(off, k, p);
                        let m = ms[k * l + p];
                        let (mut gm, mut gpy, mut gpx) = (T::zero(), T::zero(), T::zero());
                        for c in 0..g.c_in {
                            let dc = dcols[(c * k_n + k) * l + p];
                            let plane = &xs[c * hw..(c + 1) * hw];
                            gm += dc * taps.sample(plane);
                            let (dy, dx) = taps.position_grad(plane);
                            gpy += dc * m * dy;
                            gpx += dc * m * dx;
                            if need[0] {
                                taps.scatter(&mut out.dx[c * hw..(c + 1) * hw], dc * m);
                            }
                        }
                        out.dmask[k * l + p] = gm;
                        out.doff[2 * k * l + p] = gpy;
                        out.doff[(2 * k + 1) * l + p] = gpx;
                    }
                }
            }
            out
        })
        .collect();

    let gather = |f: fn(&SampleGrads<T>) -> &Vec<T>, shape: &[usize]| {
        let mut v = Vec::with_capacity(shape.iter().product());
        for s in &per_sample {
            v.extend_from_slice(f(s));
        }
        Tensor::new(shape.to_vec(), v).unwrap()
    };
    let input = need[0].then(|| gather(|s| &s.dx, x.shape()));
    let offset_grad = need[1].then(|| gather(|s| &s.doff, offset.shape()));
    let mask_grad = need[2].then(|| gather(|s| &s.dmask, mask.shape()));
    let weight_grad = need[3].then(|| {
        let mut dw = vec![T::zero(); g.c_out * rows];
        for s in &per_sample {
            dw.iter_mut().zip(&s.dw).for_each(|(a, &b)| *a += b);
        }
        Tensor::new(weight.shape().to_vec(), dw).unwrap()
    });
    let bias = need[4].then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let s = (n * g.c_out + co) * l;
                *acc += gd[s..s + l].iter().copied().sum::<T>();
            }
        }
        Tensor::new(vec![g.c_out], db).unwrap()
    });
    DeformGrads { input, offset: offset_grad, mask: mask_grad, weight: weight_grad, bias }
}

/// Weights of one deformable convolution layer. The offset and mask
/// predictors are 3×3 convs with padding 1 and the main conv's stride.
#[derive(Clone, Copy)]
pub struct DeformConvWeights<'a, T> {
    pub weight: &'a Var<T>,
    pub bias: Option<&'a Var<T>>,
    pub offset_weight: &'a Var<T>,
    pub offset_bias: &'a Var<T>,
    pub mask_weight: &'a Var<T>,
    pub mask_bias: &'a Var<T>,
}

/// Deformable convolution with offsets and sigmoid masks predicted from `x`.
pub fn deform_conv2d<T: Real>(
    x: &Var<T>,
    p: DeformConvWeights<'_, T>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let ws = p.weight.shape();
    if ws.len() != 4 {
        return shape_err("deform_conv2d", format!("weight {ws:?} is not 4-D"));
    }
    let k = ws[2] * ws[3];
    let (os, ms) = (p.offset_weight.shape(), p.mask_weight.shape());
    if os.first() != Some(&(2 * k)) || ms.first() != Some(&k) {
        return config_err(
            "deform_conv2d",
            format!("offset conv has {:?} and mask conv {:?} output channels, need {} and {k}", os.first(), ms.first(), 2 * k),
        );
    }
    let offset = x.conv2d(p.offset_weight, Some(p.offset_bias), stride, 1, 1)?;
    let mask = x.conv2d(p.mask_weight, Some(p.mask_bias), stride, 1, 1)?.sigmoid();
    x.modulated_deform_conv2d(&offset, &mask, p.weight, p.bias, stride, padding)
}

impl<T: Real> Var<T> {
    /// Bilinear read of a `[C, H, W]` value at position `pos = [py, px]`.
    pub fn bilinear_sample(&self, pos: &Var<T>) -> Result<Var<T>> {
        if pos.shape() != [2] {
            return shape_err("bilinear_sample", format!("position shape {:?}, expected [2]", pos.shape()));
        }
        let (py, px) = (pos.value().data()[0], pos.value().data()[1]);
        let out = bilinear_sample(self.value(), py, px)?;
        let x = self.value().clone();
        let need = [self.requires_grad(), pos.requires_grad()];
        Ok(self.tape().record(OpKind::BilinearSample, &[self, pos], out, move |g| {
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let taps = Taps::new(py, px, h, w);
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); x.numel()];
                for (c, plane) in dx.chunks_mut(h * w).enumerate() {
                    taps.scatter(plane, gd[c]);
                }
                Tensor::new(x.shape().to_vec(), dx).unwrap()
            });
            let dpos = need[1].then(|| {
                let (mut gy, mut gx) = (T::zero(), T::zero());
                for (c, plane) in x.data().chunks(h * w).enumerate() {
                    let (dy, dxv) = taps.position_grad(plane);
                    gy += gd[c] * dy;
                    gx += gd[c] * dxv;
                }
                Tensor::new(vec![2], vec![gy, gx]).unwrap()
            });
            vec![dx, dpos]
        }))
    }

    /// DCNv2 core with externally supplied offsets and (already squashed)
    /// masks.
    pub fn modulated_deform_conv2d(
        &self,
        offset: &Var<T>,
        mask: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let geom = DeformGeometry::new(self.shape(), offset.shape(), mask.shape(), weight.shape(), stride, padding)?;
        let out = modulated_deform_conv2d_forward(
            self.value(),
            offset.value(),
            mask.value(),
            weight.value(),
            bias.map(|b| b.value()),
            stride,
            padding,
        )?;
        let need = [
            self.requires_grad(),
            offset.requires_grad(),
            mask.requires_grad(),
            weight.requires_grad(),
            bias.is_some_and(|b| b.requires_grad()),
        ];
        let (x, o, m, w) = (
            self.value().clone(),
            offset.value().clone(),
            mask.value().clone(),
            weight.value().clone(),
        );
        let mut inputs = vec![self, offset, mask, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let kind = OpKind::DeformConv2d {
            kernel: (geom.kh, geom.kw),
            stride,
            padding,
        };
        Ok(self.tape().record(kind, &inputs, out, move |g| {
            let gr = modulated_deform_conv2d_backward(&x, &o, &m, &w, g, &geom, need);
            let mut v = vec![gr.input, gr.offset, gr.mask, gr.weight];
            if has_bias {
                v.push(gr.bias);
            }
            v
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::conv2d_forward;
    use crate::Tape;
    use rand::SeedableRng;

    #[test]
    fn integer_position_reads_pixel() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(bilinear_sample(&x, 1.0, 2.0).unwrap().item(), 5.0);
    }

    #[test]
    fn center_of_two_by_two() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&x, 0.5, 0.5).unwrap().item(), 2.5);
    }

    #[test]
    fn outside_reads_zero_per_corner() {
        let x = Tensor::<f64>::ones(vec![1, 2, 2]);
        assert_eq!(bilinear_sample(&x, -5.0, 0.0).unwrap().item(), 0.0);
        // half the weight lands on the missing row −1
        assert!((bilinear_sample(&x, -0.5, 0.0).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_offsets_unit_masks_is_conv() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(vec![2, 3, 5, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![4], -1.0, 1.0, &mut rng);
        for stride in [1, 2] {
            let reference = conv2d_forward(&x, &w, Some(&b), stride, 1, 1).unwrap();
            let (ho, wo) = (reference.shape()[2], reference.shape()[3]);
            let off = Tensor::zeros(vec![2, 18, ho, wo]);
            let mask = Tensor::ones(vec![2, 9, ho, wo]);
            let y = modulated_deform_conv2d_forward(&x, &off, &mask, &w, Some(&b), stride, 1).unwrap();
            assert!(y.rel_err(&reference) < 1e-12);
        }
    }

    #[test]
    fn zero_masks_leave_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(vec![3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let off = Tensor::uniform(vec![1, 18, 4, 4], -0.5, 0.5, &mut rng);
        let y = modulated_deform_conv2d_forward(&x, &off, &Tensor::zeros(vec![1, 9, 4, 4]), &w, Some(&b), 1, 1).unwrap();
        for (c, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn mismatched_offset_channels() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let off = tape.constant(Tensor::zeros(vec![1, 9, 4, 4]));
        let mask = tape.constant(Tensor::zeros(vec![1, 9, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let err = x.modulated_deform_conv2d(&off, &mask, &w, None, 1, 1).unwrap_err();
        assert!(matches!(err, crate::TensorError::Config { .. }));
    }
}
