//! 2-D convolution via im2col + GEMM.
//!
//! Indexing uses a top-left kernel origin with explicit zero padding: output
//! `(oy, ox)` reads input rows `oy·stride − pad + ki` for `ki in 0..kh`.
//! Depthwise convolution is the `groups == C_in == C_out` case and pointwise
//! convolution the 1×1 case.

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::real::{gemm, Real};
use crate::tape::{OpKind, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// `floor((size + 2·pad − k) / stride) + 1`, or `None` when no kernel
/// placement fits.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let (&[n, c_in, h, wd], &[c_out, c_per_group, kh, kw]) = (x, w) else {
            return shape_err("conv2d", format!("expected 4-D input and weight, got {x:?} and {w:?}"));
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return config_err(
                "conv2d",
                format!("groups={groups} must divide C_in={c_in} and C_out={c_out}"),
            );
        }
        if c_per_group * groups != c_in {
            return shape_err(
                "conv2d",
                format!("weight expects {} input channels, input has {c_in}", c_per_group * groups),
            );
        }
        if stride == 0 {
            return config_err("conv2d", "stride must be positive");
        }
        let (Some(h_out), Some(w_out)) = (
            conv_out_size(h, kh, stride, padding),
            conv_out_size(wd, kw, stride, padding),
        ) else {
            return shape_err(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit {h}x{wd} input with padding {padding}"),
            );
        };
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            padding,
            groups,
            h_out,
            w_out,
        })
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.groups
    }

    fn cols_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unrolls `channels` planes of `x` into `cols` with one row per (channel,
/// ki, kj) and one column per output position.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [T],
) {
    let l = h_out * w_out;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [T],
) {
    let l = h_out * w_out;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(x.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return shape_err("conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), g.c_out));
        }
    }
    let (l, rows, cg, cog) = (g.l(), g.cols_rows(), g.cg(), g.cog());
    let in_sample = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.c_out * l];
    let xd = x.data();
    let wd = weight.data();
    out.par_chunks_mut(g.c_out * l).enumerate().for_each(|(n, y)| {
        let mut cols = vec![T::zero(); rows * l];
        for gi in 0..g.groups {
            let xs = &xd[n * in_sample + gi * cg * g.h * g.w..];
            im2col(xs, cg, g.h, g.w, g.kh, g.kw, g.stride, g.padding, g.h_out, g.w_out, &mut cols);
            let wg = &wd[gi * cog * rows..(gi + 1) * cog * rows];
            gemm(wg, &cols, &mut y[gi * cog * l..(gi + 1) * cog * l], cog, rows, l, false, false, false);
        }
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(l).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &Conv2dGeometry,
    need: [bool; 3],
) -> Conv2dGrads<T> {
    let g = geom;
    let (l, rows, cg, cog) = (g.l(), g.cols_rows(), g.cg(), g.cog());
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * l;
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());

    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); g.n * in_sample];
        dx.par_chunks_mut(in_sample).enumerate().for_each(|(n, dxs)| {
            let mut dcols = vec![T::zero(); rows * l];
            for gi in 0..g.groups {
                let wg = &wd[gi * cog * rows..(gi + 1) * cog * rows];
                let gy = &gd[n * out_sample + gi * cog * l..n * out_sample + (gi + 1) * cog * l];
                gemm(wg, gy, &mut dcols, rows, cog, l, true, false, false);
                let dst = &mut dxs[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
                col2im(&dcols, cg, g.h, g.w, g.kh, g.kw, g.stride, g.padding, g.h_out, g.w_out, dst);
            }
        });
        Tensor::new(vec![g.n, g.c_in, g.h, g.w], dx).unwrap()
    });

    let weight_grad = need[1].then(|| {
        // per-sample partials, summed in sample order for determinism
        let partials: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|n| {
                let mut dw = vec![T::zero(); g.c_out * rows];
                let mut cols = vec![T::zero(); rows * l];
                for gi in 0..g.groups {
                    let xs = &xd[n * in_sample + gi * cg * g.h * g.w..];
                    im2col(xs, cg, g.h, g.w, g.kh, g.kw, g.stride, g.padding, g.h_out, g.w_out, &mut cols);
                    let gy = &gd[n * out_sample + gi * cog * l..n * out_sample + (gi + 1) * cog * l];
                    gemm(gy, &cols, &mut dw[gi * cog * rows..(gi + 1) * cog * rows], cog, l, rows, false, true, false);
                }
                dw
            })
            .collect();
        let mut dw = vec![T::zero(); g.c_out * rows];
        for p in partials {
            dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        Tensor::new(weight.shape().to_vec(), dw).unwrap()
    });

    let bias = need[2].then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let s = n * out_sample + co * l;
                *acc += gd[s..s + l].iter().copied().sum::<T>();
            }
        }
        Tensor::new(vec![g.c_out], db).unwrap()
    });

    Conv2dGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

impl<T: Real> Var<T> {
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let geom = Conv2dGeometry::new(self.shape(), weight.shape(), stride, padding, groups)?;
        let out = conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()), stride, padding, groups)?;
        let need = [
            self.requires_grad(),
            weight.requires_grad(),
            bias.is_some_and(|b| b.requires_grad()),
        ];
        let x = self.value().clone();
        let w = weight.value().clone();
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let kind = OpKind::Conv2d {
            kernel: (geom.kh, geom.kw),
            stride,
            padding,
            groups,
        };
        Ok(self.tape().record(kind, &inputs, out, move |g| {
            let grads = conv2d_backward(&x, &w, g, &geom, need);
            let mut v = vec![grads.input, grads.weight];
            if has_bias {
                v.push(grads.bias);
            }
            v
        }))
    }

    /// Per-channel convolution: `groups == C_in == C_out`, weight `[C,1,kh,kw]`.
    pub fn depthwise_conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let c = self.shape().get(1).copied().unwrap_or(0);
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
            return config_err(
                "depthwise_conv2d",
                format!("weight {ws:?} is not depthwise for {c} channels (need [{c},1,kh,kw])"),
            );
        }
        self.conv2d(weight, bias, stride, padding, c)
    }

    /// Per-pixel channel mixing with a `[C_out,C,1,1]` weight.
    pub fn pointwise_conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
            return shape_err("pointwise_conv2d", format!("weight {ws:?} is not 1x1"));
        }
        self.conv2d(weight, bias, 1, 0, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::<f64>::ones(vec![1, 1, 1, 1]);
        assert_eq!(conv2d_forward(&x, &w, None, 1, 0, 1).unwrap(), x);
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_out_size(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_size(5, 3, 2, 1), Some(3));
        assert_eq!(conv_out_size(2, 3, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![2, 2, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 1, 1),
            Err(crate::TensorError::Shape { .. })
        ));
    }

    #[test]
    fn depthwise_rejects_non_depthwise_weight() {
        let tape = crate::Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        assert!(matches!(
            x.depthwise_conv2d(&w, None, 1, 1),
            Err(crate::TensorError::Config { .. })
        ));
    }

    #[test]
    fn pointwise_sums_channels() {
        let tape = crate::Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64(vec![1, 2, 1, 1], &[2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::ones(vec![1, 2, 1, 1]));
        assert_eq!(x.pointwise_conv2d(&w, None).unwrap().value().item(), 5.0);
    }
}
