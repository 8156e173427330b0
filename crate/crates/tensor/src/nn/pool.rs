//! Pooling, unfold and nearest-neighbour upsampling.
//!
//! Only max pooling takes padding (padded cells never win); average pooling
//! and unfold read whole windows inside the input.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{OpKind, PoolKind, Var};
use crate::tensor::Tensor;

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(op, format!("expected 4-D input, got {shape:?}")),
    }
}

fn pooled_size(op: &'static str, h: usize, w: usize, k: usize, s: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return shape_err(op, "kernel and stride must be positive");
    }
    if k > h || k > w {
        return shape_err(op, format!("kernel {k} larger than input {h}x{w}"));
    }
    Ok(((h - k) / s + 1, (w - k) / s + 1))
}

/// Pooled tensor plus, for max pooling, the flat input index picked by each
/// output (first maximum in row-major window order).
pub fn pool2d<T: Real>(kind: PoolKind, x: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    pool2d_padded(kind, x, k, s, 0)
}

pub fn pool2d_padded<T: Real>(
    kind: PoolKind,
    x: &Tensor<T>,
    k: usize,
    s: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = dims4("pool2d", x.shape())?;
    if pad > 0 && (kind == PoolKind::Avg || pad >= k) {
        return shape_err("pool2d", format!("padding {pad} needs max pooling with a kernel above {pad}"));
    }
    let (ho, wo) = pooled_size("pool2d", h + 2 * pad, w + 2 * pad, k, s)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::new();
    let inv = T::one() / T::from_f64((k * k) as f64);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                let mut acc = T::zero();
                let mut first = true;
                for ki in 0..k {
                    for kj in 0..k {
                        let (Some(y), Some(xx)) = ((oy * s + ki).checked_sub(pad), (ox * s + kj).checked_sub(pad)) else {
                            continue;
                        };
                        if y >= h || xx >= w {
                            continue;
                        }
                        let i = base + y * w + xx;
                        let v = xd[i];
                        if first || v > best {
                            best = v;
                            best_i = i;
                            first = false;
                        }
                        acc += v;
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        arg.push(best_i);
                    }
                    PoolKind::Avg => out.push(acc * inv),
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

/// `[N, C, H, W] → [N, C·k², L]`; row `c·k² + ki·k + kj`, column = window
/// index in row-major placement order.
pub fn unfold2d<T: Real>(x: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("unfold2d", x.shape())?;
    let (ho, wo) = pooled_size("unfold2d", h, w, k, s)?;
    let l = ho * wo;
    let mut out = vec![T::zero(); n * c * k * k * l];
    let xd = x.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (b * c + ch) * k * k + ki * k + kj;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[row * l + oy * wo + ox] = xd[base + (oy * s + ki) * w + ox * s + kj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c * k * k, l], out)
}

fn fold2d<T: Real>(cols: &Tensor<T>, shape: &[usize], k: usize, s: usize) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let l = ho * wo;
    let mut dx = vec![T::zero(); n * c * h * w];
    let cd = cols.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (b * c + ch) * k * k + ki * k + kj;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[base + (oy * s + ki) * w + ox * s + kj] += cd[row * l + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), dx).unwrap()
}

pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("upsample_nearest2x", x.shape())?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[plane * h2 * w2 + y * w2 + xx] = xd[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

impl<T: Real> Var<T> {
    pub fn pool2d(&self, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var<T>> {
        self.pool2d_padded(kind, kernel, stride, 0)
    }

    pub fn pool2d_padded(&self, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Var<T>> {
        let (out, arg) = pool2d_padded(kind, self.value(), kernel, stride, padding)?;
        let shape = self.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        let op = OpKind::Pool2d {
            kind,
            kernel,
            stride,
            padding,
        };
        Ok(self.tape().record(op, &[self], out, move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); shape.iter().product()];
            match kind {
                PoolKind::Max => {
                    for (i, &src) in arg.iter().enumerate() {
                        dx[src] += gd[i];
                    }
                }
                PoolKind::Avg => {
                    let inv = T::one() / T::from_f64((kernel * kernel) as f64);
                    for plane in 0..shape[0] * shape[1] {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gd[(plane * ho + oy) * wo + ox] * inv;
                                for ki in 0..kernel {
                                    for kj in 0..kernel {
                                        dx[plane * h * w + (oy * stride + ki) * w + ox * stride + kj] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(shape, dx).unwrap())]
        }))
    }

    pub fn unfold2d(&self, kernel: usize, stride: usize) -> Result<Var<T>> {
        let out = unfold2d(self.value(), kernel, stride)?;
        let shape = self.shape().to_vec();
        Ok(self
            .tape()
            .record(OpKind::Unfold2d { kernel, stride }, &[self], out, move |g| {
                vec![Some(fold2d(g, &shape, kernel, stride))]
            }))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<T>> {
        let out = upsample_nearest2x(self.value())?;
        let shape = self.shape().to_vec();
        Ok(self
            .tape()
            .record(OpKind::UpsampleNearest2x, &[self], out, move |g| {
                let (h, w) = (shape[2], shape[3]);
                let mut dx = vec![T::zero(); shape.iter().product()];
                let gd = g.data();
                for plane in 0..shape[0] * shape[1] {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dx[plane * h * w + (y / 2) * w + x / 2] += gd[plane * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                vec![Some(Tensor::new(shape, dx).unwrap())]
            }))
    }
}
