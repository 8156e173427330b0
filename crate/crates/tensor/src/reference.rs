//! Direct-loop reference implementations used as test oracles.
//!
//! Nothing here shares code with the fast paths: every function indexes the
//! inputs with plain nested loops so a bug in im2col, the sampler or the
//! permutation machinery cannot hide in both routes.

use crate::tensor::Tensor;

fn at4(t: &Tensor<f64>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

/// Zero-padded grouped convolution with a top-left kernel origin.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cg * groups, c_in);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cog = c_out / groups;
    let mut out = Vec::with_capacity(n * c_out * ho * wo);
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                    for ci in 0..cg {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at4(x, b, g * cg + ci, iy as usize, ix as usize)
                                    * at4(w, co, ci, ki, kj);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, ho, wo], out).unwrap()
}

/// Window max (`max = true`) or mean without padding.
pub fn pool2d(x: &Tensor<f64>, k: usize, s: usize, max: bool) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let vals: Vec<f64> = (0..k * k)
                        .map(|t| at4(x, b, ch, oy * s + t / k, ox * s + t % k))
                        .collect();
                    out.push(if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    });
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).unwrap()
}

/// Bilinear read of channel `c` of sample `b` with zero outside the grid.
pub fn bilinear(x: &Tensor<f64>, b: usize, c: usize, py: f64, px: f64) -> f64 {
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let (y0, x0) = (py.floor(), px.floor());
    let mut acc = 0.0;
    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let (yy, xx) = (y0 + dy, x0 + dx);
        let weight = (1.0 - (py - yy).abs()) * (1.0 - (px - xx).abs());
        let (yi, xi) = (yy as isize, xx as isize);
        if yi >= 0 && xi >= 0 && yi < h && xi < w {
            acc += weight * at4(x, b, c, yi as usize, xi as usize);
        }
    }
    acc
}

/// Per-tap modulated deformable convolution. Offsets `[N, 2K, H', W']` are
/// (y, x) pairs per tap; masks `[N, K, H', W']` are used as given.
pub fn deform_conv2d(
    x: &Tensor<f64>,
    offset: &Tensor<f64>,
    mask: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (offset.shape()[2], offset.shape()[3]);
    let mut out = Vec::new();
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let k = ki * kw + kj;
                            let py = (oy * stride + ki) as f64 - pad as f64 + at4(offset, b, 2 * k, oy, ox);
                            let px = (ox * stride + kj) as f64 - pad as f64 + at4(offset, b, 2 * k + 1, oy, ox);
                            let m = at4(mask, b, k, oy, ox);
                            for ci in 0..c_in {
                                acc += at4(w, co, ci, ki, kj) * m * bilinear(x, b, ci, py, px);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, ho, wo], out).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Sigmoid gate over a `rows × cols` plane from a 2-channel (max, mean)
/// summary, using a `[1, 2, k, k]` weight with "same" padding.
fn gate_plane(
    summary: &[[f64; 2]],
    rows: usize,
    cols: usize,
    w: &Tensor<f64>,
    b: f64,
) -> Vec<f64> {
    let k = w.shape()[2];
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = b;
            #[allow(clippy::needless_range_loop)]
            for ch in 0..2 {
                for ki in 0..k {
                    for kj in 0..k {
                        let rr = r as isize + ki as isize - pad;
                        let cc = c as isize + kj as isize - pad;
                        if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                            continue;
                        }
                        acc += summary[rr as usize * cols + cc as usize][ch] * at4(w, 0, ch, ki, kj);
                    }
                }
            }
            out[r * cols + c] = sigmoid(acc);
        }
    }
    out
}

fn max_mean(vals: impl Iterator<Item = f64>) -> [f64; 2] {
    let (mut m, mut s, mut n) = (f64::NEG_INFINITY, 0.0, 0.0);
    for v in vals {
        m = m.max(v);
        s += v;
        n += 1.0;
    }
    [m, s / n]
}

/// Triplet attention written per branch without any permutation: the
/// height branch gates each (c, w) column pooled over h, the width branch
/// each (h, c) pair pooled over w, the spatial branch each (h, w) pixel
/// pooled over c. `gates` holds (weight, bias) for those three branches.
pub fn triplet_attention(x: &Tensor<f64>, gates: [(&Tensor<f64>, f64); 3], no_spatial: bool) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; x.numel()];
    let branches = if no_spatial { 2.0 } else { 3.0 };
    for b in 0..n {
        // height branch: plane rows = c, cols = w
        let s: Vec<[f64; 2]> = (0..c * w)
            .map(|i| max_mean((0..h).map(|y| at4(x, b, i / w, y, i % w))))
            .collect();
        let ga = gate_plane(&s, c, w, gates[0].0, gates[0].1);
        // width branch: plane rows = h, cols = c
        let s: Vec<[f64; 2]> = (0..h * c)
            .map(|i| max_mean((0..w).map(|xx| at4(x, b, i % c, i / c, xx))))
            .collect();
        let gb = gate_plane(&s, h, c, gates[1].0, gates[1].1);
        // spatial branch: plane rows = h, cols = w
        let s: Vec<[f64; 2]> = (0..h * w)
            .map(|i| max_mean((0..c).map(|ch| at4(x, b, ch, i / w, i % w))))
            .collect();
        let gc = gate_plane(&s, h, w, gates[2].0, gates[2].1);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = at4(x, b, ch, y, xx);
                    let mut g = ga[ch * w + xx] + gb[y * c + ch];
                    if !no_spatial {
                        g += gc[y * w + xx];
                    }
                    out[((b * c + ch) * h + y) * w + xx] = v * g / branches;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
