use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{OpKind, ReduceKind, Var};
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, n, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

/// Reduction along one axis. For `Max` the returned index vector holds the
/// first (lowest index) argmax of every output element.
pub fn reduce<T: Real>(
    kind: ReduceKind,
    x: &Tensor<T>,
    axis: usize,
    keepdim: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if axis >= x.rank() {
        return shape_err(
            "reduce",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        );
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    let mut argmax = Vec::new();
    if kind == ReduceKind::Max {
        argmax = vec![0usize; outer * inner];
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let oi = o * inner + i;
            match kind {
                ReduceKind::Max => {
                    let mut best = xd[base];
                    let mut arg = 0;
                    for j in 1..n {
                        let v = xd[base + j * inner];
                        if v > best {
                            best = v;
                            arg = j;
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = arg;
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += xd[base + j * inner];
                    }
                    out[oi] = if kind == ReduceKind::Mean { acc * inv_n } else { acc };
                }
            }
        }
    }
    Ok((Tensor::new(reduced_shape(x.shape(), axis, keepdim), out)?, argmax))
}

impl<T: Real> Var<T> {
    pub fn reduce(&self, kind: ReduceKind, axis: usize, keepdim: bool) -> Result<Var<T>> {
        let (out, argmax) = reduce(kind, self.value(), axis, keepdim)?;
        let shape = self.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        Ok(self.tape().record(OpKind::Reduce(kind), &[self], out, move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * n * inner];
            let inv_n = T::one() / T::from_f64(n as f64);
            for o in 0..outer {
                for i in 0..inner {
                    let oi = o * inner + i;
                    let base = o * n * inner + i;
                    match kind {
                        ReduceKind::Max => dx[base + argmax[oi] * inner] += gd[oi],
                        ReduceKind::Sum => (0..n).for_each(|j| dx[base + j * inner] = gd[oi]),
                        ReduceKind::Mean => {
                            (0..n).for_each(|j| dx[base + j * inner] = gd[oi] * inv_n)
                        }
                    }
                }
            }
            vec![Some(Tensor::new(shape, dx).unwrap())]
        }))
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.reduce(ReduceKind::Max, axis, keepdim)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.reduce(ReduceKind::Mean, axis, keepdim)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<T>> {
        self.reduce(ReduceKind::Sum, axis, keepdim)
    }

    /// Sum of every element, as a one-element tensor of shape `[1]`.
    pub fn sum_all(&self) -> Result<Var<T>> {
        self.reshape(vec![self.value().numel()])?.sum_axis(0, true)
    }
}
