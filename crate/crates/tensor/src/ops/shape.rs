//! Data-movement ops: reshape, permute, concat, narrow and split.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{OpKind, Var};
use crate::tensor::{numel, strides_of, Tensor};

use super::reduce::axis_split;

pub fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return shape_err(
            "permute",
            format!("{axes:?} is not a permutation of 0..{rank}"),
        );
    }
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    // stride in the input for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.push(xd[0]);
        return Tensor::new(out_shape, out);
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    while out.len() < total {
        for j in 0..out_shape[last] {
            out.push(xd[off + j * src[last]]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            off += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = xs.first() else {
        return shape_err("concat", "no inputs");
    };
    let rank = first.rank();
    if axis >= rank {
        return shape_err("concat", format!("axis {axis} out of range for rank {rank}"));
    }
    for x in xs {
        let ok = x.rank() == rank
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return shape_err(
                "concat",
                format!("non-axis dims differ: {:?} vs {:?}", x.shape(), first.shape()),
            );
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total_axis;
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for x in xs {
            let block = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(out_shape, out)
}

pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return shape_err(
            "narrow",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        );
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(out_shape, out)
}

impl<T: Real> Var<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(self.tape().record(OpKind::Reshape, &[self], out, move |g| {
            vec![Some(g.reshape(in_shape).unwrap())]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let out = permute(self.value(), axes)?;
        let inv = inverse_permutation(axes);
        Ok(self.tape().record(OpKind::Permute, &[self], out, move |g| {
            vec![Some(permute(g, &inv).unwrap())]
        }))
    }

    pub fn concat(xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let Some(first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let values: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
        let out = concat(&values, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|v| v.shape()[axis]).collect();
        let needs: Vec<bool> = xs.iter().map(|v| v.requires_grad()).collect();
        Ok(first.tape().record(OpKind::Concat, xs, out, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .zip(&needs)
                .map(|(&len, &need)| {
                    let slice = need.then(|| narrow(g, axis, start, len).unwrap());
                    start += len;
                    slice
                })
                .collect()
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = narrow(self.value(), axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(self.tape().record(OpKind::Narrow, &[self], out, move |g| {
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut dx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                dx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape, dx).unwrap())]
        }))
    }

    /// Splits `axis` into `parts` equal slices.
    pub fn split(&self, parts: usize, axis: usize) -> Result<Vec<Var<T>>> {
        if axis >= self.value().rank() {
            return shape_err("split", format!("axis {axis} out of range"));
        }
        let n = self.shape()[axis];
        if parts == 0 || !n.is_multiple_of(parts) {
            return shape_err(
                "split",
                format!("{parts} parts do not divide axis {axis} of length {n}"),
            );
        }
        let len = n / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }
}
