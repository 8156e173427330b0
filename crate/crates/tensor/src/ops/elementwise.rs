//! Pointwise ops. Binary ops broadcast between tensors of equal rank along
//! axes where one side has extent 1; ranks are never promoted.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{OpKind, Var};
use crate::tensor::{numel, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(
            "broadcast",
            format!("rank mismatch {a:?} vs {b:?} (no implicit rank promotion)"),
        );
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err("broadcast", format!("incompatible shapes {a:?} vs {b:?}")),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    shape
        .iter()
        .zip(out)
        .zip(strides)
        .map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element in
/// row-major order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total = numel(out);
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let mut i = 0;
    while i < total {
        for j in 0..out[last] {
            f(i + j, oa + j * sa[last], ob + j * sb[last]);
        }
        i += out[last];
        // advance the odometer over the leading axes
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let f = match kind {
        BinaryKind::Add => |x: T, y: T| x + y,
        BinaryKind::Sub => |x: T, y: T| x - y,
        BinaryKind::Mul => |x: T, y: T| x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Sums `grad` down to `shape` over the axes that were broadcast.
pub fn sum_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let st = broadcast_strides(shape, out);
    let mut acc = Tensor::zeros(shape.to_vec());
    let gd = grad.data();
    let ad = acc.data_mut();
    for_each_broadcast(out, &st, &st, |i, it, _| ad[it] += gd[i]);
    acc
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Var<T> {
    fn binary_op(&self, other: &Var<T>, kind: BinaryKind) -> Result<Var<T>> {
        let out = binary(kind, self.value(), other.value())?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        let (av, bv) = match kind {
            BinaryKind::Mul => (Some(self.value().clone()), Some(other.value().clone())),
            _ => (None, None),
        };
        let op = match kind {
            BinaryKind::Add => OpKind::Add,
            BinaryKind::Sub => OpKind::Sub,
            BinaryKind::Mul => OpKind::Mul,
        };
        Ok(self.tape().record(op, &[self, other], out, move |g| {
            let ga = need_a.then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => sum_to_shape(g, &sa),
                BinaryKind::Mul => sum_to_shape(
                    &binary(BinaryKind::Mul, g, bv.as_ref().unwrap()).unwrap(),
                    &sa,
                ),
            });
            let gb = need_b.then(|| match kind {
                BinaryKind::Add => sum_to_shape(g, &sb),
                BinaryKind::Sub => sum_to_shape(&g.map(|v| -v), &sb),
                BinaryKind::Mul => sum_to_shape(
                    &binary(BinaryKind::Mul, g, av.as_ref().unwrap()).unwrap(),
                    &sb,
                ),
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary_op(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary_op(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary_op(other, BinaryKind::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Var<T> {
        let s = T::from_f64(factor);
        let out = self.value().map(|v| v * s);
        self.tape()
            .record(OpKind::Scale, &[self], out, move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn sigmoid(&self) -> Var<T> {
        let out = self.value().map(sigmoid_scalar);
        let y = out.clone();
        self.tape().record(OpKind::Sigmoid, &[self], out, move |g| {
            let data = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
        })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Var<T> {
        let x = self.value().clone();
        let out = x.map(|v| v * sigmoid_scalar(v));
        self.tape().record(OpKind::Silu, &[self], out, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| {
                    let s = sigmoid_scalar(v);
                    g * (s + v * s * (T::one() - s))
                })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn activations_at_zero() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[1], &[0.0]));
        assert_eq!(x.silu().value().item(), 0.0);
        assert_eq!(x.sigmoid().value().item(), 0.5);
    }

    #[test]
    fn add_vectors() {
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_over_size_one_axis() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 1, 2], &[10.0, 20.0]);
        let c = binary(BinaryKind::Mul, &a, &b).unwrap();
        assert_eq!(c.data(), &[10.0, 40.0, 30.0, 80.0]);
        let back = sum_to_shape(&c, &[1, 1, 2]);
        assert_eq!(back.data(), &[40.0, 120.0]);
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let a = t(&[2, 2], &[1.0; 4]);
        let b = t(&[2], &[1.0; 2]);
        assert!(binary(BinaryKind::Add, &a, &b).is_err());
        let c = t(&[2, 3], &[1.0; 6]);
        assert!(binary(BinaryKind::Add, &a, &c).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid_scalar(-1000.0f64), 0.0);
        assert_eq!(sigmoid_scalar(1000.0f64), 1.0);
    }
}
