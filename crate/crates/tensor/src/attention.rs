//! Triplet attention: three rotated views of the input, each gated by a
//! sigmoid map computed from a 2-channel max/mean summary.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::Var;

/// Kernel size of every branch gate conv.
pub const GATE_KERNEL: usize = 7;

/// Max and mean over the channel axis: `[N, C, H, W] → [N, 2, H, W]`.
pub fn zpool<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    if x.shape().len() != 4 {
        return shape_err("zpool", format!("expected 4-D input, got {:?}", x.shape()));
    }
    let max = x.max_axis(1, true)?;
    let mean = x.mean_axis(1, true)?;
    Var::concat(&[&max, &mean], 1)
}

/// Gate conv of one branch: weight `[1, 2, 7, 7]`, bias `[1]`.
#[derive(Clone, Copy)]
pub struct GateWeights<'a, T> {
    pub weight: &'a Var<T>,
    pub bias: &'a Var<T>,
}

/// Branch gates in order: height rotation, width rotation, spatial. The
/// spatial gate is ignored when `no_spatial` is set.
#[derive(Clone, Copy)]
pub struct TripletWeights<'a, T> {
    pub branches: [GateWeights<'a, T>; 3],
    pub no_spatial: bool,
}

fn gate<T: Real>(x: &Var<T>, g: GateWeights<'_, T>) -> Result<Var<T>> {
    let s = zpool(x)?
        .conv2d(g.weight, Some(g.bias), 1, GATE_KERNEL / 2, 1)?
        .sigmoid();
    x.mul(&s)
}

/// Axis orders putting H, then W, in the channel slot. Both are involutions.
const ROTATE_H: [usize; 4] = [0, 2, 1, 3];
const ROTATE_W: [usize; 4] = [0, 3, 2, 1];

pub fn triplet_attention<T: Real>(x: &Var<T>, p: TripletWeights<'_, T>) -> Result<Var<T>> {
    if x.shape().len() != 4 {
        return shape_err("triplet_attention", format!("expected 4-D input, got {:?}", x.shape()));
    }
    let a = gate(&x.permute(&ROTATE_H)?, p.branches[0])?.permute(&ROTATE_H)?;
    let b = gate(&x.permute(&ROTATE_W)?, p.branches[1])?.permute(&ROTATE_W)?;
    if p.no_spatial {
        return Ok(a.add(&b)?.scale(0.5));
    }
    let c = gate(x, p.branches[2])?;
    Ok(a.add(&b)?.add(&c)?.scale(1.0 / 3.0))
}
