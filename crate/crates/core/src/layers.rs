//! Parameterised layers: plain and grouped convolution, batch norm, the
//! conv-norm-SiLU unit, depthwise-separable convolution, deformable
//! convolution and triplet attention.

use dsaf_tensor::attention::{triplet_attention, GateWeights, TripletWeights, GATE_KERNEL};
use dsaf_tensor::deform::{deform_conv2d, DeformConvWeights};
use dsaf_tensor::{Real, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Ctx, ParamBuilder, ParamId};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    /// `k×k` convolution with "same" padding `k/2`.
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in / groups * k * k;
        let weight = b.uniform_fan_in("weight", vec![c_out, c_in / groups, k, k], fan_in, true);
        let bias = bias.then(|| b.uniform_fan_in("bias", vec![c_out], fan_in, false));
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        Ok(x.conv2d(&w, b.as_ref(), self.stride, self.padding, self.groups)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c: usize) -> Self {
        Self {
            gamma: b.constant("gamma", vec![c], 1.0, false),
            beta: b.constant("beta", vec![c], 0.0, false),
            running_mean: b.buffer("running_mean", vec![c], 0.0),
            running_var: b.buffer("running_var", vec![c], 1.0),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (y, stats) = x.batch_norm2d(
            &ctx.param(self.gamma),
            &ctx.param(self.beta),
            ctx.buffer(self.running_mean),
            ctx.buffer(self.running_var),
            BN_EPS,
            ctx.training(),
        )?;
        if let Some(stats) = stats {
            ctx.push_bn_update(self.running_mean, self.running_var, stats);
        }
        Ok(y)
    }
}

/// Convolution followed by batch norm and SiLU, or a bare biased
/// convolution when `norm` is `None`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
}

impl ConvBlock {
    pub fn cbs<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(&mut b.scope("conv"), c_in, c_out, k, stride, 1, false),
            norm: Some(BatchNorm::new(&mut b.scope("bn"), c_out)),
        }
    }

    pub fn bare<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(&mut b.scope("conv"), c_in, c_out, k, stride, 1, true),
            norm: None,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(ctx, x)?;
        match &self.norm {
            Some(bn) => Ok(bn.forward(ctx, &y)?.silu()),
            None => Ok(y),
        }
    }
}

/// Depthwise 3×3 followed by a biased pointwise 1×1.
#[derive(Clone, Debug)]
pub struct DpConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
}

impl DpConv {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c_in: usize, c_out: usize) -> Self {
        Self {
            depthwise: Conv::new(&mut b.scope("dw"), c_in, c_in, 3, 1, c_in, false),
            pointwise: Conv::new(&mut b.scope("pw"), c_in, c_out, 1, 1, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.depthwise_conv2d(&ctx.param(self.depthwise.weight), None, 1, self.depthwise.padding)?;
        let b = self.pointwise.bias.map(|id| ctx.param(id));
        Ok(y.pointwise_conv2d(&ctx.param(self.pointwise.weight), b.as_ref())?)
    }
}

/// 3×3 modulated deformable convolution with its offset and mask
/// predictors. The predictors start at zero so the layer begins as a plain
/// convolution with every tap scaled by one half.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub offset_weight: ParamId,
    pub offset_bias: ParamId,
    pub mask_weight: ParamId,
    pub mask_bias: ParamId,
    pub stride: usize,
}

impl DeformConv {
    pub const KERNEL: usize = 3;

    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c_in: usize, c_out: usize, stride: usize) -> Self {
        let k = Self::KERNEL;
        let taps = k * k;
        let fan_in = c_in * taps;
        Self {
            weight: b.uniform_fan_in("weight", vec![c_out, c_in, k, k], fan_in, true),
            bias: b.uniform_fan_in("bias", vec![c_out], fan_in, false),
            offset_weight: b.constant("offset.weight", vec![2 * taps, c_in, k, k], 0.0, true),
            offset_bias: b.constant("offset.bias", vec![2 * taps], 0.0, false),
            mask_weight: b.constant("mask.weight", vec![taps, c_in, k, k], 0.0, true),
            mask_bias: b.constant("mask.bias", vec![taps], 0.0, false),
            stride,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let (ow, ob) = (ctx.param(self.offset_weight), ctx.param(self.offset_bias));
        let (mw, mb) = (ctx.param(self.mask_weight), ctx.param(self.mask_bias));
        let p = DeformConvWeights {
            weight: &w,
            bias: Some(&b),
            offset_weight: &ow,
            offset_bias: &ob,
            mask_weight: &mw,
            mask_bias: &mb,
        };
        Ok(deform_conv2d(x, p, self.stride, Self::KERNEL / 2)?)
    }
}

#[derive(Clone, Debug)]
pub struct TripletAttention {
    pub gates: [(ParamId, ParamId); 3],
    pub no_spatial: bool,
}

impl TripletAttention {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, no_spatial: bool) -> Self {
        let k = GATE_KERNEL;
        let mut gate = |name: &str| {
            let mut s = b.scope(name);
            (
                s.uniform_fan_in("weight", vec![1, 2, k, k], 2 * k * k, true),
                s.uniform_fan_in("bias", vec![1], 2 * k * k, false),
            )
        };
        Self {
            gates: [gate("h"), gate("w"), gate("hw")],
            no_spatial,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let vars: Vec<(Var<T>, Var<T>)> = self
            .gates
            .iter()
            .map(|&(w, b)| (ctx.param(w), ctx.param(b)))
            .collect();
        let g = |i: usize| GateWeights {
            weight: &vars[i].0,
            bias: &vars[i].1,
        };
        let p = TripletWeights {
            branches: [g(0), g(1), g(2)],
            no_spatial: self.no_spatial,
        };
        Ok(triplet_attention(x, p)?)
    }
}
