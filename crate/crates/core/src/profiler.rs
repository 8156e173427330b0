//! Parameter, FLOP and checkpoint-size accounting.
//!
//! FLOPs are counted from the op log of one inference pass, with one
//! multiply-add counted as two FLOPs. Every op kind has an explicit rule;
//! kinds without one are rejected rather than silently counted as free.

use std::collections::BTreeMap;

use dsaf_tensor::{OpEvent, OpKind, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{DetError, Result};
use crate::model::Detector;
use crate::params::{Ctx, ParamStore};

/// Headline targets of the calibrated model.
pub const TARGET_PARAMS: f64 = 1.8e6;
pub const TARGET_GFLOPS: f64 = 4.6;
pub const BASELINE_PARAMS: f64 = 3.0e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    /// Learnable elements.
    pub param_count: usize,
    /// Batch-norm running statistics; with `param_count` this totals the
    /// checkpoint's elements.
    pub buffer_count: usize,
    pub flops: u64,
    pub model_size_bytes: usize,
    pub input_shape: Vec<usize>,
    /// FLOPs per op kind.
    pub breakdown: BTreeMap<String, u64>,
}

impl ProfileReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.param_count as f64 / 1e6
    }
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

/// FLOPs of one logged op.
pub fn op_flops(e: &OpEvent) -> Result<u64> {
    let out = numel(&e.output);
    let input = |i: usize| -> Result<&[usize]> {
        e.inputs
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| DetError::Shape(format!("{:?} logged without input {i}", e.kind)))
    };
    Ok(match &e.kind {
        OpKind::Conv2d { kernel, groups, .. } => {
            let c_in = input(0)?[1] as u64;
            2 * (kernel.0 * kernel.1) as u64 * (c_in / *groups as u64) * out
        }
        OpKind::DeformConv2d { kernel, .. } => {
            // bilinear read (8) and modulation (1) per input channel and tap
            let c_in = input(0)?[1] as u64;
            let taps = (kernel.0 * kernel.1) as u64;
            let positions = out / (e.output[1] as u64).max(1);
            2 * taps * c_in * out + 9 * c_in * taps * positions
        }
        OpKind::BatchNorm2d { .. } => 2 * out,
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Scale | OpKind::Sigmoid | OpKind::Silu => out,
        OpKind::Pool2d { .. } => out,
        OpKind::Reduce(_) => numel(input(0)?),
        OpKind::MatMul => {
            let a = input(0)?;
            2 * (a[0] * a[1]) as u64 * e.output[1] as u64
        }
        OpKind::BilinearSample => 8 * out,
        OpKind::Permute
        | OpKind::Reshape
        | OpKind::Concat
        | OpKind::Narrow
        | OpKind::Unfold2d { .. }
        | OpKind::UpsampleNearest2x => 0,
        OpKind::Custom(name) => {
            return Err(DetError::Config(format!("no FLOP rule for custom op {name}")));
        }
    })
}

fn kind_name(k: &OpKind) -> String {
    let s = format!("{k:?}");
    s.split([' ', '(', '{']).next().unwrap_or(&s).to_string()
}

pub fn count_flops(events: &[OpEvent]) -> Result<(u64, BTreeMap<String, u64>)> {
    let mut total = 0;
    let mut by_kind = BTreeMap::new();
    for e in events {
        let f = op_flops(e)?;
        total += f;
        *by_kind.entry(kind_name(&e.kind)).or_insert(0) += f;
    }
    Ok((total, by_kind))
}

/// Profiles one inference pass on a zero image of `input_shape`
/// (`[N, 3, H, W]`).
pub fn profile(model: &Detector, store: &ParamStore<f32>, input_shape: &[usize]) -> Result<ProfileReport> {
    let ctx = Ctx::new(Tape::no_grad(), store, false);
    let x = ctx.tape().constant(Tensor::zeros(input_shape.to_vec()));
    ctx.tape().start_op_log();
    model.forward(&ctx, &x)?;
    let (flops, breakdown) = count_flops(&ctx.tape().take_op_log())?;
    Ok(ProfileReport {
        param_count: store.learnable_count(),
        buffer_count: store.entries().iter().map(|e| e.value.numel()).sum::<usize>() - store.learnable_count(),
        flops,
        model_size_bytes: checkpoint::store_bytes(store).len(),
        input_shape: input_shape.to_vec(),
        breakdown,
    })
}

/// Relative deviation `(value − target)/target`.
pub fn deviation(value: f64, target: f64) -> f64 {
    (value - target) / target
}
