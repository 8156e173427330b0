//! Self-checks behind the `verify` command.
//!
//! Every check compares a fast path with an independent route: the direct
//! loops of [`dsaf_tensor::reference`], central finite differences, or hand
//! values. Results are collected rather than asserted so a caller can print
//! a coverage table and decide on an exit code.

use std::fmt;
use std::str::FromStr;

use dsaf_tensor::attention::{triplet_attention, zpool, GateWeights, TripletWeights};
use dsaf_tensor::deform::{deform_conv2d, DeformConvWeights};
use dsaf_tensor::gradcheck::{check_gradients, GradCheckOptions};
use dsaf_tensor::nn::conv::conv2d_forward;
use dsaf_tensor::nn::pool::{pool2d, unfold2d};
use dsaf_tensor::{reference, PoolKind, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assign::GtBox;
use crate::blocks::{pooled_sum, Dsaf, Fa, Sd};
use crate::boxes::{iou, BBox, Detection};
use crate::decode::{expectation, nms};
use crate::error::{DetError, Result};
use crate::layers::{ConvBlock, DeformConv, TripletAttention, BN_EPS};
use crate::loss::ciou;
use crate::metrics::{average_precision, evaluate_detections, ImageResult};
use crate::params::{Ctx, ParamBuilder, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ops,
    Blocks,
    Detector,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ops, Suite::Blocks, Suite::Detector, Suite::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Blocks => "blocks",
            Suite::Detector => "detector",
            Suite::Metrics => "metrics",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = DetError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DetError::Config(format!("unknown verify scope {s:?}; expected all, ops, blocks, detector or metrics")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    /// Number of random shapes or fixtures compared.
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn record(suite: Suite, name: &str, errs: &[f64], tol: f64) -> Check {
    let max_err = errs.iter().copied().fold(0.0, |m: f64, e| if e.is_nan() { f64::NAN } else { m.max(e) });
    Check {
        suite,
        name: name.into(),
        cases: errs.len(),
        max_err,
        tol,
        passed: max_err <= tol,
    }
}

fn failed(suite: Suite, name: &str, tol: f64, e: impl fmt::Display) -> Check {
    log::error!("{name}: {e}");
    Check {
        suite,
        name: name.into(),
        cases: 0,
        max_err: f64::INFINITY,
        tol,
        passed: false,
    }
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.rel_err(b)
}

pub fn run(suites: &[Suite]) -> Vec<Check> {
    let mut out = Vec::new();
    for &s in suites {
        out.extend(match s {
            Suite::Ops => ops(),
            Suite::Blocks => blocks(),
            Suite::Detector => detector(),
            Suite::Metrics => metrics(),
        });
    }
    out
}

pub fn coverage_table(checks: &[Check]) -> String {
    let w = checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<9} {:<w$} {:>5} {:>11} {:>9}  status\n", "suite", "check", "cases", "max err", "tol");
    for c in checks {
        s.push_str(&format!(
            "{:<9} {:<w$} {:>5} {:>11.3e} {:>9.1e}  {}\n",
            c.suite.name(),
            c.name,
            c.cases,
            c.max_err,
            c.tol,
            if c.passed { "ok" } else { "FAIL" }
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    s
}

// ---------------------------------------------------------------- ops

pub const ORACLE_SHAPES: usize = 50;
pub const ORACLE_TOL: f64 = 1e-5;
pub const OP_GRAD_TOL: f64 = 1e-4;
pub const DEFORM_GRAD_TOL: f64 = 1e-3;
/// Blocks containing a deformable conv.
pub const BLOCK_GRAD_TOL: f64 = 1e-3;

/// Fast operators against direct loops on random shapes.
pub fn operator_oracles(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut conv, mut dw, mut pw, mut maxp, mut avgp, mut unf) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let tape = Tape::<f64>::no_grad();
    for _ in 0..ORACLE_SHAPES {
        let n = rng.gen_range(1..=2);
        let groups = rng.gen_range(1..=3);
        let cg = rng.gen_range(1..=3);
        let cog = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2 + 1);
        let h = rng.gen_range(k.max(3)..=9);
        let w = rng.gen_range(k.max(3)..=9);
        let x = rand(&[n, groups * cg, h, w], &mut rng);
        let wt = rand(&[groups * cog, cg, k, k], &mut rng);
        let b = rand(&[groups * cog], &mut rng);
        conv.push(match conv2d_forward(&x, &wt, Some(&b), stride, pad, groups) {
            Ok(y) => rel(&y, &reference::conv2d(&x, &wt, Some(&b), stride, pad, groups)),
            Err(_) => f64::INFINITY,
        });

        let c = groups * cg;
        let dk = rand(&[c, 1, 3, 3], &mut rng);
        let y = tape.constant(x.clone()).depthwise_conv2d(&tape.constant(dk.clone()), None, stride, 1);
        dw.push(y.map_or(f64::INFINITY, |y| rel(y.value(), &reference::conv2d(&x, &dk, None, stride, 1, c))));

        let pk = rand(&[cog + 1, c, 1, 1], &mut rng);
        let pb = rand(&[cog + 1], &mut rng);
        let y = tape
            .constant(x.clone())
            .pointwise_conv2d(&tape.constant(pk.clone()), Some(&tape.constant(pb.clone())));
        pw.push(y.map_or(f64::INFINITY, |y| rel(y.value(), &reference::conv2d(&x, &pk, Some(&pb), 1, 0, 1))));

        let pk = rng.gen_range(1..=3usize).min(h.min(w));
        let ps = rng.gen_range(1..=3);
        for (kind, max, errs) in [(PoolKind::Max, true, &mut maxp), (PoolKind::Avg, false, &mut avgp)] {
            errs.push(match pool2d(kind, &x, pk, ps) {
                Ok((y, _)) => rel(&y, &reference::pool2d(&x, pk, ps, max)),
                Err(_) => f64::INFINITY,
            });
        }
        unf.push(match unfold2d(&x, pk, ps) {
            Ok(y) => rel(&y, &unfold_loops(&x, pk, ps)),
            Err(_) => f64::INFINITY,
        });
    }
    vec![
        record(Suite::Ops, "conv2d", &conv, ORACLE_TOL),
        record(Suite::Ops, "depthwise_conv2d", &dw, ORACLE_TOL),
        record(Suite::Ops, "pointwise_conv2d", &pw, ORACLE_TOL),
        record(Suite::Ops, "pool2d_max", &maxp, ORACLE_TOL),
        record(Suite::Ops, "pool2d_avg", &avgp, ORACLE_TOL),
        record(Suite::Ops, "unfold2d", &unf, ORACLE_TOL),
    ]
}

/// Window extraction written as a gather over output positions.
fn unfold_loops(x: &Tensor<f64>, k: usize, s: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let l = ho * wo;
    let mut out = Tensor::zeros(vec![n, c * k * k, l]);
    for b in 0..n {
        for pos in 0..l {
            let (oy, ox) = (pos / wo, pos % wo);
            for ch in 0..c {
                for t in 0..k * k {
                    let v = x.get(&[b, ch, oy * s + t / k, ox * s + t % k]);
                    out.data_mut()[(b * c * k * k + ch * k * k + t) * l + pos] = v;
                }
            }
        }
    }
    out
}

fn grad_opts() -> GradCheckOptions {
    GradCheckOptions {
        max_coords: 48,
        ..GradCheckOptions::default()
    }
}

fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], tol: f64, f: F) -> Check
where
    F: Fn(&[Var<f64>]) -> dsaf_tensor::Result<Var<f64>>,
{
    match check_gradients(inputs, f, grad_opts()) {
        Ok(r) => {
            let errs: Vec<f64> = r.inputs.iter().map(|i| i.rel_err).collect();
            record(Suite::Ops, name, &errs, tol)
        }
        Err(e) => failed(Suite::Ops, name, tol, e),
    }
}

/// Values with fractional parts in [0.2, 0.8], keeping sampling positions
/// away from bilinear kinks.
fn off_grid(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.2..0.8);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Reverse-mode gradients of every differentiable op against central
/// differences on `1×C×8×8` inputs.
pub fn operator_gradients(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| rand(s, rng);
    let x = r(&[1, 3, 8, 8], &mut rng);
    let y = r(&[1, 3, 8, 8], &mut rng);
    let row = r(&[1, 3, 1, 8], &mut rng);
    // distinct values keep max-pool winners stable under perturbation
    let distinct = {
        let mut idx: Vec<usize> = (0..192).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        Tensor::new(vec![1, 3, 8, 8], idx.iter().map(|&i| i as f64 * 0.05 - 4.8).collect()).expect("192 values")
    };
    let op = OP_GRAD_TOL;
    let mut out = vec![
        gradcheck("add", &[x.clone(), row.clone()], op, |v| v[0].add(&v[1])),
        gradcheck("sub", &[x.clone(), y.clone()], op, |v| v[0].sub(&v[1])),
        gradcheck("mul", &[x.clone(), row.clone()], op, |v| v[0].mul(&v[1])),
        gradcheck("scale", std::slice::from_ref(&x), op, |v| Ok(v[0].scale(-1.7))),
        gradcheck("sigmoid", &[x.map(|v| 3.0 * v)], op, |v| Ok(v[0].sigmoid())),
        gradcheck("silu", &[x.map(|v| 3.0 * v)], op, |v| Ok(v[0].silu())),
        gradcheck("matmul", &[r(&[4, 6], &mut rng), r(&[6, 3], &mut rng)], op, |v| v[0].matmul(&v[1])),
        gradcheck("max_axis", std::slice::from_ref(&distinct), op, |v| v[0].max_axis(1, false)),
        gradcheck("mean_axis", std::slice::from_ref(&x), op, |v| v[0].mean_axis(2, true)),
        gradcheck("sum_axis", std::slice::from_ref(&x), op, |v| v[0].sum_axis(3, false)),
        gradcheck("sum_all", std::slice::from_ref(&x), op, |v| v[0].sum_all()),
        gradcheck("reshape", std::slice::from_ref(&x), op, |v| v[0].reshape(vec![3, 64])),
        gradcheck("permute", std::slice::from_ref(&x), op, |v| v[0].permute(&[0, 2, 3, 1])),
        gradcheck("concat", &[x.clone(), r(&[1, 2, 8, 8], &mut rng)], op, |v| {
            Var::concat(&[&v[0], &v[1]], 1)
        }),
        gradcheck("narrow", std::slice::from_ref(&x), op, |v| v[0].narrow(1, 1, 2)),
        gradcheck("split", &[r(&[1, 4, 8, 8], &mut rng)], op, |v| {
            let p = v[0].split(2, 1)?;
            p[0].mul(&p[1])
        }),
        gradcheck("conv2d", &[x.clone(), r(&[4, 3, 3, 3], &mut rng), r(&[4], &mut rng)], op, |v| {
            v[0].conv2d(&v[1], Some(&v[2]), 1, 1, 1)
        }),
        gradcheck("conv2d_strided_grouped", &[r(&[1, 4, 8, 8], &mut rng), r(&[4, 2, 3, 3], &mut rng)], op, |v| {
            v[0].conv2d(&v[1], None, 2, 1, 2)
        }),
        gradcheck("depthwise_conv2d", &[x.clone(), r(&[3, 1, 3, 3], &mut rng)], op, |v| {
            v[0].depthwise_conv2d(&v[1], None, 1, 1)
        }),
        gradcheck("pointwise_conv2d", &[x.clone(), r(&[5, 3, 1, 1], &mut rng), r(&[5], &mut rng)], op, |v| {
            v[0].pointwise_conv2d(&v[1], Some(&v[2]))
        }),
        gradcheck("pool2d_max", std::slice::from_ref(&distinct), op, |v| v[0].pool2d(PoolKind::Max, 2, 2)),
        gradcheck("pool2d_avg", std::slice::from_ref(&x), op, |v| v[0].pool2d(PoolKind::Avg, 3, 1)),
        gradcheck("pool2d_padded_max", std::slice::from_ref(&distinct), op, |v| {
            v[0].pool2d_padded(PoolKind::Max, 5, 1, 2)
        }),
        gradcheck("unfold2d", std::slice::from_ref(&x), op, |v| v[0].unfold2d(2, 2)),
        gradcheck("upsample_nearest2x", std::slice::from_ref(&x), op, |v| v[0].upsample_nearest2x()),
        gradcheck("zpool", std::slice::from_ref(&distinct), op, |v| zpool(&v[0])),
    ];
    let (g, b) = (r(&[3], &mut rng), r(&[3], &mut rng));
    for training in [true, false] {
        let name = if training { "batch_norm2d_train" } else { "batch_norm2d_eval" };
        out.push(gradcheck(name, &[x.clone(), g.clone(), b.clone()], op, |v| {
            let rm = Tensor::from_f64(vec![3], &[0.1, -0.2, 0.05])?;
            let rv = Tensor::from_f64(vec![3], &[0.9, 1.3, 0.7])?;
            Ok(v[0].batch_norm2d(&v[1], &v[2], &rm, &rv, BN_EPS, training)?.0)
        }));
    }
    let gates: Vec<Tensor<f64>> = (0..6)
        .map(|i| if i % 2 == 0 { r(&[1, 2, 7, 7], &mut rng).map(|v| 0.3 * v) } else { r(&[1], &mut rng) })
        .collect();
    let mut inputs = vec![distinct.clone()];
    inputs.extend(gates);
    out.push(gradcheck("triplet_attention", &inputs, op, |v| {
        let g = |i: usize| GateWeights {
            weight: &v[1 + 2 * i],
            bias: &v[2 + 2 * i],
        };
        triplet_attention(
            &v[0],
            TripletWeights {
                branches: [g(0), g(1), g(2)],
                no_spatial: false,
            },
        )
    }));

    let dt = DEFORM_GRAD_TOL;
    let img = r(&[3, 8, 8], &mut rng);
    let pos = Tensor::from_f64(vec![2], &[3.3, 4.6]).expect("two values");
    out.push(gradcheck("bilinear_sample", &[img, pos], dt, |v| v[0].bilinear_sample(&v[1])));
    let off = off_grid(&[1, 18, 8, 8], &mut rng);
    let mask = Tensor::uniform(vec![1, 9, 8, 8], 0.1, 0.9, &mut rng);
    out.push(gradcheck(
        "modulated_deform_conv2d",
        &[x.clone(), off, mask, r(&[2, 3, 3, 3], &mut rng), r(&[2], &mut rng)],
        dt,
        |v| v[0].modulated_deform_conv2d(&v[1], &v[2], &v[3], Some(&v[4]), 1, 1),
    ));
    let inputs = [
        x.clone(),
        r(&[18, 3, 3, 3], &mut rng).map(|v| 0.2 * v),
        off_grid(&[18], &mut rng),
        r(&[9, 3, 3, 3], &mut rng),
        r(&[9], &mut rng),
        r(&[2, 3, 3, 3], &mut rng),
    ];
    out.push(gradcheck("deform_conv2d", &inputs, dt, |v| {
        let p = DeformConvWeights {
            weight: &v[5],
            bias: None,
            offset_weight: &v[1],
            offset_bias: &v[2],
            mask_weight: &v[3],
            mask_bias: &v[4],
        };
        deform_conv2d(&v[0], p, 1, 1)
    }));
    out
}

/// Deformable conv with zero offsets and unit masks against plain conv.
pub fn deform_anchor(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::<f64>::no_grad();
    let mut errs = Vec::new();
    for _ in 0..20 {
        let (n, c, co) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
        let stride = rng.gen_range(1..=2);
        let x = rand(&[n, c, h, w], &mut rng);
        let wt = rand(&[co, c, 3, 3], &mut rng);
        let b = rand(&[co], &mut rng);
        let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
        let off = tape.constant(Tensor::zeros(vec![n, 18, ho, wo]));
        let mask = tape.constant(Tensor::ones(vec![n, 9, ho, wo]));
        let y = tape.constant(x.clone()).modulated_deform_conv2d(
            &off,
            &mask,
            &tape.constant(wt.clone()),
            Some(&tape.constant(b.clone())),
            stride,
            1,
        );
        errs.push(match (y, conv2d_forward(&x, &wt, Some(&b), stride, 1, 1)) {
            (Ok(y), Ok(c)) => rel(y.value(), &c),
            _ => f64::INFINITY,
        });
    }
    record(Suite::Ops, "deform_anchor", &errs, ORACLE_TOL)
}

pub fn ops() -> Vec<Check> {
    let mut out = operator_oracles(11);
    out.extend(operator_gradients(12));
    out.push(deform_anchor(13));
    out
}

// ---------------------------------------------------------------- blocks

/// Random values for every tensor of `store`, with positive running
/// variances.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 1.5)
        } else if name.ends_with("running_mean") {
            (-0.2, 0.2)
        } else {
            (-0.5, 0.5)
        };
        let t = store.get_mut(id);
        *t = Tensor::uniform(t.shape().to_vec(), lo, hi, &mut rng);
    }
}

fn to_tensor_err(e: DetError) -> TensorError {
    match e {
        DetError::Tensor(t) => t,
        other => TensorError::Config {
            op: "block",
            msg: other.to_string(),
        },
    }
}

/// Gradient check of a block wrt its input and every learnable parameter,
/// in training mode.
pub fn block_gradcheck<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Result<Vec<f64>>
where
    F: Fn(&Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let ids: Vec<ParamId> = store.learnable_ids().collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let r = check_gradients(
        &inputs,
        |v| {
            let ctx = Ctx::new(v[0].tape().clone(), store, true);
            for (&id, var) in ids.iter().zip(&v[1..]) {
                ctx.bind(id, var.clone());
            }
            f(&ctx, &v[0]).map_err(to_tensor_err)
        },
        GradCheckOptions {
            max_coords: 24,
            // a shared offset shifts every sampling position; a small step
            // keeps them from crossing bilinear kinks
            step: 1e-6,
            ..GradCheckOptions::default()
        },
    )?;
    Ok(r.inputs.iter().map(|i| i.rel_err).collect())
}

fn build<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64, ChaCha8Rng>) -> B) -> (B, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = f(&mut ParamBuilder::new(&mut store, &mut rng));
    randomize(&mut store, seed + 1000);
    (block, store)
}

fn block_check(name: &str, r: Result<Vec<f64>>, tol: f64) -> Check {
    match r {
        Ok(errs) => record(Suite::Blocks, name, &errs, tol),
        Err(e) => failed(Suite::Blocks, name, tol, e),
    }
}

pub fn block_gradients(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand(&[1, 8, 8, 8], &mut rng);
    let (cbs, s) = build(seed + 1, |b| ConvBlock::cbs(b, 8, 8, 3, 1));
    let c1 = block_check("cbs_grad", block_gradcheck(&s, &x, |c, v| cbs.forward(c, v)), OP_GRAD_TOL);
    let (fa, s) = build(seed + 2, |b| Fa::new(b, 8, true));
    let c2 = block_check("fa_grad", block_gradcheck(&s, &x, |c, v| fa.forward(c, v)), BLOCK_GRAD_TOL);
    let (sd, s) = build(seed + 3, |b| Sd::new(b, 8, 16));
    let c3 = block_check("sd_grad", block_gradcheck(&s, &x, |c, v| sd.forward(c, v)), OP_GRAD_TOL);
    let dsaf = build(seed + 4, |b| Dsaf::new(b, 8, 8, 2, 1, 0.5, true));
    let c4 = match dsaf {
        (Ok(d), s) => block_check("dsaf_grad", block_gradcheck(&s, &x, |c, v| d.forward(c, v)), BLOCK_GRAD_TOL),
        (Err(e), _) => failed(Suite::Blocks, "dsaf_grad", BLOCK_GRAD_TOL, e),
    };
    vec![c1, c2, c3, c4]
}

fn sigmoid_t(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn silu_t(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v / (1.0 + (-v).exp()))
}

/// Eval-mode batch norm written per element.
fn bn_eval(x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>, m: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (c, plane) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
    let mut out = x.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *o = g.data()[ch] * (*o - m.data()[ch]) / (v.data()[ch] + BN_EPS).sqrt() + b.data()[ch];
    }
    out
}

/// Reference forwards in evaluation mode, built only from direct loops.
pub mod reference_blocks {
    use super::*;

    pub fn cbs(s: &ParamStore<f64>, blk: &ConvBlock, x: &Tensor<f64>) -> Tensor<f64> {
        let c = &blk.conv;
        let y = reference::conv2d(x, s.get(c.weight), c.bias.map(|b| s.get(b)), c.stride, c.padding, c.groups);
        match &blk.norm {
            Some(n) => silu_t(&bn_eval(
                &y,
                s.get(n.gamma),
                s.get(n.beta),
                s.get(n.running_mean),
                s.get(n.running_var),
            )),
            None => y,
        }
    }

    pub fn deform(s: &ParamStore<f64>, d: &DeformConv, x: &Tensor<f64>) -> Tensor<f64> {
        let off = reference::conv2d(x, s.get(d.offset_weight), Some(s.get(d.offset_bias)), d.stride, 1, 1);
        let mask = sigmoid_t(&reference::conv2d(x, s.get(d.mask_weight), Some(s.get(d.mask_bias)), d.stride, 1, 1));
        reference::deform_conv2d(x, &off, &mask, s.get(d.weight), Some(s.get(d.bias)), d.stride, 1)
    }

    pub fn triplet(s: &ParamStore<f64>, t: &TripletAttention, x: &Tensor<f64>) -> Tensor<f64> {
        let g = |i: usize| (s.get(t.gates[i].0), s.get(t.gates[i].1).data()[0]);
        reference::triplet_attention(x, [g(0), g(1), g(2)], t.no_spatial)
    }

    pub fn fa(s: &ParamStore<f64>, fa: &Fa, x: &Tensor<f64>) -> Tensor<f64> {
        let h = cbs(s, &fa.pre, x);
        let h = deform(s, &fa.deform, &h);
        let h = triplet(s, &fa.attention, &h);
        let p = &fa.post;
        let h = reference::conv2d(&h, s.get(p.weight), p.bias.map(|b| s.get(b)), 1, 0, 1);
        let mut y = x.clone();
        for (a, b) in y.data_mut().iter_mut().zip(h.data()) {
            *a += b;
        }
        y
    }

    /// Channels `[start, start + len)` of a 4-D tensor.
    pub fn channels(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
        let (n, c, plane) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + len * plane]);
        }
        Tensor::new(vec![n, len, x.shape()[2], x.shape()[3]], data).expect("length matches")
    }

    pub fn concat_channels(parts: &[Tensor<f64>]) -> Tensor<f64> {
        let (n, h, w) = (parts[0].shape()[0], parts[0].shape()[2], parts[0].shape()[3]);
        let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                let len = p.shape()[1] * h * w;
                data.extend_from_slice(&p.data()[b * len..(b + 1) * len]);
            }
        }
        Tensor::new(vec![n, c, h, w], data).expect("length matches")
    }

    /// Entry conv, channel split, per-split FA cascade keeping every output,
    /// concatenation and exit conv.
    pub fn dsaf(s: &ParamStore<f64>, d: &Dsaf, x: &Tensor<f64>) -> Tensor<f64> {
        let h = cbs(s, &d.entry, x);
        let part = h.shape()[1] / d.splits;
        let parts: Vec<Tensor<f64>> = (0..d.splits).map(|i| channels(&h, i * part, part)).collect();
        let mut all = parts.clone();
        for (i, p) in parts.iter().enumerate() {
            let mut cur = p.clone();
            for f in &d.chains[i] {
                cur = fa(s, f, &cur);
                all.push(cur.clone());
            }
        }
        cbs(s, &d.exit, &concat_channels(&all))
    }
}

fn eval_forward<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Result<Tensor<f64>>
where
    F: Fn(&Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let ctx = Ctx::eval(store);
    let v = ctx.tape().constant(x.clone());
    Ok(f(&ctx, &v)?.value().clone())
}

fn composed(name: &str, fast: Result<Tensor<f64>>, slow: Tensor<f64>) -> Check {
    match fast {
        Ok(y) => record(Suite::Blocks, name, &[rel(&y, &slow)], 1e-10),
        Err(e) => failed(Suite::Blocks, name, 1e-10, e),
    }
}

/// Blocks against compositions of direct-loop operators.
pub fn block_compositions(seed: u64) -> Vec<Check> {
    use reference_blocks as rb;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand(&[2, 4, 8, 8], &mut rng);
    let (cbs, s) = build(seed + 1, |b| ConvBlock::cbs(b, 4, 6, 3, 2));
    let c1 = composed("cbs_composition", eval_forward(&s, &x, |c, v| cbs.forward(c, v)), rb::cbs(&s, &cbs, &x));
    let (fa, s) = build(seed + 2, |b| Fa::new(b, 4, true));
    let c2 = composed("fa_composition", eval_forward(&s, &x, |c, v| fa.forward(c, v)), rb::fa(&s, &fa, &x));
    let (dsaf, s) = build(seed + 3, |b| Dsaf::new(b, 4, 6, 2, 2, 1.0, true));
    let c3 = match dsaf {
        Ok(d) => composed("dsaf_unrolled", eval_forward(&s, &x, |c, v| d.forward(c, v)), rb::dsaf(&s, &d, &x)),
        Err(e) => failed(Suite::Blocks, "dsaf_unrolled", 1e-10, e),
    };
    vec![c1, c2, c3, separable_fidelity(seed + 4), sd_pooling(seed + 5)]
}

/// Depthwise then pointwise equals one full convolution whose kernel is the
/// product of the two.
pub fn separable_fidelity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::<f64>::no_grad();
    let mut errs = Vec::new();
    for _ in 0..10 {
        let (c, co) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let x = rand(&[1, c, rng.gen_range(3..=8), rng.gen_range(3..=8)], &mut rng);
        let dk = rand(&[c, 1, 3, 3], &mut rng);
        let pk = rand(&[co, c, 1, 1], &mut rng);
        let pb = rand(&[co], &mut rng);
        let mut full = Tensor::zeros(vec![co, c, 3, 3]);
        for o in 0..co {
            for i in 0..c {
                for t in 0..9 {
                    full.data_mut()[(o * c + i) * 9 + t] = pk.data()[o * c + i] * dk.data()[i * 9 + t];
                }
            }
        }
        let y = tape
            .constant(x.clone())
            .depthwise_conv2d(&tape.constant(dk), None, 1, 1)
            .and_then(|h| h.pointwise_conv2d(&tape.constant(pk), Some(&tape.constant(pb.clone()))));
        errs.push(y.map_or(f64::INFINITY, |y| rel(y.value(), &reference::conv2d(&x, &full, Some(&pb), 1, 1, 1))));
    }
    record(Suite::Blocks, "dpconv_separable", &errs, 1e-12)
}

/// The pooled-sum stage of SD against separate max and average pools.
pub fn sd_pooling(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::<f64>::no_grad();
    let mut errs = Vec::new();
    for _ in 0..10 {
        let x = rand(
            &[rng.gen_range(1..=2), rng.gen_range(1..=4), 2 * rng.gen_range(1..=5), 2 * rng.gen_range(1..=5)],
            &mut rng,
        );
        let mut expect = reference::pool2d(&x, 2, 2, true);
        for (a, b) in expect.data_mut().iter_mut().zip(reference::pool2d(&x, 2, 2, false).data()) {
            *a += b;
        }
        errs.push(pooled_sum(&tape.constant(x)).map_or(f64::INFINITY, |y| {
            if y.shape() == expect.shape() {
                y.value().max_abs_diff(&expect)
            } else {
                f64::INFINITY
            }
        }));
    }
    let window = Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).expect("four values");
    errs.push(pooled_sum(&tape.constant(window)).map_or(f64::INFINITY, |y| (y.value().data()[0] - 6.5).abs()));
    record(Suite::Blocks, "sd_pooled_sum", &errs, 0.0)
}

pub fn blocks() -> Vec<Check> {
    let mut out = block_gradients(21);
    out.extend(block_compositions(22));
    out
}

// ---------------------------------------------------------------- detector

fn random_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
            let (w, h) = (rng.gen_range(4.0..25.0), rng.gen_range(4.0..25.0));
            Detection {
                class_id: rng.gen_range(0..classes),
                score: rng.gen_range(0.0..1.0),
                bbox: BBox::new(x, y, x + w, y + h),
            }
        })
        .collect()
}

/// Suppression by exhaustive pairwise comparison over the score ranking.
pub fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut alive = vec![true; order.len()];
    for i in 0..order.len() {
        if !alive[i] {
            continue;
        }
        for j in i + 1..order.len() {
            let (a, b) = (&dets[order[i]], &dets[order[j]]);
            if a.class_id == b.class_id && iou(&a.bbox, &b.bbox) > thresh {
                alive[j] = false;
            }
        }
    }
    order.iter().zip(&alive).filter(|(_, &k)| k).map(|(&i, _)| dets[i]).collect()
}

pub fn detector() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mismatches: Vec<f64> = (0..20)
        .map(|_| {
            let d = random_dets(&mut rng, 20, 3);
            let t = rng.gen_range(0.2..0.8);
            f64::from(u8::from(nms(&d, t) != nms_reference(&d, t)))
        })
        .collect();
    let nms_check = record(Suite::Detector, "nms_bruteforce", &mismatches, 0.0);

    let exp: Vec<f64> = (0..20)
        .map(|_| {
            let z: Vec<f64> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let brute: f64 = z.iter().enumerate().map(|(i, v)| i as f64 * (v - m).exp() / s).sum();
            (expectation(&z) - brute).abs()
        })
        .collect();
    let exp_check = record(Suite::Detector, "dfl_expectation", &exp, 1e-12);

    // CIoU of (0,0,2,2) and (1,1,3,3): IoU 1/7, centre distance² 2, enclosing
    // diagonal² 18, equal aspect ratios
    let c = ciou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
    // loose tolerance covers the stabilising epsilons
    let ciou_check = record(Suite::Detector, "ciou_fixture", &[(c - (1.0 / 7.0 - 2.0 / 18.0)).abs()], 1e-7);
    vec![nms_check, exp_check, ciou_check]
}

// ---------------------------------------------------------------- metrics

fn gt(c: usize, b: [f64; 4]) -> GtBox {
    GtBox {
        class_id: c,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
    }
}

fn det(c: usize, s: f64, b: [f64; 4]) -> Detection {
    Detection {
        class_id: c,
        score: s,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
    }
}

pub fn metrics() -> Vec<Check> {
    let m = Suite::Metrics;
    let one_seventh = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
    let iou_check = record(m, "iou_one_seventh", &[(one_seventh - 1.0 / 7.0).abs()], 0.0);
    let ap = average_precision(&[(0.9, false), (0.8, true)], 1);
    let ap_check = record(m, "ap_fp_then_tp", &[(ap - 0.5).abs()], 0.0);

    let names = vec!["a".to_string()];
    let g = [gt(0, [0.0, 0.0, 10.0, 10.0])];
    // IoU exactly 0.6: a hit at 0.50, 0.55 and 0.60 only
    let d = [det(0, 0.9, [0.0, 0.0, 10.0, 6.0])];
    let r = evaluate_detections(&[ImageResult { dets: &d, gts: &g }], &names);
    let sweep = record(m, "threshold_sweep", &[(r.map50 - 1.0).abs(), (r.map50_95 - 0.3).abs()], 0.0);

    let perfect = [det(0, 0.9, [0.0, 0.0, 10.0, 10.0])];
    let r = evaluate_detections(&[ImageResult { dets: &perfect, gts: &g }], &names);
    let perfect_check = record(m, "perfect_detections", &[(r.map50 - 1.0).abs(), (r.map50_95 - 1.0).abs()], 0.0);
    let r = evaluate_detections(&[ImageResult { dets: &[], gts: &g }], &names);
    let empty = record(m, "empty_detections", &[r.map50, r.map50_95, r.precision, r.recall], 0.0);
    vec![iou_check, ap_check, sweep, perfect_check, empty]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn metrics_suite_passes() {
        assert!(metrics().iter().all(|c| c.passed), "{}", coverage_table(&metrics()));
    }

    #[test]
    fn record_treats_nan_as_failure() {
        assert!(!record(Suite::Ops, "x", &[0.0, f64::NAN], 1.0).passed);
    }
}
