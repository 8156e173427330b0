//! Composite blocks of the detector.
//!
//! [`Fa`] refines a feature map with a deformable conv and triplet attention
//! behind a residual. [`Dsaf`] splits its input into channel groups, runs a
//! cascade of FA blocks on each group and fuses every intermediate map.
//! [`Sd`] halves resolution with summed max/avg pooling over 2×2 windows and
//! a depthwise-separable conv. [`C2f`] and strided CBS are the baseline
//! stand-ins used by the ablation variants.

use dsaf_tensor::{PoolKind, Real, Var};
use rand::Rng;

use crate::error::{DetError, Result};
use crate::layers::{Conv, ConvBlock, DeformConv, DpConv, TripletAttention};
use crate::params::{Ctx, ParamBuilder};

#[derive(Clone, Debug)]
pub struct Fa {
    pub channels: usize,
    pub pre: ConvBlock,
    pub deform: DeformConv,
    pub attention: TripletAttention,
    pub post: Conv,
}

impl Fa {
    /// `pre_norm` selects a conv-BN-SiLU pre-conv instead of a bare conv.
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, channels: usize, pre_norm: bool) -> Self {
        let pre = if pre_norm {
            ConvBlock::cbs(&mut b.scope("pre"), channels, channels, 3, 1)
        } else {
            ConvBlock::bare(&mut b.scope("pre"), channels, channels, 3, 1)
        };
        Self {
            channels,
            pre,
            deform: DeformConv::new(&mut b.scope("deform"), channels, channels, 1),
            attention: TripletAttention::new(&mut b.scope("attn"), false),
            post: Conv::new(&mut b.scope("post"), channels, channels, 1, 1, 1, false),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().get(1) != Some(&self.channels) {
            return Err(DetError::Config(format!(
                "FA block expects {} channels, got input {:?}",
                self.channels,
                x.shape()
            )));
        }
        let h = self.pre.forward(ctx, x)?;
        let h = self.deform.forward(ctx, &h)?;
        let h = self.attention.forward(ctx, &h)?;
        let h = self.post.forward(ctx, &h)?;
        Ok(x.add(&h)?)
    }
}

/// Width of the DSAF entry projection: a multiple of `splits`, at least
/// `splits`, near `c_out·expansion`.
pub fn dsaf_hidden(c_out: usize, expansion: f64, splits: usize) -> usize {
    let per_split = (c_out as f64 * expansion / splits as f64).round() as usize;
    splits * per_split.max(1)
}

#[derive(Clone, Debug)]
pub struct Dsaf {
    pub splits: usize,
    pub entry: ConvBlock,
    /// `chains[i][j]` is recursion `j` applied to split `i`.
    pub chains: Vec<Vec<Fa>>,
    pub exit: ConvBlock,
}

impl Dsaf {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        splits: usize,
        recursions: usize,
        expansion: f64,
        pre_norm: bool,
    ) -> Result<Self> {
        if splits < 2 || recursions < 1 {
            return Err(DetError::Config(format!(
                "DSAF needs splits >= 2 and recursions >= 1, got {splits} and {recursions}"
            )));
        }
        let hidden = dsaf_hidden(c_out, expansion, splits);
        let part = hidden / splits;
        let entry = ConvBlock::cbs(&mut b.scope("entry"), c_in, hidden, 1, 1);
        let chains = (0..splits)
            .map(|i| {
                (0..recursions)
                    .map(|j| Fa::new(&mut b.scope(format_args!("fa{i}_{j}")), part, pre_norm))
                    .collect()
            })
            .collect();
        let exit = ConvBlock::cbs(&mut b.scope("exit"), hidden + splits * recursions * part, c_out, 1, 1);
        Ok(Self {
            splits,
            entry,
            chains,
            exit,
        })
    }

    pub fn hidden(&self) -> usize {
        self.splits * self.chains[0][0].channels
    }

    /// Runs the FA cascade on one split, returning every recursion output.
    pub fn chain<T: Real>(&self, ctx: &Ctx<'_, T>, split: usize, part: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut outs = Vec::with_capacity(self.chains[split].len());
        let mut cur = part.clone();
        for fa in &self.chains[split] {
            cur = fa.forward(ctx, &cur)?;
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    /// Concatenates the entry splits followed by each split's cascade
    /// outputs, then projects to the output width.
    pub fn fuse<T: Real>(&self, ctx: &Ctx<'_, T>, parts: &[Var<T>], outs: &[Vec<Var<T>>]) -> Result<Var<T>> {
        let mut all: Vec<&Var<T>> = parts.iter().collect();
        all.extend(outs.iter().flatten());
        self.exit.forward(ctx, &Var::concat(&all, 1)?)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.entry.forward(ctx, x)?;
        if h.shape()[1] % self.splits != 0 {
            return Err(DetError::Config(format!(
                "DSAF entry width {} is not divisible by {} splits",
                h.shape()[1],
                self.splits
            )));
        }
        let parts = h.split(self.splits, 1)?;
        let outs = parts
            .iter()
            .enumerate()
            .map(|(i, p)| self.chain(ctx, i, p))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(ctx, &parts, &outs)
    }
}

/// Sum of max and mean over non-overlapping 2×2 windows, computed from the
/// unfolded windows.
pub fn pooled_sum<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(DetError::Shape(format!("SD expects a 4-D input, got {:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DetError::Shape(format!("SD needs even spatial dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let windows = x.unfold2d(2, 2)?.reshape(vec![n, c, 4, ho * wo])?;
    let max = windows.max_axis(2, false)?;
    let mean = windows.mean_axis(2, false)?;
    Ok(max.add(&mean)?.reshape(vec![n, c, ho, wo])?)
}

#[derive(Clone, Debug)]
pub struct Sd {
    pub dp: DpConv,
}

impl Sd {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c_in: usize, c_out: usize) -> Self {
        Self {
            dp: DpConv::new(&mut b.scope("dp"), c_in, c_out),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.dp.forward(ctx, &pooled_sum(x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c: usize, shortcut: bool) -> Self {
        Self {
            cv1: ConvBlock::cbs(&mut b.scope("cv1"), c, c, 3, 1),
            cv2: ConvBlock::cbs(&mut b.scope("cv2"), c, c, 3, 1),
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.cv2.forward(ctx, &self.cv1.forward(ctx, x)?)?;
        if self.shortcut {
            Ok(x.add(&y)?)
        } else {
            Ok(y)
        }
    }
}

/// CSP block with two-way split and dense aggregation of bottleneck outputs.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: ConvBlock,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBlock,
}

impl C2f {
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        n: usize,
        shortcut: bool,
    ) -> Self {
        let c = (c_out / 2).max(1);
        let cv1 = ConvBlock::cbs(&mut b.scope("cv1"), c_in, 2 * c, 1, 1);
        let blocks = (0..n)
            .map(|i| Bottleneck::new(&mut b.scope(format_args!("m{i}")), c, shortcut))
            .collect();
        let cv2 = ConvBlock::cbs(&mut b.scope("cv2"), (2 + n) * c, c_out, 1, 1);
        Self { cv1, blocks, cv2 }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let mut ys = self.cv1.forward(ctx, x)?.split(2, 1)?;
        for m in &self.blocks {
            let next = m.forward(ctx, ys.last().expect("split yields two parts"))?;
            ys.push(next);
        }
        let refs: Vec<&Var<T>> = ys.iter().collect();
        self.cv2.forward(ctx, &Var::concat(&refs, 1)?)
    }
}

/// Spatial pyramid pooling with three chained 5×5 max pools.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

impl Sppf {
    pub const POOL: usize = 5;

    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c: usize) -> Self {
        let hidden = (c / 2).max(1);
        Self {
            cv1: ConvBlock::cbs(&mut b.scope("cv1"), c, hidden, 1, 1),
            cv2: ConvBlock::cbs(&mut b.scope("cv2"), 4 * hidden, c, 1, 1),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let p = Self::POOL;
        let y0 = self.cv1.forward(ctx, x)?;
        let y1 = y0.pool2d_padded(PoolKind::Max, p, 1, p / 2)?;
        let y2 = y1.pool2d_padded(PoolKind::Max, p, 1, p / 2)?;
        let y3 = y2.pool2d_padded(PoolKind::Max, p, 1, p / 2)?;
        self.cv2.forward(ctx, &Var::concat(&[&y0, &y1, &y2, &y3], 1)?)
    }
}

/// Resolution-halving stage: SD or a strided 3×3 CBS.
#[derive(Clone, Debug)]
pub enum Downsample {
    Sd(Sd),
    Strided(ConvBlock),
}

impl Downsample {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c_in: usize, c_out: usize, use_sd: bool) -> Self {
        if use_sd {
            Self::Sd(Sd::new(b, c_in, c_out))
        } else {
            Self::Strided(ConvBlock::cbs(b, c_in, c_out, 3, 2))
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Self::Sd(sd) => sd.forward(ctx, x),
            Self::Strided(cbs) => cbs.forward(ctx, x),
        }
    }
}

/// Same-resolution fusion stage: DSAF or C2f.
#[derive(Clone, Debug)]
pub enum Fusion {
    Dsaf(Dsaf),
    C2f(C2f),
}

impl Fusion {
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Self::Dsaf(d) => d.forward(ctx, x),
            Self::C2f(c) => c.forward(ctx, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use dsaf_tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for id in store.learnable_ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
    }

    #[test]
    fn sd_window_value() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(pooled_sum(&x).unwrap().value().data(), &[6.5]);
    }

    #[test]
    fn sd_constant_input_doubles() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::full(vec![1, 2, 4, 6], 1.25));
        let y = pooled_sum(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn sd_rejects_odd_dims() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(matches!(pooled_sum(&x), Err(DetError::Shape(_))));
    }

    #[test]
    fn zeroed_fa_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fa = Fa::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, true);
        zero_all(&mut store);
        let ctx = Ctx::eval(&store);
        let x = rand(&[1, 4, 6, 6], 1);
        let y = fa.forward(&ctx, &ctx.tape().constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn fa_rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fa = Fa::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, true);
        let ctx = Ctx::eval(&store);
        let x = ctx.tape().constant(Tensor::zeros(vec![1, 3, 4, 4]));
        assert!(matches!(fa.forward(&ctx, &x), Err(DetError::Config(_))));
    }

    #[test]
    fn dsaf_hidden_width() {
        assert_eq!(dsaf_hidden(32, 0.375, 2), 12);
        assert_eq!(dsaf_hidden(8, 0.1, 2), 2);
        assert_eq!(dsaf_hidden(320, 0.375, 2), 120);
    }

    #[test]
    fn dsaf_output_width_independent_of_splits() {
        for splits in [2, 3, 4] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(splits as u64);
            let d = Dsaf::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 10, splits, 1, 0.5, true).unwrap();
            let ctx = Ctx::eval(&store);
            let x = ctx.tape().constant(rand(&[1, 6, 4, 4], 2));
            assert_eq!(d.forward(&ctx, &x).unwrap().shape(), &[1, 10, 4, 4]);
        }
    }

    #[test]
    fn dsaf_rejects_single_split() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Dsaf::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 4, 1, 1, 0.5, true);
        assert!(matches!(r, Err(DetError::Config(_))));
    }

    #[test]
    fn c2f_and_sppf_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let c2f = C2f::new(&mut b.scope("c2f"), 6, 8, 2, true);
        let sppf = Sppf::new(&mut b.scope("sppf"), 8);
        let ctx = Ctx::eval(&store);
        let x = ctx.tape().constant(rand(&[2, 6, 5, 5], 4));
        let y = c2f.forward(&ctx, &x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 5, 5]);
        assert_eq!(sppf.forward(&ctx, &y).unwrap().shape(), &[2, 8, 5, 5]);
    }
}
