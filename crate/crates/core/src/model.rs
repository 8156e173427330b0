//! Backbone, multi-scale fusion neck and decoupled head.
//!
//! Topology, with `D` a downsampling stage (SD or strided CBS) and `F` a
//! fusion stage (DSAF or C2f):
//!
//! ```text
//! stem s2 → D,F → D,F (P3) → D,F (P4) → D,F,SPPF (P5)
//! top-down:  F(up(P5) ‖ P4) = T4,  F(up(T4) ‖ P3) = out3
//! bottom-up: F(D(out3) ‖ T4) = out4, F(D(out4) ‖ P5) = out5
//! ```

use std::str::FromStr;

use dsaf_tensor::{Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{C2f, Downsample, Dsaf, Fusion, Sppf};
use crate::error::{DetError, Result};
use crate::layers::{Conv, ConvBlock};
use crate::params::{Ctx, ParamBuilder, ParamStore};

/// Side of the square network input the head biases are tuned for.
pub const INPUT_SIZE: usize = 640;
/// Coarsest stride; inputs must be a multiple of it.
pub const MAX_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Stem, then the four stage widths before `width_mult`.
    pub stage_channels: Vec<usize>,
    /// Unscaled block counts of the four backbone stages.
    pub backbone_depth: Vec<usize>,
    /// Unscaled block counts of the four neck stages.
    pub neck_depth: Vec<usize>,
    pub dsaf_splits: usize,
    /// DSAF entry width as a fraction of its output width.
    pub dsaf_expansion: f64,
    /// Conv-BN-SiLU instead of a bare conv at the start of each FA block.
    pub fa_pre_norm: bool,
    pub use_dsaf: bool,
    pub use_sd: bool,
    pub use_sppf: bool,
    pub strides: Vec<usize>,
    pub reg_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            width_mult: 1.0,
            depth_mult: 0.33,
            stage_channels: vec![16, 32, 56, 88, 320],
            backbone_depth: vec![3, 6, 6, 3],
            neck_depth: vec![3, 3, 3, 3],
            dsaf_splits: 2,
            dsaf_expansion: 0.375,
            fa_pre_norm: true,
            use_dsaf: true,
            use_sd: true,
            use_sppf: true,
            strides: vec![8, 16, 32],
            reg_max: 16,
        }
    }
}

impl ModelConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DetError::Config(msg));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if !(self.width_mult > 0.0 && self.depth_mult > 0.0) {
            return fail(format!(
                "width_mult and depth_mult must be positive, got {} and {}",
                self.width_mult, self.depth_mult
            ));
        }
        if self.stage_channels.len() != 5 || self.stage_channels.contains(&0) {
            return fail(format!("stage_channels needs 5 positive widths, got {:?}", self.stage_channels));
        }
        if self.backbone_depth.len() != 4 || self.neck_depth.len() != 4 {
            return fail("backbone_depth and neck_depth need 4 entries each".into());
        }
        if self.dsaf_splits < 2 {
            return fail(format!("dsaf_splits must be at least 2, got {}", self.dsaf_splits));
        }
        if !(self.dsaf_expansion > 0.0) {
            return fail(format!("dsaf_expansion must be positive, got {}", self.dsaf_expansion));
        }
        if self.strides != [8, 16, 32] {
            return fail(format!("strides must be [8, 16, 32], got {:?}", self.strides));
        }
        if self.reg_max < 2 {
            return fail(format!("reg_max must be at least 2, got {}", self.reg_max));
        }
        Ok(())
    }

    /// Stage widths after `width_mult`.
    pub fn channels(&self) -> Vec<usize> {
        self.stage_channels
            .iter()
            .map(|&c| ((c as f64 * self.width_mult).round() as usize).max(1))
            .collect()
    }

    fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_mult).round() as usize).max(1)
    }

    pub fn backbone_blocks(&self) -> Vec<usize> {
        self.backbone_depth.iter().map(|&n| self.depth(n)).collect()
    }

    pub fn neck_blocks(&self) -> Vec<usize> {
        self.neck_depth.iter().map(|&n| self.depth(n)).collect()
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_dsaf, self.use_sd) = ablation.toggles();
        self
    }

    pub fn ablation(&self) -> Ablation {
        Ablation::from_toggles(self.use_dsaf, self.use_sd)
    }
}

/// The four on/off combinations of the fusion and downsampling blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoDsaf,
    NoSd,
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::NoSd, Ablation::NoDsaf, Ablation::Full];

    /// `(use_dsaf, use_sd)`.
    pub fn toggles(self) -> (bool, bool) {
        match self {
            Self::Full => (true, true),
            Self::NoDsaf => (false, true),
            Self::NoSd => (true, false),
            Self::Baseline => (false, false),
        }
    }

    pub fn from_toggles(use_dsaf: bool, use_sd: bool) -> Self {
        match (use_dsaf, use_sd) {
            (true, true) => Self::Full,
            (false, true) => Self::NoDsaf,
            (true, false) => Self::NoSd,
            (false, false) => Self::Baseline,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDsaf => "no-dsaf",
            Self::NoSd => "no-sd",
            Self::Baseline => "baseline",
        }
    }
}

impl FromStr for Ablation {
    type Err = DetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DetError::Config(format!("unknown ablation {s:?} (full, no-dsaf, no-sd, baseline)")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Box and class towers of one output scale.
#[derive(Clone, Debug)]
pub struct HeadLevel {
    pub stride: usize,
    pub box_tower: [ConvBlock; 2],
    pub box_out: Conv,
    pub cls_tower: [ConvBlock; 2],
    pub cls_out: Conv,
}

/// Per-scale head outputs. `cls` is `[N, classes, H, W]` logits, `reg` is
/// `[N, 4·reg_max, H, W]` side-distribution logits ordered left, top, right,
/// bottom.
pub struct LevelOutput<T> {
    pub stride: usize,
    pub cls: Var<T>,
    pub reg: Var<T>,
}

pub struct RawPrediction<T> {
    pub levels: Vec<LevelOutput<T>>,
    pub reg_max: usize,
    pub num_classes: usize,
    /// Input height and width.
    pub image_size: (usize, usize),
}

impl<T: Real> RawPrediction<T> {
    pub fn batch(&self) -> usize {
        self.levels[0].cls.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub stem: ConvBlock,
    pub stages: Vec<(Downsample, Fusion)>,
    pub sppf: Option<Sppf>,
    pub top_down: [Fusion; 2],
    pub bottom_up_down: [Downsample; 2],
    pub bottom_up: [Fusion; 2],
    pub head: Vec<HeadLevel>,
}

fn fusion<T: Real, R: Rng>(
    b: &mut ParamBuilder<'_, T, R>,
    cfg: &ModelConfig,
    c_in: usize,
    c_out: usize,
    n: usize,
    shortcut: bool,
) -> Result<Fusion> {
    if cfg.use_dsaf {
        Ok(Fusion::Dsaf(Dsaf::new(
            b,
            c_in,
            c_out,
            cfg.dsaf_splits,
            n,
            cfg.dsaf_expansion,
            cfg.fa_pre_norm,
        )?))
    } else {
        Ok(Fusion::C2f(C2f::new(b, c_in, c_out, n, shortcut)))
    }
}

impl Detector {
    /// Builds the model and its freshly initialised parameters.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn build<T: Real, R: Rng>(config: ModelConfig, b: &mut ParamBuilder<'_, T, R>) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let ch = cfg.channels();
        let nb = cfg.backbone_blocks();
        let nn = cfg.neck_blocks();

        let stem = ConvBlock::cbs(&mut b.scope("stem"), 3, ch[0], 3, 2);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let mut s = b.scope(format_args!("stage{}", i + 1));
            let down = Downsample::new(&mut s.scope("down"), ch[i], ch[i + 1], cfg.use_sd);
            let fuse = fusion(&mut s.scope("fuse"), cfg, ch[i + 1], ch[i + 1], nb[i], true)?;
            stages.push((down, fuse));
        }
        let sppf = cfg.use_sppf.then(|| Sppf::new(&mut b.scope("sppf"), ch[4]));

        let mut neck = b.scope("neck");
        let top_down = [
            fusion(&mut neck.scope("td4"), cfg, ch[4] + ch[3], ch[3], nn[0], false)?,
            fusion(&mut neck.scope("td3"), cfg, ch[3] + ch[2], ch[2], nn[1], false)?,
        ];
        let bottom_up_down = [
            Downsample::new(&mut neck.scope("down4"), ch[2], ch[2], cfg.use_sd),
            Downsample::new(&mut neck.scope("down5"), ch[3], ch[3], cfg.use_sd),
        ];
        let bottom_up = [
            fusion(&mut neck.scope("bu4"), cfg, ch[2] + ch[3], ch[3], nn[2], false)?,
            fusion(&mut neck.scope("bu5"), cfg, ch[3] + ch[4], ch[4], nn[3], false)?,
        ];

        let reg = cfg.reg_max;
        let nc = cfg.num_classes;
        let c2 = 16.max(ch[2] / 4).max(4 * reg);
        let c3 = ch[2].max(nc.min(100));
        let mut head = Vec::with_capacity(3);
        for (lvl, (&stride, &c)) in cfg.strides.iter().zip(&[ch[2], ch[3], ch[4]]).enumerate() {
            let mut h = b.scope(format_args!("head{lvl}"));
            let box_tower = [
                ConvBlock::cbs(&mut h.scope("box0"), c, c2, 3, 1),
                ConvBlock::cbs(&mut h.scope("box1"), c2, c2, 3, 1),
            ];
            let box_out = Conv::new(&mut h.scope("box_out"), c2, 4 * reg, 1, 1, 1, true);
            let cls_tower = [
                ConvBlock::cbs(&mut h.scope("cls0"), c, c3, 3, 1),
                ConvBlock::cbs(&mut h.scope("cls1"), c3, c3, 3, 1),
            ];
            let cls_out = Conv::new(&mut h.scope("cls_out"), c3, nc, 1, 1, 1, true);
            // prior: about five objects per image spread over the grid
            let cells = (INPUT_SIZE as f64 / stride as f64).powi(2);
            let cls_prior = (5.0 / nc as f64 / cells).ln();
            let store = h.store_mut();
            fill(store, box_out.bias.expect("head convs are biased"), 1.0);
            fill(store, cls_out.bias.expect("head convs are biased"), cls_prior);
            head.push(HeadLevel {
                stride,
                box_tower,
                box_out,
                cls_tower,
                cls_out,
            });
        }

        Ok(Self {
            config,
            stem,
            stages,
            sppf,
            top_down,
            bottom_up_down,
            bottom_up,
            head,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, images: &Var<T>) -> Result<RawPrediction<T>> {
        let &[_, c, h, w] = images.shape() else {
            return Err(DetError::Shape(format!("expected [N, 3, H, W] images, got {:?}", images.shape())));
        };
        if c != 3 || h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(DetError::Shape(format!(
                "images must be [N, 3, H, W] with H and W positive multiples of {MAX_STRIDE}, got {:?}",
                images.shape()
            )));
        }

        let mut x = self.stem.forward(ctx, images)?;
        let mut taps = Vec::with_capacity(3);
        for (i, (down, fuse)) in self.stages.iter().enumerate() {
            x = fuse.forward(ctx, &down.forward(ctx, &x)?)?;
            if i == 3 {
                if let Some(sppf) = &self.sppf {
                    x = sppf.forward(ctx, &x)?;
                }
            }
            if i >= 1 {
                taps.push(x.clone());
            }
        }
        let (p3, p4, p5) = (&taps[0], &taps[1], &taps[2]);

        let t4 = self.top_down[0].forward(ctx, &Var::concat(&[&p5.upsample_nearest2x()?, p4], 1)?)?;
        let out3 = self.top_down[1].forward(ctx, &Var::concat(&[&t4.upsample_nearest2x()?, p3], 1)?)?;
        let d4 = self.bottom_up_down[0].forward(ctx, &out3)?;
        let out4 = self.bottom_up[0].forward(ctx, &Var::concat(&[&d4, &t4], 1)?)?;
        let d5 = self.bottom_up_down[1].forward(ctx, &out4)?;
        let out5 = self.bottom_up[1].forward(ctx, &Var::concat(&[&d5, p5], 1)?)?;

        let levels = self
            .head
            .iter()
            .zip([out3, out4, out5])
            .map(|(lvl, f)| {
                let b = lvl.box_tower[1].forward(ctx, &lvl.box_tower[0].forward(ctx, &f)?)?;
                let c = lvl.cls_tower[1].forward(ctx, &lvl.cls_tower[0].forward(ctx, &f)?)?;
                Ok(LevelOutput {
                    stride: lvl.stride,
                    reg: lvl.box_out.forward(ctx, &b)?,
                    cls: lvl.cls_out.forward(ctx, &c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawPrediction {
            levels,
            reg_max: self.config.reg_max,
            num_classes: self.config.num_classes,
            image_size: (h, w),
        })
    }
}

fn fill<T: Real>(store: &mut ParamStore<T>, id: crate::params::ParamId, v: f64) {
    store.get_mut(id).data_mut().fill(T::from_f64(v));
}
