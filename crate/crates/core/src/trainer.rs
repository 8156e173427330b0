//! SGD training loop, evaluation and resumable checkpoints.
//!
//! Output directory layout:
//!
//! ```text
//! log.jsonl        one record per epoch
//! ckpt-best.dsaf   weights with the best validation mAP50 so far
//! last.dsaf        latest weights plus momentum buffers (`momentum.*`)
//! state.json       epoch, step and best score for resuming
//! nan-dump.json    written when a step produces a non-finite loss
//! ```

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use dsaf_tensor::{Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::assign::{assign_targets, AssignOptions};
use crate::boxes::Detection;
use crate::checkpoint::{self, fill_store};
use crate::data::{AugmentConfig, Batch, BatchLoader, Dataset, LoaderOptions};
use crate::decode::{postprocess, DecodeOptions};
use crate::error::{io_err, DetError, Result};
use crate::layers::BN_MOMENTUM;
use crate::loss::{compute_loss, LossParts, LossWeights};
use crate::metrics::{evaluate_detections, EvalReport, ImageResult};
use crate::model::Detector;
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};

pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CHECKPOINT: &str = "ckpt-best.dsaf";
pub const LAST_CHECKPOINT: &str = "last.dsaf";
pub const STATE_FILE: &str = "state.json";
pub const NAN_DUMP: &str = "nan-dump.json";
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs between evaluation and checkpointing; the last epoch always
    /// checkpoints.
    pub eval_interval: usize,
    /// Steps of linear learning-rate warmup from zero.
    pub warmup_steps: usize,
    /// Cosine decay to `final_lr_frac · lr` over the epochs after warmup.
    pub cosine: bool,
    pub final_lr_frac: f64,
    pub input_size: u32,
    pub augment: AugmentConfig,
    /// Prefetch workers; `None` reads `DSAFDET_NUM_WORKERS`.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.937,
            weight_decay: 5e-4,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            eval_interval: 10,
            // three epochs of 1952 images at batch 8
            warmup_steps: 732,
            cosine: false,
            final_lr_frac: 0.01,
            input_size: 640,
            augment: AugmentConfig::default(),
            workers: None,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so frozen runs can be checked.
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(crate::model::MAX_STRIDE as u32) {
            return bad("input_size must be a positive multiple of 32");
        }
        Ok(())
    }

    /// Learning rate at a global step within an epoch.
    pub fn lr_at(&self, step: usize, epoch: usize) -> f64 {
        let mut lr = self.lr;
        if self.cosine && self.epochs > 1 {
            let t = epoch as f64 / (self.epochs - 1) as f64;
            let f = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            lr *= self.final_lr_frac + (1.0 - self.final_lr_frac) * f;
        }
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        lr
    }

    fn loader(&self, epoch: usize) -> LoaderOptions {
        LoaderOptions {
            batch_size: self.batch_size,
            seed: self.seed,
            epoch,
            shuffle: true,
            augment: self.augment,
            workers: self.workers.unwrap_or_else(crate::data::num_workers_from_env),
            prefetch: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one slot per store entry.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T> {
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }
}

/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`, with decay only on parameters that
/// request it. Every learnable parameter must have a gradient.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut SgdState<T>,
    hp: &SgdParams,
) -> Result<()> {
    let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
    for (id, g) in grads {
        by_id[id.index()] = Some(g);
    }
    state.velocity.resize(store.len(), None);
    let ids: Vec<ParamId> = store.learnable_ids().collect();
    for id in ids {
        let ParamKind::Learnable { decay } = store.entry(id).kind else {
            continue;
        };
        let Some(g) = by_id[id.index()] else {
            return Err(DetError::DeadParameter(store.entry(id).name.clone()));
        };
        let w = store.get_mut(id);
        if g.shape() != w.shape() {
            return Err(DetError::Shape(format!(
                "gradient {:?} for parameter of shape {:?}",
                g.shape(),
                w.shape()
            )));
        }
        let wd = if decay { hp.weight_decay } else { 0.0 };
        let v = state.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let vn = hp.momentum * vi.as_f64() + gi.as_f64() + wd * wi.as_f64();
            *vi = T::from_f64(vn);
            *wi = T::from_f64(wi.as_f64() - hp.lr * vi.as_f64());
        }
    }
    Ok(())
}

/// Forward, loss and gradients of one batch without touching the store.
pub struct StepResult<T: Real> {
    pub parts: LossParts,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub bn: crate::params::BnUpdates<T>,
}

pub fn forward_backward<T: Real>(model: &Detector, store: &ParamStore<T>, batch: &Batch) -> Result<StepResult<T>> {
    let ctx = Ctx::new(Tape::new(), store, true);
    let x = ctx.tape().constant(batch.images.cast());
    let raw = model.forward(&ctx, &x)?;
    let assignment = assign_targets(&raw, &batch.targets, &AssignOptions::default());
    let loss = compute_loss(&raw, &batch.targets, &assignment, &LossWeights::default())?;
    if !loss.parts.total.is_finite() {
        return Ok(StepResult {
            parts: loss.parts,
            grads: Vec::new(),
            bn: ctx.take_bn_updates(),
        });
    }
    let g = ctx.tape().backward(&loss.total)?;
    Ok(StepResult {
        parts: loss.parts,
        grads: ctx.param_grads(&g)?,
        bn: ctx.take_bn_updates(),
    })
}

/// Detections per image of a `[N, 3, S, S]` batch, in canvas pixels.
pub fn predict<T: Real>(
    model: &Detector,
    store: &ParamStore<T>,
    images: &Tensor<f32>,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<Detection>>> {
    let ctx = Ctx::eval(store);
    let x = ctx.tape().constant(images.cast());
    let raw = model.forward(&ctx, &x)?;
    Ok(postprocess(&raw, opts))
}

/// Decodes every image of `ds` in index order and scores the detections.
pub fn evaluate<T: Real>(
    model: &Detector,
    store: &ParamStore<T>,
    ds: Arc<Dataset>,
    batch_size: usize,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    let mut dets = Vec::with_capacity(ds.len());
    let mut gts = Vec::with_capacity(ds.len());
    let class_names = ds.class_names().to_vec();
    for batch in BatchLoader::new(ds, LoaderOptions::eval(batch_size)) {
        let batch = batch?;
        dets.extend(predict(model, store, &batch.images, opts)?);
        gts.extend(batch.targets);
    }
    let images: Vec<ImageResult<'_>> = dets
        .iter()
        .zip(&gts)
        .map(|(d, g)| ImageResult { dets: d, gts: g })
        .collect();
    Ok(evaluate_detections(&images, &class_names))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global step count after the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Step means of the loss terms.
    pub loss: f64,
    pub cls: f64,
    pub box_iou: f64,
    pub dfl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map50_95: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub best_map50: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every step, in order.
    pub step_losses: Vec<f64>,
    pub best_map50: Option<f64>,
}

pub struct Trainer<T: Real> {
    pub model: Detector,
    pub store: ParamStore<T>,
    pub cfg: TrainConfig,
    pub sgd: SgdState<T>,
    pub state: TrainState,
    /// Treats the loss of this global step as non-finite.
    #[doc(hidden)]
    pub poison_step: Option<usize>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Detector, store: ParamStore<T>, cfg: TrainConfig) -> Self {
        Self {
            model,
            store,
            cfg,
            sgd: SgdState::new(),
            state: TrainState::default(),
            poison_step: None,
        }
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<LossParts> {
        let StepResult { parts, grads, bn } = forward_backward(&self.model, &self.store, batch)?;
        if !parts.total.is_finite() || self.poison_step == Some(self.state.step) {
            return Err(DetError::NonFinite {
                epoch: self.state.epoch,
                step: self.state.step,
                ids: batch.ids.clone(),
            });
        }
        bn.apply(&mut self.store, BN_MOMENTUM);
        let hp = SgdParams {
            lr: self.cfg.lr_at(self.state.step, self.state.epoch),
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        };
        sgd_step(&mut self.store, &grads, &mut self.sgd, &hp)?;
        self.state.step += 1;
        Ok(parts)
    }

    /// Runs one epoch and advances the epoch counter.
    pub fn run_epoch(&mut self, train: &Arc<Dataset>, step_losses: &mut Vec<f64>) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        let mut lr = 0.0;
        for batch in BatchLoader::new(train.clone(), self.cfg.loader(epoch)) {
            let batch = batch?;
            lr = self.cfg.lr_at(self.state.step, epoch);
            let p = self.step(&batch)?;
            step_losses.push(p.total);
            for (s, v) in sums.iter_mut().zip([p.total, p.cls, p.box_iou, p.dfl]) {
                *s += v;
            }
            steps += 1;
        }
        let n = steps.max(1) as f64;
        self.state.epoch += 1;
        Ok(EpochLog {
            epoch,
            step: self.state.step,
            lr,
            loss: sums[0] / n,
            cls: sums[1] / n,
            box_iou: sums[2] / n,
            dfl: sums[3] / n,
            map50: None,
            map50_95: None,
        })
    }

    /// Trains until `cfg.epochs`, evaluating on `val` every
    /// `eval_interval` epochs. With `out`, writes the files listed in the
    /// module documentation.
    pub fn fit(&mut self, train: Arc<Dataset>, val: Option<Arc<Dataset>>, out: Option<&Path>) -> Result<FitOutput> {
        self.cfg.validate()?;
        if train.is_empty() {
            return Err(DetError::Config("training set is empty".into()));
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        }
        let mut output = FitOutput {
            best_map50: self.state.best_map50,
            ..FitOutput::default()
        };
        while self.state.epoch < self.cfg.epochs {
            let mut log = match self.run_epoch(&train, &mut output.step_losses) {
                Ok(log) => log,
                Err(e @ DetError::NonFinite { .. }) => {
                    if let Some(dir) = out {
                        write_nan_dump(dir, &e)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let done = self.state.epoch == self.cfg.epochs;
            if self.state.epoch.is_multiple_of(self.cfg.eval_interval) || done {
                let mut improved = val.is_none();
                if let Some(v) = &val {
                    let r = evaluate(&self.model, &self.store, v.clone(), self.cfg.batch_size, &DecodeOptions::eval())?;
                    log.map50 = Some(r.map50);
                    log.map50_95 = Some(r.map50_95);
                    improved = self.state.best_map50.is_none_or(|b| r.map50 > b);
                    if improved {
                        self.state.best_map50 = Some(r.map50);
                    }
                }
                if let Some(dir) = out {
                    if improved {
                        checkpoint::save_store(&dir.join(BEST_CHECKPOINT), &self.store)?;
                    }
                    self.save_last(dir)?;
                }
            }
            log::info!(
                "epoch {} loss {:.4} (cls {:.4} box {:.4} dfl {:.4}) lr {:.2e}{}",
                log.epoch,
                log.loss,
                log.cls,
                log.box_iou,
                log.dfl,
                log.lr,
                log.map50.map_or(String::new(), |m| format!(" mAP50 {m:.4}"))
            );
            if let Some(dir) = out {
                append_log(dir, &log)?;
            }
            output.epochs.push(log);
        }
        output.best_map50 = self.state.best_map50;
        Ok(output)
    }

    /// Writes `last.dsaf` and `state.json`.
    pub fn save_last(&self, dir: &Path) -> Result<()> {
        let zeros: Vec<Tensor<T>> = self
            .store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect();
        let names: Vec<String> = self
            .store
            .learnable_ids()
            .map(|id| format!("{MOMENTUM_PREFIX}{}", self.store.entry(id).name))
            .collect();
        let momentum = self.store.learnable_ids().zip(&names).map(|(id, name)| {
            let v = self
                .sgd
                .velocity
                .get(id.index())
                .and_then(Option::as_ref)
                .unwrap_or(&zeros[id.index()]);
            (name.as_str(), v)
        });
        let params = self.store.entries().iter().map(|e| (e.name.as_str(), &e.value));
        let bytes = checkpoint::encode(params.chain(momentum));
        let path = dir.join(LAST_CHECKPOINT);
        std::fs::write(&path, bytes).map_err(io_err(format!("writing {}", path.display())))?;
        let state = serde_json::to_string_pretty(&self.state).expect("state serialises");
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, state).map_err(io_err(format!("writing {}", path.display())))
    }

    /// Restores weights, momentum and counters written by [`save_last`].
    ///
    /// [`save_last`]: Trainer::save_last
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let tensors = checkpoint::read_file(&dir.join(LAST_CHECKPOINT))?;
        fill_store(&mut self.store, &tensors, &[MOMENTUM_PREFIX])?;
        let mut velocity: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        for (name, t) in &tensors {
            if let Some(param) = name.strip_prefix(MOMENTUM_PREFIX) {
                let id = self
                    .store
                    .find(param)
                    .ok_or_else(|| DetError::Checkpoint(format!("momentum for unknown parameter {param}")))?;
                velocity[id.index()] = Some(t.cast());
            }
        }
        self.sgd = SgdState { velocity };
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
        self.state = serde_json::from_str(&text).map_err(|source| DetError::Json {
            context: format!("parsing {}", path.display()),
            source,
        })?;
        Ok(())
    }
}

fn append_log(dir: &Path, log: &EpochLog) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(format!("opening {}", path.display())))?;
    let line = serde_json::to_string(log).expect("log record serialises");
    writeln!(f, "{line}").map_err(io_err(format!("writing {}", path.display())))
}

fn write_nan_dump(dir: &Path, e: &DetError) -> Result<()> {
    let DetError::NonFinite { epoch, step, ids } = e else {
        return Ok(());
    };
    let dump = serde_json::json!({ "epoch": epoch, "step": step, "sample_ids": ids });
    let path = dir.join(NAN_DUMP);
    std::fs::write(&path, serde_json::to_string_pretty(&dump).expect("dump serialises"))
        .map_err(io_err(format!("writing {}", path.display())))
}
