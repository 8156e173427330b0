use std::path::{Path, PathBuf};
use std::sync::Arc;

use dsaf_tensor::{Real, Tensor};
use dsafdet::checkpoint;
use dsafdet::data::{letterbox, Dataset};
use dsafdet::decode::DecodeOptions;
use dsafdet::metrics::{csv_row, EvalReport, CSV_HEADER};
use dsafdet::model::{Ablation, Detector};
use dsafdet::params::ParamStore;
use dsafdet::profiler::{self, deviation, ProfileReport, BASELINE_PARAMS, TARGET_GFLOPS, TARGET_PARAMS};
use dsafdet::trainer::{self, TrainConfig, Trainer, BEST_CHECKPOINT};
use dsafdet::verify::{self, Suite};
use serde::Serialize;

use crate::config::{Layers, Precision, RunConfig};
use crate::{CliError, Fault, RunArgs};

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const PROFILE_JSON: &str = "profile.json";
pub const DETECTIONS_JSON: &str = "detections.json";
pub const VERIFY_JSON: &str = "verify.json";

fn load(args: &RunArgs) -> Result<RunConfig, CliError> {
    let layers = Layers {
        overrides: args.overrides.clone(),
        ablation: args.ablation,
        seed: args.seed,
        out: args.out.clone(),
    };
    RunConfig::load(args.config.as_deref(), &layers)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn unsupported(fault: Fault, command: &str) -> CliError {
    CliError::usage(format!("fault {fault:?} cannot be injected into {command}"))
}

pub fn train(args: &RunArgs, resume: bool, fault: Option<Fault>) -> Result<(), CliError> {
    let cfg = load(args)?;
    if let Some(f @ Fault::BilinearGrad) = fault {
        return Err(unsupported(f, "train"));
    }
    let train = cfg.open_data(&cfg.data.train_split)?;
    let val = match cfg.data.val_split.as_str() {
        "" => None,
        split => Some(cfg.open_data(split)?),
    };
    if args.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let path = cfg.write_resolved()?;
    log::info!("resolved configuration written to {}", path.display());
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, train, val, resume, fault),
        Precision::F64 => train_as::<f64>(&cfg, train, val, resume, fault),
    }
}

fn train_as<T: Real>(
    cfg: &RunConfig,
    train: Arc<Dataset>,
    val: Option<Arc<Dataset>>,
    resume: bool,
    fault: Option<Fault>,
) -> Result<(), CliError> {
    let (model, store) = Detector::new::<T>(cfg.model.clone(), cfg.train.seed)?;
    let mut t = Trainer::new(model, store, cfg.train.clone());
    if resume {
        t.resume(&cfg.out)?;
        log::info!("resuming at epoch {} step {}", t.state.epoch, t.state.step);
    }
    if fault == Some(Fault::Nan) {
        t.poison_step = Some(t.state.step);
    }
    let out = t.fit(train, val, Some(&cfg.out))?;
    let last = out.epochs.last();
    println!(
        "trained to epoch {} (loss {}), best mAP50 {}; outputs in {}",
        t.state.epoch,
        last.map_or("n/a".into(), |l| format!("{:.4}", l.loss)),
        out.best_map50.map_or("n/a".into(), |m| format!("{m:.4}")),
        cfg.out.display()
    );
    Ok(())
}

fn input_shape(train: &TrainConfig) -> [usize; 4] {
    let s = train.input_size as usize;
    [1, 3, s, s]
}

pub fn eval(args: &RunArgs, checkpoint: Option<PathBuf>, split: Option<String>) -> Result<(), CliError> {
    let cfg = load(args)?;
    let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
    let split = split.unwrap_or_else(|| cfg.eval_split().to_string());
    let ds = cfg.open_data(&split)?;
    if args.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (model, mut store) = Detector::new::<f32>(cfg.model.clone(), 0)?;
    checkpoint::load_store(&ckpt, &mut store)?;
    let bs = cfg.train.batch_size;
    let mut report: EvalReport = match cfg.precision {
        Precision::F32 => trainer::evaluate(&model, &store, ds, bs, &DecodeOptions::eval())?,
        Precision::F64 => trainer::evaluate(&model, &store.cast::<f64>(), ds, bs, &DecodeOptions::eval())?,
    };
    let prof = profiler::profile(&model, &store, &input_shape(&cfg.train))?;
    report.param_count = Some(prof.param_count);
    report.flops = Some(prof.flops);
    let name = cfg.model.ablation().name();
    let csv = format!("{CSV_HEADER}\n{}\n", csv_row(name, &report, Some(prof.model_size_bytes)));
    write_json(&cfg.out, EVAL_JSON, &report)?;
    let csv_path = cfg.out.join(EVAL_CSV);
    std::fs::write(&csv_path, &csv).map_err(|e| CliError::usage(format!("writing {}: {e}", csv_path.display())))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DetectionRecord {
    pub class_id: usize,
    pub class: String,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in original-image pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Serialize)]
pub struct ImageDetections {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Serialize)]
pub struct InferOutput {
    pub checkpoint: Option<PathBuf>,
    pub conf: f64,
    pub iou: f64,
    pub input_size: u32,
    pub images: Vec<ImageDetections>,
}

fn detect<T: Real>(
    model: &Detector,
    store: &ParamStore<T>,
    canvas: &Tensor<f32>,
    opts: &DecodeOptions,
) -> Result<Vec<dsafdet::boxes::Detection>, CliError> {
    let mut shape = vec![1];
    shape.extend_from_slice(canvas.shape());
    let batch = Tensor::new(shape, canvas.data().to_vec()).map_err(dsafdet::DetError::from)?;
    Ok(trainer::predict(model, store, &batch, opts)?.remove(0))
}

pub fn infer(
    args: &RunArgs,
    checkpoint: Option<PathBuf>,
    images: &[PathBuf],
    conf: f64,
    iou: f64,
) -> Result<(), CliError> {
    let cfg = load(args)?;
    for (name, v) in [("conf", conf), ("iou", iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::usage(format!("--{name} must lie in [0, 1], got {v}")));
        }
    }
    if args.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (model, mut store) = Detector::new::<f32>(cfg.model.clone(), cfg.train.seed)?;
    match &checkpoint {
        Some(c) => checkpoint::load_store(c, &mut store)?,
        None => log::warn!("no checkpoint given; using untrained weights"),
    }
    let store64 = (cfg.precision == Precision::F64).then(|| store.cast::<f64>());
    let names = cfg.class_names();
    let opts = DecodeOptions {
        conf_thresh: conf,
        iou_thresh: iou,
        ..DecodeOptions::default()
    };
    let mut out = InferOutput {
        checkpoint,
        conf,
        iou,
        input_size: cfg.train.input_size,
        images: Vec::with_capacity(images.len()),
    };
    for path in images {
        let img = image::open(path)
            .map_err(|e| CliError::usage(format!("reading image {}: {e}", path.display())))?
            .to_rgb8();
        let (canvas, meta) = letterbox(&img, cfg.train.input_size);
        let dets = match &store64 {
            Some(s) => detect(&model, s, &canvas, &opts)?,
            None => detect(&model, &store, &canvas, &opts)?,
        };
        let detections = dets
            .iter()
            .map(|d| (d, meta.inverse_box(&d.bbox)))
            .filter(|(_, b)| !b.is_degenerate())
            .map(|(d, b)| DetectionRecord {
                class_id: d.class_id,
                class: names[d.class_id].clone(),
                score: d.score,
                bbox: [b.x1, b.y1, b.x2, b.y2],
            })
            .collect();
        out.images.push(ImageDetections {
            path: path.clone(),
            width: img.width(),
            height: img.height(),
            detections,
        });
    }
    write_json(&cfg.out, DETECTIONS_JSON, &out)?;
    println!("{}", serde_json::to_string_pretty(&out).expect("detections serialise"));
    Ok(())
}

pub fn parse_scopes(scopes: &[String]) -> Result<Vec<Suite>, CliError> {
    let mut suites = Vec::new();
    for s in scopes {
        let add: Vec<Suite> = if s == "all" { Suite::ALL.to_vec() } else { vec![s.parse()?] };
        for x in add {
            if !suites.contains(&x) {
                suites.push(x);
            }
        }
    }
    Ok(suites)
}

pub fn verify(scopes: &[String], out: Option<PathBuf>, fault: Option<Fault>) -> Result<(), CliError> {
    let suites = parse_scopes(scopes)?;
    match fault {
        Some(Fault::BilinearGrad) => dsaf_tensor::deform::set_position_grad_fault(true),
        Some(f @ Fault::Nan) => return Err(unsupported(f, "verify")),
        None => {}
    }
    let checks = verify::run(&suites);
    dsaf_tensor::deform::set_position_grad_fault(false);
    print!("{}", verify::coverage_table(&checks));
    if let Some(dir) = out {
        write_json(&dir, VERIFY_JSON, &checks)?;
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    for c in &failed {
        eprintln!("FAIL {}/{}: max rel err {:.3e} exceeds {:.1e}", c.suite, c.name, c.max_err, c.tol);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
        Err(CliError::failed(format!("{} of {} checks failed: {}", failed.len(), checks.len(), names.join(", "))))
    }
}

#[derive(Debug, Serialize)]
pub struct ProfileOutput {
    pub ablation: Ablation,
    #[serde(flatten)]
    pub report: ProfileReport,
    pub params_millions: f64,
    pub gflops: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gflops_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gflops_deviation: Option<f64>,
}

impl ProfileOutput {
    pub fn new(ablation: Ablation, report: ProfileReport) -> Self {
        let (params_target, gflops_target) = match ablation {
            Ablation::Full => (Some(TARGET_PARAMS), Some(TARGET_GFLOPS)),
            Ablation::Baseline => (Some(BASELINE_PARAMS), None),
            _ => (None, None),
        };
        Self {
            ablation,
            params_millions: report.params_millions(),
            gflops: report.gflops(),
            params_target,
            params_deviation: params_target.map(|t| deviation(report.param_count as f64, t)),
            gflops_target,
            gflops_deviation: gflops_target.map(|t| deviation(report.gflops(), t)),
            report,
        }
    }
}

pub fn profile(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    if args.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (model, store) = Detector::new::<f32>(cfg.model.clone(), cfg.train.seed)?;
    let report = profiler::profile(&model, &store, &input_shape(&cfg.train))?;
    let p = ProfileOutput::new(cfg.model.ablation(), report);
    println!("model      {}", p.ablation);
    println!("input      {:?}", p.report.input_shape);
    println!("params     {} ({:.3} M)", p.report.param_count, p.params_millions);
    println!("buffers    {}", p.report.buffer_count);
    println!("FLOPs      {} ({:.3} G)", p.report.flops, p.gflops);
    println!("size       {} bytes", p.report.model_size_bytes);
    if let (Some(t), Some(d)) = (p.params_target, p.params_deviation) {
        println!("params vs {:.1} M target: {:+.2}%", t / 1e6, 100.0 * d);
    }
    if let (Some(t), Some(d)) = (p.gflops_target, p.gflops_deviation) {
        println!("FLOPs vs {t:.1} G target: {:+.2}%", 100.0 * d);
    }
    for (op, f) in &p.report.breakdown {
        println!("  {op:<18} {:.3} G", *f as f64 / 1e9);
    }
    write_json(&cfg.out, PROFILE_JSON, &p)?;
    Ok(())
}
