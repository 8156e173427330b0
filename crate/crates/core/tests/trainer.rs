use std::sync::Arc;

use dsaf_tensor::{Real, Tensor};
use dsafdet::checkpoint;
use dsafdet::data::synthetic::{generate, SyntheticSpec};
use dsafdet::data::{AugmentConfig, Dataset};
use dsafdet::decode::DecodeOptions;
use dsafdet::model::{Detector, ModelConfig};
use dsafdet::params::ParamStore;
use dsafdet::trainer::{evaluate, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, NAN_DUMP, STATE_FILE};
use dsafdet::DetError;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        stage_channels: vec![8, 8, 16, 16, 16],
        reg_max: 8,
        ..ModelConfig::default()
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        epochs,
        batch_size: 2,
        seed: 7,
        eval_interval: 1,
        warmup_steps: 3,
        input_size: 64,
        augment: AugmentConfig::default(),
        workers: Some(2),
        ..TrainConfig::default()
    }
}

fn dataset(n: usize) -> Arc<Dataset> {
    let spec = SyntheticSpec {
        num_images: n,
        ..SyntheticSpec::default()
    };
    let (index, images) = generate(&spec, 1);
    Arc::new(Dataset::from_memory(index, images, 64))
}

fn trainer<T: Real>(cfg: TrainConfig) -> Trainer<T> {
    let (model, store) = Detector::new::<T>(model_cfg(), 3).unwrap();
    Trainer::new(model, store, cfg)
}

fn learnable_bits<T: Real>(s: &ParamStore<T>) -> Vec<Vec<f64>> {
    s.learnable_ids().map(|id| s.get(id).cast::<f64>().data().to_vec()).collect()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut t = trainer::<f64>(TrainConfig {
        lr: 0.0,
        ..train_cfg(1)
    });
    let before = learnable_bits(&t.store);
    let out = t.fit(dataset(4), None, None).unwrap();
    assert_eq!(out.step_losses.len(), 2);
    assert_eq!(learnable_bits(&t.store), before);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let ds = dataset(4);
    let run = || {
        let mut t = trainer::<f64>(train_cfg(2));
        let out = t.fit(ds.clone(), Some(ds.clone()), None).unwrap();
        (out, checkpoint::store_bytes(&t.store), t.store.cast::<f64>())
    };
    let (a, bytes_a, store_a) = run();
    let (b, bytes_b, store_b) = run();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.step_losses), bits(&b.step_losses));
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(bytes_a, bytes_b);
    for (x, y) in store_a.entries().iter().zip(store_b.entries()) {
        assert_eq!(bits(x.value.data()), bits(y.value.data()), "{}", x.name);
    }
    // a different seed changes the shuffle and augmentation
    let mut t = trainer::<f64>(TrainConfig {
        seed: 8,
        ..train_cfg(2)
    });
    assert_ne!(bits(&t.fit(ds, None, None).unwrap().step_losses), bits(&a.step_losses));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let ds = dataset(4);
    let cfg = TrainConfig {
        cosine: true,
        ..train_cfg(4)
    };
    let mut straight = trainer::<f32>(cfg.clone());
    let full = straight.fit(ds.clone(), None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer::<f32>(cfg.clone());
    let mut losses = Vec::new();
    first.run_epoch(&ds, &mut losses).unwrap();
    first.run_epoch(&ds, &mut losses).unwrap();
    first.save_last(dir.path()).unwrap();

    let (model, store) = Detector::new::<f32>(model_cfg(), 99).unwrap();
    let mut resumed = Trainer::new(model, store, cfg);
    resumed.resume(dir.path()).unwrap();
    assert_eq!(resumed.state.epoch, 2);
    losses.extend(resumed.fit(ds, None, None).unwrap().step_losses);
    assert_eq!(losses, full.step_losses);
    assert_eq!(checkpoint::store_bytes(&resumed.store), checkpoint::store_bytes(&straight.store));
}

#[test]
fn fit_writes_logs_and_checkpoints() {
    let ds = dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer::<f32>(TrainConfig {
        eval_interval: 2,
        ..train_cfg(3)
    });
    let out = t.fit(ds.clone(), Some(ds), Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i);
        for k in ["loss", "cls", "box_iou", "dfl", "lr"] {
            assert!(l[k].as_f64().unwrap().is_finite(), "{k}");
        }
    }
    // evaluated after epochs 2 and 3 only
    assert!(lines[0].get("map50").is_none_or(|v| v.is_null()));
    assert!(lines[1]["map50"].is_number() && lines[2]["map50"].is_number());
    assert!(out.best_map50.is_some());
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, STATE_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // the best checkpoint loads into a fresh model
    let (_, mut store) = Detector::new::<f32>(model_cfg(), 0).unwrap();
    checkpoint::load_store(&dir.path().join(BEST_CHECKPOINT), &mut store).unwrap();
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer::<f32>(train_cfg(2));
    t.poison_step = Some(3);
    let err = t.fit(dataset(4), None, Some(dir.path())).unwrap_err();
    let DetError::NonFinite { epoch, step, ids } = err else {
        panic!("unexpected error {err}");
    };
    assert_eq!((epoch, step, ids.len()), (1, 3, 2));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(NAN_DUMP)).unwrap()).unwrap();
    assert_eq!(dump["step"], 3);
    assert_eq!(dump["sample_ids"].as_array().unwrap().len(), 2);
}

#[test]
fn evaluation_is_deterministic_and_zero_weights_find_nothing() {
    let ds = dataset(6);
    let (model, store) = Detector::new::<f32>(model_cfg(), 5).unwrap();
    let a = evaluate(&model, &store, ds.clone(), 4, &DecodeOptions::eval()).unwrap();
    let b = evaluate(&model, &store, ds.clone(), 3, &DecodeOptions::eval()).unwrap();
    assert_eq!(a, b);

    let mut zero = store.clone();
    let ids: Vec<_> = zero.learnable_ids().collect();
    for id in ids {
        let t = zero.get_mut(id);
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let r = evaluate(&model, &zero, ds, 4, &DecodeOptions::eval()).unwrap();
    assert!(r.map50 < 0.05, "{}", r.map50);
    assert!(r.map50_95 <= r.map50);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer::<f32>(train_cfg(1));
    t.fit(dataset(2), None, Some(dir.path())).unwrap();
    let path = dir.path().join(BEST_CHECKPOINT);
    let (_, mut store) = Detector::new::<f32>(model_cfg(), 42).unwrap();
    checkpoint::load_store(&path, &mut store).unwrap();
    let again = dir.path().join("again.dsaf");
    checkpoint::save_store(&again, &store).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
