//! Dataset ingestion, letterboxing, augmentation and batching.

pub mod annotations;
pub mod augment;
pub mod letterbox;
pub mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use dsaf_tensor::Tensor;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::GtBox;
use crate::error::{DetError, Result};

pub use annotations::{load_split, AnnotationFormat, DatasetIndex, ImageRecord};
pub use augment::{augment, AugmentConfig};
pub use letterbox::{letterbox, LetterboxMeta};

/// Decoding boundary between files and pixels.
pub trait ImageDecoder: Send + Sync {
    fn decode(&self, record: &ImageRecord) -> Result<RgbImage>;
}

/// PNG/JPEG files on disk.
pub struct FileDecoder;

impl ImageDecoder for FileDecoder {
    fn decode(&self, record: &ImageRecord) -> Result<RgbImage> {
        let img = image::open(&record.path).map_err(|e| DetError::Image {
            path: record.path.clone(),
            msg: e.to_string(),
        })?;
        Ok(img.to_rgb8())
    }
}

/// Images held in memory, keyed by record path.
#[derive(Default)]
pub struct MemoryDecoder {
    images: HashMap<PathBuf, RgbImage>,
}

impl MemoryDecoder {
    pub fn new(index: &DatasetIndex, images: Vec<RgbImage>) -> Self {
        Self {
            images: index.images.iter().map(|r| r.path.clone()).zip(images).collect(),
        }
    }

    pub fn insert(&mut self, path: impl Into<PathBuf>, img: RgbImage) {
        self.images.insert(path.into(), img);
    }
}

impl ImageDecoder for MemoryDecoder {
    fn decode(&self, record: &ImageRecord) -> Result<RgbImage> {
        self.images.get(&record.path).cloned().ok_or_else(|| DetError::Image {
            path: record.path.clone(),
            msg: "not in memory".into(),
        })
    }
}

/// One letterboxed image with ground truth in canvas pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub boxes: Vec<GtBox>,
    pub meta: LetterboxMeta,
    pub flipped: bool,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// `[N, 3, S, S]`.
    pub images: Tensor<f32>,
    pub targets: Vec<Vec<GtBox>>,
    pub metas: Vec<LetterboxMeta>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stack(samples: Vec<Sample>) -> Self {
        assert!(!samples.is_empty(), "cannot stack an empty batch");
        let shape = samples[0].image.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * samples[0].image.numel());
        let mut ids = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        let mut metas = Vec::with_capacity(samples.len());
        for s in samples {
            assert_eq!(s.image.shape(), &shape[..], "samples differ in shape");
            ids.push(s.id);
            data.extend_from_slice(s.image.data());
            targets.push(s.boxes);
            metas.push(s.meta);
        }
        let mut full = vec![ids.len()];
        full.extend(shape);
        Self {
            ids,
            images: Tensor::new(full, data).expect("stacked length matches"),
            targets,
            metas,
        }
    }
}

pub struct Dataset {
    pub index: DatasetIndex,
    pub decoder: Arc<dyn ImageDecoder>,
    pub input_size: u32,
}

impl Dataset {
    pub fn new(index: DatasetIndex, decoder: Arc<dyn ImageDecoder>, input_size: u32) -> Self {
        Self {
            index,
            decoder,
            input_size,
        }
    }

    pub fn from_files(index: DatasetIndex, input_size: u32) -> Self {
        Self::new(index, Arc::new(FileDecoder), input_size)
    }

    pub fn from_memory(index: DatasetIndex, images: Vec<RgbImage>, input_size: u32) -> Self {
        let decoder = MemoryDecoder::new(&index, images);
        Self::new(index, Arc::new(decoder), input_size)
    }

    pub fn len(&self) -> usize {
        self.index.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.images.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.index.class_names
    }

    /// Decodes and letterboxes image `i`.
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let rec = &self.index.images[i];
        let img = self.decoder.decode(rec)?;
        if img.dimensions() != (rec.width, rec.height) {
            return Err(DetError::Image {
                path: rec.path.clone(),
                msg: format!(
                    "decoded {}x{}, index says {}x{}",
                    img.width(),
                    img.height(),
                    rec.width,
                    rec.height
                ),
            });
        }
        let (image, meta) = letterbox(&img, self.input_size);
        Ok(Sample {
            id: i,
            image,
            boxes: meta.forward_boxes(&rec.boxes),
            meta,
            flipped: false,
        })
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order of one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0)));
    }
    order
}

/// Splits an order into batches, keeping a short last batch.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-sample augmentation seed.
pub fn sample_seed(seed: u64, epoch: usize, id: usize) -> u64 {
    mix(seed, epoch as u64 + 1, id as u64 + 1)
}

/// Worker count from `DSAFDET_NUM_WORKERS`, defaulting to the available
/// parallelism capped at four.
pub fn num_workers_from_env() -> usize {
    std::env::var("DSAFDET_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()).min(4))
}

#[derive(Clone, Copy, Debug)]
pub struct LoaderOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
    pub shuffle: bool,
    pub augment: AugmentConfig,
    pub workers: usize,
    /// Batches buffered ahead of the consumer.
    pub prefetch: usize,
}

impl LoaderOptions {
    /// Unshuffled, unaugmented order for evaluation.
    pub fn eval(batch_size: usize) -> Self {
        Self {
            batch_size,
            seed: 0,
            epoch: 0,
            shuffle: false,
            augment: AugmentConfig::disabled(),
            workers: num_workers_from_env(),
            prefetch: 2,
        }
    }
}

fn load_batch(ds: &Dataset, ids: &[usize], opts: &LoaderOptions) -> Result<Batch> {
    let load = |i: usize| -> Result<Sample> {
        let s = ds.sample(i)?;
        Ok(augment(s, &opts.augment, sample_seed(opts.seed, opts.epoch, i)))
    };
    let workers = opts.workers.clamp(1, ids.len().max(1));
    let samples: Vec<Result<Sample>> = if workers == 1 {
        ids.iter().map(|&i| load(i)).collect()
    } else {
        let chunk = ids.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = ids
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&i| load(i)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("loader worker panicked"))
                .collect()
        })
    };
    Ok(Batch::stack(samples.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Batches of one epoch in seed order, prepared on a background thread.
pub struct BatchLoader {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
    remaining: usize,
}

impl BatchLoader {
    pub fn new(ds: Arc<Dataset>, opts: LoaderOptions) -> Self {
        let order = epoch_order(ds.len(), opts.seed, opts.epoch, opts.shuffle);
        let plan = batch_indices(&order, opts.batch_size);
        let remaining = plan.len();
        let (tx, rx) = sync_channel(opts.prefetch.max(1));
        let handle = std::thread::spawn(move || {
            for ids in plan {
                let batch = load_batch(&ds, &ids, &opts);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
            remaining,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.remaining
    }
}

impl Iterator for BatchLoader {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        match self.rx.recv() {
            Ok(b) => {
                self.remaining = if b.is_err() { 0 } else { self.remaining - 1 };
                Some(b)
            }
            Err(_) => {
                self.remaining = 0;
                None
            }
        }
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        // unblock the producer before joining it
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Resolves the dataset split and wraps it with a file decoder.
pub fn open_split(root: &Path, split: &str, format: AnnotationFormat, input_size: u32) -> Result<Dataset> {
    Ok(Dataset::from_files(load_split(root, split, format)?, input_size))
}
