//! Streaming multi-worker loader.
//!
//! Every worker owns a disjoint share of the training images, decodes one
//! image at a time, augments it, cuts it into parts and contributes exactly
//! `batch_size / workers` samples to each batch. Batches travel through a
//! fixed ring of slots: batch `k` lives in slot `k % capacity`, and a worker
//! blocks until the consumer has released the slot's previous batch.
//!
//! The sample stream of a worker depends only on `(seed, epoch, worker)` and
//! the image ids, never on thread timing, so runs are reproducible.

pub mod augment;
mod parts;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::hsicube::{DatasetIndex, LoadedImage, Modality};
use crate::models::Granularity;
use crate::preprocess::{preprocess, PreprocessOptions};
use crate::rng::rng_for;
use crate::{Error, Result};

pub use augment::{AugmentParams, Flip};
pub use parts::{extract_parts, grid_tiles, PartsPolicy, Sample};
pub(crate) use parts::crop;

const PARTITION_STREAM: u64 = 0x5041_5254;
const AUGMENT_STREAM: u64 = 0x4155_474d;
const PARTS_STREAM: u64 = 0x5041_5253;

/// Anything the workers can decode images from.
pub trait ImageSource: Send + Sync {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<LoadedImage>;
    /// Stable id used to derive per-image random streams.
    fn image_key(&self, i: usize) -> u64 {
        i as u64
    }
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images kept in memory; `load` hands out clones.
pub struct MemorySource {
    images: Vec<LoadedImage>,
}

impl MemorySource {
    pub fn new(images: Vec<LoadedImage>) -> Self {
        Self { images }
    }

    pub fn images(&self) -> &[LoadedImage] {
        &self.images
    }
}

impl ImageSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn load(&self, i: usize) -> Result<LoadedImage> {
        Ok(self.images[i].clone())
    }
}

/// Images decoded from a dataset directory on demand, optionally preprocessed.
pub struct DiskSource {
    index: DatasetIndex,
    entries: Vec<(usize, usize)>,
    modality: Modality,
    with_rgb: bool,
    preprocess: Option<PreprocessOptions>,
}

impl DiskSource {
    /// Every image of every subject in `index`, in index order.
    pub fn new(
        index: DatasetIndex,
        modality: Modality,
        with_rgb: bool,
        preprocess: Option<PreprocessOptions>,
    ) -> Self {
        let entries = index
            .subjects
            .iter()
            .enumerate()
            .flat_map(|(s, sub)| (0..sub.images.len()).map(move |i| (s, i)))
            .collect();
        Self {
            index,
            entries,
            modality,
            with_rgb,
            preprocess,
        }
    }
}

impl ImageSource for DiskSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn load(&self, i: usize) -> Result<LoadedImage> {
        let (s, r) = self.entries[i];
        let sub = &self.index.subjects[s];
        let mut img = self
            .index
            .load_image(sub, &sub.images[r], self.modality, self.with_rgb)?;
        if let Some(opts) = &self.preprocess {
            img.cube = preprocess(&img.cube, opts).cube;
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoaderConfig {
    pub workers: usize,
    /// Ring size in batches.
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Samples per epoch.
    pub epoch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Pixel kind only: cap on pixels drawn per image and pass.
    pub pixels_per_image: Option<usize>,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            workers: 12,
            buffer_capacity: 4,
            batch_size: 12,
            epoch_size: 1200,
            seed: 0,
            augment: true,
            pixels_per_image: None,
        }
    }
}

impl LoaderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return bad("loader needs at least one worker".into());
        }
        if self.batch_size == 0 || self.batch_size % self.workers != 0 {
            return bad(format!(
                "batch size {} is not a positive multiple of the worker count {}",
                self.batch_size, self.workers
            ));
        }
        if self.buffer_capacity < 2 {
            return bad(format!("buffer capacity {} < 2", self.buffer_capacity));
        }
        if self.epoch_size == 0 || self.epoch_size % self.batch_size != 0 {
            return bad(format!(
                "epoch size {} is not a positive multiple of the batch size {}",
                self.epoch_size, self.batch_size
            ));
        }
        Ok(())
    }

    pub fn samples_per_worker(&self) -> usize {
        self.batch_size / self.workers
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.epoch_size / self.batch_size
    }
}

/// Splits image indices `0..n` into one list per worker. The order is a
/// seeded permutation that changes every epoch; images are dealt round-robin.
/// With fewer images than workers, workers share images.
pub fn partition_images(n: usize, workers: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || workers == 0 {
        return Err(Error::Empty("cannot partition zero images or workers".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[PARTITION_STREAM, epoch]));
    let mut out = vec![Vec::new(); workers];
    if n < workers {
        log::warn!("{n} images for {workers} workers: workers share images");
        for (j, list) in out.iter_mut().enumerate() {
            list.push(order[j % n]);
        }
    } else {
        for (i, img) in order.into_iter().enumerate() {
            out[i % workers].push(img);
        }
    }
    Ok(out)
}

/// The samples one worker contributes to one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPart {
    pub worker: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub index: usize,
    /// One part per worker, in worker order.
    pub parts: Vec<BatchPart>,
}

impl Batch {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.parts.iter().flat_map(|p| p.samples.iter())
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.parts.into_iter().flat_map(|p| p.samples).collect()
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Instrumentation counters for one epoch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderStats {
    pub batches: usize,
    pub samples: usize,
    pub per_worker_samples: Vec<usize>,
    pub peak_resident_images: usize,
    pub images_loaded: usize,
    /// Times a producer found its slot still occupied.
    pub producer_waits: usize,
}

impl LoaderStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

struct Slot {
    /// Batch this slot currently accepts.
    batch: usize,
    parts: Vec<Option<BatchPart>>,
}

struct RingState {
    slots: Vec<Slot>,
    failure: Option<(usize, String)>,
    closed: bool,
    producer_waits: usize,
}

struct Shared {
    state: Mutex<RingState>,
    changed: Condvar,
    resident: AtomicUsize,
    peak_resident: AtomicUsize,
    images_loaded: AtomicUsize,
}

impl Shared {
    fn fail(&self, worker: usize, detail: String) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        st.failure.get_or_insert((worker, detail));
        self.changed.notify_all();
    }

    /// Blocks until slot `batch % cap` accepts `batch`; `false` if the stream
    /// was closed or failed meanwhile.
    fn put(&self, batch: usize, part: BatchPart) -> bool {
        let mut st = self.state.lock().unwrap();
        let cap = st.slots.len();
        let mut waited = false;
        while st.slots[batch % cap].batch != batch && !st.closed && st.failure.is_none() {
            if !waited {
                st.producer_waits += 1;
                waited = true;
            }
            st = self.changed.wait(st).unwrap();
        }
        if st.closed || st.failure.is_some() {
            return false;
        }
        let w = part.worker;
        st.slots[batch % cap].parts[w] = Some(part);
        self.changed.notify_all();
        true
    }

    fn take(&self, batch: usize) -> Result<Batch> {
        let mut st = self.state.lock().unwrap();
        let cap = st.slots.len();
        loop {
            if let Some((worker, detail)) = &st.failure {
                return Err(Error::Worker {
                    worker: *worker,
                    detail: detail.clone(),
                });
            }
            let slot = &st.slots[batch % cap];
            if slot.batch == batch && slot.parts.iter().all(Option::is_some) {
                break;
            }
            st = self.changed.wait(st).unwrap();
        }
        let slot = &mut st.slots[batch % cap];
        let parts = slot.parts.iter_mut().map(|p| p.take().expect("filled")).collect();
        slot.batch = batch + cap;
        self.changed.notify_all();
        Ok(Batch { index: batch, parts })
    }
}

/// Records a panicking worker as a stream failure instead of a deadlock.
struct PanicGuard<'a> {
    shared: &'a Shared,
    worker: usize,
}

impl Drop for PanicGuard<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.shared.fail(self.worker, "worker panicked".into());
        }
    }
}

/// Keeps the residency gauge honest: counts one decoded image while alive.
struct Resident<'a>(&'a Shared);

impl<'a> Resident<'a> {
    fn new(shared: &'a Shared) -> Self {
        let now = shared.resident.fetch_add(1, Ordering::SeqCst) + 1;
        shared.peak_resident.fetch_max(now, Ordering::SeqCst);
        shared.images_loaded.fetch_add(1, Ordering::SeqCst);
        Resident(shared)
    }
}

impl Drop for Resident<'_> {
    fn drop(&mut self) {
        self.0.resident.fetch_sub(1, Ordering::SeqCst);
    }
}

struct WorkerJob {
    worker: usize,
    images: Vec<usize>,
    cfg: LoaderConfig,
    epoch: u64,
    granularity: Granularity,
    policy: PartsPolicy,
}

fn run_worker(job: WorkerJob, source: &dyn ImageSource, shared: &Shared) -> Result<usize> {
    let per_batch = job.cfg.samples_per_worker();
    let batches = job.cfg.batches_per_epoch();
    let policy = PartsPolicy {
        pixels_per_image: job.cfg.pixels_per_image,
        ..job.policy
    };
    let mut pending: Vec<Sample> = Vec::new();
    let mut produced = 0;
    let mut pass = 0u64;
    let mut cursor = 0usize;
    let mut empty_streak = 0usize;
    for b in 0..batches {
        while pending.len() < per_batch {
            if cursor == job.images.len() {
                cursor = 0;
                pass += 1;
            }
            let i = job.images[cursor];
            cursor += 1;
            let key = source.image_key(i);
            let samples = {
                let _resident = Resident::new(shared);
                let img = source.load(i)?;
                let img = if job.cfg.augment {
                    let mut rng = rng_for(job.cfg.seed, &[AUGMENT_STREAM, job.epoch, key, pass]);
                    augment::augment_image(img, &AugmentParams::sample(&mut rng))
                } else {
                    img
                };
                let mut rng = rng_for(job.cfg.seed, &[PARTS_STREAM, job.epoch, key, pass]);
                extract_parts(&img, job.granularity, &policy, &mut rng)?
            };
            if samples.is_empty() {
                empty_streak += 1;
                if empty_streak >= job.images.len() {
                    return Err(Error::InvalidData(format!(
                        "worker {} images yield no samples",
                        job.worker
                    )));
                }
            } else {
                empty_streak = 0;
            }
            pending.extend(samples);
        }
        let rest = pending.split_off(per_batch);
        let samples = std::mem::replace(&mut pending, rest);
        produced += samples.len();
        if !shared.put(b, BatchPart { worker: job.worker, samples }) {
            break;
        }
    }
    Ok(produced)
}

/// Iterator over the batches of one epoch.
pub struct BatchStream {
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<usize>>,
    next: usize,
    total: usize,
    stats: LoaderStats,
    done: bool,
}

/// Starts the workers for `epoch` and returns the batch stream.
pub fn stream_batches(
    cfg: &LoaderConfig,
    source: Arc<dyn ImageSource>,
    granularity: Granularity,
    policy: PartsPolicy,
    epoch: u64,
) -> Result<BatchStream> {
    cfg.validate()?;
    let lists = partition_images(source.len(), cfg.workers, cfg.seed, epoch)?;
    let cap = cfg.buffer_capacity;
    let shared = Arc::new(Shared {
        state: Mutex::new(RingState {
            slots: (0..cap)
                .map(|k| Slot {
                    batch: k,
                    parts: vec![None; cfg.workers],
                })
                .collect(),
            failure: None,
            closed: false,
            producer_waits: 0,
        }),
        changed: Condvar::new(),
        resident: AtomicUsize::new(0),
        peak_resident: AtomicUsize::new(0),
        images_loaded: AtomicUsize::new(0),
    });
    let mut handles = Vec::with_capacity(cfg.workers);
    for (worker, images) in lists.into_iter().enumerate() {
        let job = WorkerJob {
            worker,
            images,
            cfg: *cfg,
            epoch,
            granularity,
            policy,
        };
        let (shared, source) = (Arc::clone(&shared), Arc::clone(&source));
        let handle = thread::Builder::new()
            .name(format!("loader-{worker}"))
            .spawn(move || {
                let _guard = PanicGuard {
                    shared: &shared,
                    worker,
                };
                match run_worker(job, source.as_ref(), &shared) {
                    Ok(n) => n,
                    Err(e) => {
                        shared.fail(worker, e.to_string());
                        0
                    }
                }
            })
            .map_err(|e| Error::Worker {
                worker,
                detail: e.to_string(),
            })?;
        handles.push(handle);
    }
    Ok(BatchStream {
        shared,
        handles,
        next: 0,
        total: cfg.batches_per_epoch(),
        stats: LoaderStats {
            per_worker_samples: vec![0; cfg.workers],
            ..Default::default()
        },
        done: false,
    })
}

impl BatchStream {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Counters so far; complete once the stream is exhausted.
    pub fn stats(&self) -> LoaderStats {
        let mut s = self.stats.clone();
        s.peak_resident_images = self.shared.peak_resident.load(Ordering::SeqCst);
        s.images_loaded = self.shared.images_loaded.load(Ordering::SeqCst);
        s.producer_waits = self.shared.state.lock().map(|st| st.producer_waits).unwrap_or(0);
        s
    }

    fn shutdown(&mut self) {
        if let Ok(mut st) = self.shared.state.lock() {
            st.closed = true;
        }
        self.shared.changed.notify_all();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.next == self.total {
            if !self.done {
                self.done = true;
                self.shutdown();
            }
            return None;
        }
        match self.shared.take(self.next) {
            Ok(batch) => {
                self.next += 1;
                self.stats.batches += 1;
                for p in &batch.parts {
                    self.stats.samples += p.samples.len();
                    self.stats.per_worker_samples[p.worker] += p.samples.len();
                }
                Some(Ok(batch))
            }
            Err(e) => {
                self.done = true;
                self.shutdown();
                Some(Err(e))
            }
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        self.shutdown();
    }
}
