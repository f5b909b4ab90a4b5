//! Streams one epoch of patches through the multi-worker ring-buffer loader.

use std::sync::Arc;

use spectraseg::dataload::{stream_batches, LoaderConfig, MemorySource, PartsPolicy};
use spectraseg::hsicube::{synthesize, LoadedImage, SynthConfig};
use spectraseg::models::Granularity;
use spectraseg::superpixel::SlicParams;

fn main() -> spectraseg::Result<()> {
    let cfg = SynthConfig { subjects: 2, images_per_subject: 4, width: 64, height: 64, ..SynthConfig::default() };
    let images: Vec<LoadedImage> = synthesize(&cfg)?
        .subjects
        .into_iter()
        .flat_map(|(sid, imgs)| {
            imgs.into_iter().map(move |i| LoadedImage {
                subject: sid.clone(),
                image: i.id,
                cube: i.hsi,
                rgb: None,
                labels: i.labels,
            })
        })
        .collect();

    let loader = LoaderConfig { workers: 3, buffer_capacity: 4, batch_size: 6, epoch_size: 48, seed: 1, ..LoaderConfig::default() };
    let policy = PartsPolicy { classes: cfg.classes, pixels_per_image: None, superpixels: SlicParams::default() };
    let mut stream = stream_batches(&loader, Arc::new(MemorySource::new(images)), Granularity::Patch32, policy, 0)?;
    println!("{} batches of {} patches", stream.len(), loader.batch_size);
    for batch in stream.by_ref() {
        let batch = batch?;
        let per_worker: Vec<usize> = batch.parts.iter().map(|p| p.samples.len()).collect();
        println!("batch {}: per-worker samples {per_worker:?}", batch.index);
    }
    println!("{}", stream.stats().to_json());
    Ok(())
}
