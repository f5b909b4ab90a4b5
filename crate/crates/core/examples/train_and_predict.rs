//! Trains a pixel-level HSI model at desk scale, saves it and scores its
//! predictions on held-out subjects.

use std::sync::Arc;

use spectraseg::dataload::MemorySource;
use spectraseg::experiments::evaluate_models;
use spectraseg::hsicube::{synthesize, LoadedImage, SynthConfig};
use spectraseg::models::{predict_image, train, Model, ModelKind, TrainConfig, ValidationSet};

fn main() -> spectraseg::Result<()> {
    let cfg = SynthConfig { subjects: 4, images_per_subject: 2, width: 24, height: 24, subject_shift: 0.0, ..SynthConfig::default() };
    let mut images: Vec<LoadedImage> = synthesize(&cfg)?
        .subjects
        .into_iter()
        .flat_map(|(sid, imgs)| {
            imgs.into_iter().map(move |i| LoadedImage { subject: sid.clone(), image: i.id, cube: i.hsi, rgb: None, labels: i.labels })
        })
        .collect();
    let test = images.split_off(6);
    let validation = vec![ValidationSet { name: "val".into(), images: images.split_off(4) }];

    let kind: ModelKind = "pixel#HSI".parse()?;
    let tcfg = TrainConfig { epochs: 4, scale: 0.01, classes: cfg.classes, workers: 2, ..TrainConfig::default() };
    let outcome = train(kind, &tcfg, Arc::new(MemorySource::new(images)), &validation)?;
    for e in &outcome.history {
        println!("epoch {}: loss {:.4}, val DSC {:.4}", e.epoch, e.train_loss, e.dsc["val"]);
    }
    println!("best epoch {:?}", outcome.best_epoch());

    let path = std::env::temp_dir().join("spectraseg-example-pixel.ckpt");
    outcome.best.save(&path)?;
    let model = Model::load(&path)?;
    let pred = predict_image(&model, &test[0].cube, None)?;
    println!("predicted {}x{} map with classes {:?}", pred.width(), pred.height(), pred.labels.classes_present());

    let report = evaluate_models(&[&model], &test, None, None)?;
    println!("test DSC {:.4}, ASD {:.3}", report.cohort_mean.dsc, report.cohort_mean.asd);
    Ok(())
}
