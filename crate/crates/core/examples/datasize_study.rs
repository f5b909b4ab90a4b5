//! Test performance as a function of the number of training subjects.

use spectraseg::experiments::{make_splits, run_datasize_study, DataAccess, DataSizeConfig, SplitConfig};
use spectraseg::hsicube::{generate_synthetic_dataset, SynthConfig};
use spectraseg::models::{ModelKind, TrainConfig};

fn main() -> spectraseg::Result<()> {
    let dir = std::env::temp_dir().join("spectraseg-example-datasize");
    let cfg = SynthConfig { subjects: 6, images_per_subject: 2, width: 32, height: 32, classes: 4, subject_shift: 0.3, ..SynthConfig::default() };
    let index = generate_synthetic_dataset(&cfg, &dir)?;
    let plan = make_splits(&index, &SplitConfig { k: 2, test_subjects: 2, candidates: 50, seed: 0 })?;

    let kind: ModelKind = "image#HSI".parse()?;
    let tcfg = TrainConfig { epochs: 8, scale: 0.05, classes: cfg.classes, workers: 2, ..TrainConfig::default() };
    let study = DataSizeConfig { n_values: Some(vec![1, 2, 3]), repeats: 2, seed: 0 };
    let results = run_datasize_study(&DataAccess::new(index, None), &plan, &[kind], &tcfg, &study, None)?;
    println!("scored classes {:?}", results.classes);
    for (n, dsc) in results.curve(kind) {
        println!("n = {n}: mean DSC {dsc:.4}");
    }
    print!("{}", results.to_csv());
    Ok(())
}
