//! Subject-level splits, one fold with V_known / V_unknown tracking, and a
//! fold ensemble on the test subjects.

use spectraseg::experiments::{make_splits, run_fold, evaluate_models, DataAccess, SplitConfig};
use spectraseg::hsicube::{generate_synthetic_dataset, SynthConfig};
use spectraseg::models::{ModelKind, TrainConfig};

fn main() -> spectraseg::Result<()> {
    let dir = std::env::temp_dir().join("spectraseg-example-cv");
    let cfg = SynthConfig { subjects: 6, images_per_subject: 3, width: 32, height: 32, classes: 4, subject_shift: 0.3, ..SynthConfig::default() };
    let index = generate_synthetic_dataset(&cfg, &dir)?;

    let plan = make_splits(&index, &SplitConfig { k: 2, test_subjects: 2, candidates: 50, seed: 0 })?;
    plan.check()?;
    println!("test {:?}", plan.test);
    for (i, f) in plan.folds.iter().enumerate() {
        println!("fold {i}: train {:?} validation {:?} known {:?}", f.train, f.validation, f.known);
    }

    let data = DataAccess::new(index, None);
    let kind: ModelKind = "image#HSI".parse()?;
    let tcfg = TrainConfig { epochs: 12, scale: 0.05, classes: cfg.classes, workers: 2, ..TrainConfig::default() };
    let runs = (0..plan.folds.len())
        .map(|f| run_fold(&data, &plan, f, kind, &tcfg))
        .collect::<spectraseg::Result<Vec<_>>>()?;
    print!("{}", runs[0].trace.to_csv());
    println!("late gap (last 5 epochs): {:.4}", runs[0].trace.late_gap(5));

    let models: Vec<_> = runs.iter().map(|r| &r.outcome.best).collect();
    let test = data.load_all(&data.subset(&plan.test, &[])?, kind)?;
    let report = evaluate_models(&models, &test, None, None)?;
    println!("ensemble test DSC {:.4}", report.cohort_mean.dsc);
    Ok(())
}
