//! DSC, ASD and NSD on hand-made maps, tolerances from two raters and the
//! class → image → subject → cohort aggregation.

use spectraseg::metrics::{aggregate, asd, dsc, estimate_thresholds, evaluate_image, nsd, ImageEntry, ThresholdAggregation};
use spectraseg::LabelMap;

fn square(w: usize, x0: usize, y0: usize, side: usize) -> LabelMap {
    let labels = (0..w * w)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            u8::from((x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y))
        })
        .collect();
    LabelMap::new(w, w, labels).unwrap()
}

fn main() -> spectraseg::Result<()> {
    let reference = square(16, 4, 4, 6);
    let pred = square(16, 5, 4, 6);
    println!("DSC {:.4}", dsc(&pred, &reference, 1)?);
    println!("ASD {:.4}", asd(&pred, &reference, 1)?.unwrap());
    println!("NSD(τ=1) {:.4}", nsd(&pred, &reference, 1, 1.0)?);

    // A second rater that is one pixel off sets the class tolerance.
    let tau = estimate_thresholds(&[(reference.clone(), square(16, 4, 5, 6))], ThresholdAggregation::Mean)?;
    println!("tolerances {:?}", tau.tau);

    let entries = ["a", "b"]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = square(16, 4 + i, 4, 6);
            Ok(ImageEntry { subject: s.to_string(), image: "0".into(), classes: evaluate_image(&p, &reference, Some(&tau))? })
        })
        .collect::<spectraseg::Result<Vec<_>>>()?;
    let report = aggregate(entries)?;
    println!("cohort mean {:?} sd {:?}", report.cohort_mean, report.cohort_sd);
    print!("{}", report.to_csv());
    Ok(())
}
