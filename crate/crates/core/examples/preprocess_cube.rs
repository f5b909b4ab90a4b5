//! ℓ1 normalization and the 5×5×3 median filter on one HSI cube.

use spectraseg::hsicube::{synthesize, SynthConfig};
use spectraseg::preprocess::{l1_normalize, preprocess, PreprocessOptions, StepOrder};

fn main() -> spectraseg::Result<()> {
    let cfg = SynthConfig {
        subjects: 1,
        images_per_subject: 1,
        width: 24,
        height: 24,
        noise_std: 0.05,
        illumination: 0.5,
        ..SynthConfig::default()
    };
    let ds = synthesize(&cfg)?;
    let cube = &ds.subjects[0].1[0].hsi;

    let sum = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>();
    println!("raw spectrum sum at (0,0): {:.3}", sum(cube.pixel(0, 0)));
    let n = l1_normalize(cube);
    println!("normalized sum at (0,0): {:.6}, zero spectra: {}", sum(n.cube.pixel(0, 0)), n.zero_spectra);

    for order in [StepOrder::NormalizeThenFilter, StepOrder::FilterThenNormalize] {
        let out = preprocess(cube, &PreprocessOptions { order, all_modalities: false });
        println!("{order:?}: value at (5,5,50) = {:.6}", out.cube.get(5, 5, 50));
    }

    // RGB passes through unchanged unless forced.
    let rgb = &ds.subjects[0].1[0].rgb;
    let same = preprocess(rgb, &PreprocessOptions::default()).cube == *rgb;
    println!("RGB untouched by default: {same}");
    Ok(())
}
