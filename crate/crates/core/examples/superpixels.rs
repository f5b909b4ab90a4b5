//! SLICO superpixels, fuzzy labels, superpixel cubes and the modal-label
//! performance limit.

use spectraseg::hsicube::{synthesize, SynthConfig};
use spectraseg::metrics::dsc;
use spectraseg::superpixel::{extract_superpixel_cube, fuzzy_labels, slico, superpixel_performance_limit, SlicParams};

fn main() -> spectraseg::Result<()> {
    let cfg = SynthConfig {
        subjects: 1,
        images_per_subject: 1,
        width: 64,
        height: 48,
        ..SynthConfig::default()
    };
    let ds = synthesize(&cfg)?;
    let img = &ds.subjects[0].1[0];

    let params = SlicParams { n_segments: 40, sigma: 1.0, ..SlicParams::default() };
    let dec = slico(&img.rgb, &params)?;
    println!("{} superpixels on {}x{}", dec.len(), dec.width(), dec.height());

    let fuzzy = fuzzy_labels(&dec, &img.labels, cfg.classes)?;
    let mixed = fuzzy.iter().filter(|f| f.counts().iter().filter(|&&c| c > 0).count() > 1).count();
    println!("{mixed} superpixels straddle a class border");

    let sp = extract_superpixel_cube(&img.hsi, &dec, 0)?;
    println!("superpixel 0 resized to {}x{}x{}", sp.width(), sp.height(), sp.channels());

    let limit = superpixel_performance_limit(&dec, &img.labels)?;
    for o in img.labels.classes_present() {
        println!("class {o}: best achievable DSC {:.4}", dsc(&limit, &img.labels, o)?);
    }
    Ok(())
}
