//! Generates a small labeled synthetic dataset on disk and reloads it.

use spectraseg::hsicube::{class_pixel_counts, generate_synthetic_dataset, DatasetIndex, SynthConfig};
use spectraseg::Modality;

fn main() -> spectraseg::Result<()> {
    let dir = std::env::temp_dir().join("spectraseg-example-synth");
    let cfg = SynthConfig {
        subjects: 3,
        images_per_subject: 2,
        width: 32,
        height: 32,
        seed: 7,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, &dir)?;

    let index = DatasetIndex::load(&dir)?;
    let classes = index.load_classes()?;
    println!("{} subjects, {} images, {} classes", index.subjects.len(), index.image_count(), classes.len());

    let subject = &index.subjects[0];
    let img = index.load_image(subject, &subject.images[0], Modality::Hsi, true)?;
    println!(
        "{}/{}: {}x{}x{} HSI, wavelengths {}..{} nm, RGB companion {}",
        img.subject,
        img.image,
        img.cube.width(),
        img.cube.height(),
        img.cube.channels(),
        img.cube.wavelengths()[0],
        img.cube.wavelengths()[img.cube.channels() - 1],
        img.rgb.is_some()
    );

    let ids: Vec<String> = index.subjects.iter().map(|s| s.id.clone()).collect();
    let counts = class_pixel_counts(&index, &ids, classes.len())?;
    for (id, n) in counts.iter().enumerate() {
        println!("  class {id} ({}): {n} px", classes.name(id as u8).unwrap_or("?"));
    }
    Ok(())
}
