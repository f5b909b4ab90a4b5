//! Rank stability of three algorithms under bootstrap resampling of subjects,
//! and mean-then-rank across metrics.

use spectraseg::ranking::{bootstrap_ranks, line_plot_csv, mean_then_rank, AlgorithmScores, BootstrapConfig, Direction};

fn main() -> spectraseg::Result<()> {
    let dsc = vec![
        AlgorithmScores { algorithm: "image".into(), values: vec![0.92, 0.90, 0.95, 0.91, 0.93] },
        AlgorithmScores { algorithm: "patch_64".into(), values: vec![0.90, 0.91, 0.92, 0.88, 0.90] },
        AlgorithmScores { algorithm: "pixel".into(), values: vec![0.80, 0.85, 0.83, 0.79, 0.84] },
    ];
    let asd = vec![
        AlgorithmScores { algorithm: "image".into(), values: vec![3.0, 4.1, 2.5, 3.3, 2.9] },
        AlgorithmScores { algorithm: "patch_64".into(), values: vec![3.5, 3.9, 3.1, 4.2, 3.6] },
        AlgorithmScores { algorithm: "pixel".into(), values: vec![9.0, 7.5, 8.2, 10.1, 8.8] },
    ];

    let table = bootstrap_ranks(&dsc, &BootstrapConfig { n_boot: 1000, sample_size: 5, seed: 0 }, Direction::Maximize)?;
    for a in &table.algorithms {
        println!("{}: median rank {} [{}, {}]", a.algorithm, a.median, a.lower, a.upper);
    }
    print!("{}", table.blob_csv());

    let lines = [
        mean_then_rank("dsc", &dsc, Direction::Maximize)?,
        mean_then_rank("asd", &asd, Direction::Minimize)?,
    ];
    print!("{}", line_plot_csv(&lines));
    Ok(())
}
