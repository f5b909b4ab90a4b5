//! Rank stability of algorithms (`model#MODALITY`) across bootstrap samples
//! of test subjects, and deterministic mean-then-rank per metric.
//!
//! Ties receive average ranks. Bootstrap draws come from a single ChaCha8
//! stream seeded with `seed`: for every sample, `sample_size` subject indices
//! are drawn in turn with `gen_range(0..n)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// DSC and NSD are maximized, ASD minimized.
    pub fn for_metric(metric: &str) -> Option<Direction> {
        match metric.to_ascii_lowercase().as_str() {
            "dsc" | "nsd" => Some(Direction::Maximize),
            "asd" => Some(Direction::Minimize),
            _ => None,
        }
    }
}

/// One algorithm's per-subject values; every algorithm lists the same
/// subjects in the same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmScores {
    pub algorithm: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            sample_size: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmRanking {
    pub algorithm: String,
    /// Rank in every bootstrap sample, in sample order.
    pub ranks: Vec<f64>,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AlgorithmRanking {
    /// `(rank, count)` pairs in ascending rank order.
    pub fn histogram(&self) -> Vec<(f64, usize)> {
        let mut h: BTreeMap<u64, usize> = BTreeMap::new();
        for &r in &self.ranks {
            // Average ranks are multiples of 1/2.
            *h.entry((r * 2.0).round() as u64).or_default() += 1;
        }
        h.into_iter().map(|(k, c)| (k as f64 / 2.0, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub samples: usize,
    pub algorithms: Vec<AlgorithmRanking>,
}

impl RankingTable {
    pub fn get(&self, algorithm: &str) -> Option<&AlgorithmRanking> {
        self.algorithms.iter().find(|a| a.algorithm == algorithm)
    }

    /// Blob-plot data: `algorithm,rank,frequency`.
    pub fn blob_csv(&self) -> String {
        let mut s = String::from("algorithm,rank,frequency\n");
        for a in &self.algorithms {
            for (rank, count) in a.histogram() {
                let _ = writeln!(s, "{},{},{}", a.algorithm, rank, count as f64 / self.samples as f64);
            }
        }
        s
    }
}

/// Average (fractional) ranks, rank 1 being the best.
pub fn rank(values: &[f64], direction: Direction) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| match direction {
        Direction::Maximize => -values[i],
        Direction::Minimize => values[i],
    };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn check(scores: &[AlgorithmScores]) -> Result<usize> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Empty("no algorithms to rank".into()))?;
    let n = first.values.len();
    if n == 0 {
        return Err(Error::Empty(format!("{} has no subject values", first.algorithm)));
    }
    for a in scores {
        if a.values.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} has {} subject values, expected {n}",
                a.algorithm,
                a.values.len()
            )));
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("{} has missing or non-finite values", a.algorithm)));
        }
    }
    Ok(n)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Ranks algorithms on the given subject samples (index lists).
pub fn ranks_on_samples(scores: &[AlgorithmScores], samples: &[Vec<usize>], direction: Direction) -> Result<RankingTable> {
    let n = check(scores)?;
    if samples.is_empty() || samples.iter().any(|s| s.is_empty() || s.iter().any(|&i| i >= n)) {
        return Err(Error::InvalidData("bootstrap samples must be nonempty valid index lists".into()));
    }
    let mut per_alg = vec![Vec::with_capacity(samples.len()); scores.len()];
    for sample in samples {
        let means: Vec<f64> = scores
            .iter()
            .map(|a| sample.iter().map(|&i| a.values[i]).sum::<f64>() / sample.len() as f64)
            .collect();
        for (dst, r) in per_alg.iter_mut().zip(rank(&means, direction)) {
            dst.push(r);
        }
    }
    let algorithms = scores
        .iter()
        .zip(per_alg)
        .map(|(a, ranks)| {
            let mut sorted = ranks.clone();
            sorted.sort_by(f64::total_cmp);
            AlgorithmRanking {
                algorithm: a.algorithm.clone(),
                median: quantile(&sorted, 0.5),
                lower: quantile(&sorted, 0.025),
                upper: quantile(&sorted, 0.975),
                ranks,
            }
        })
        .collect();
    Ok(RankingTable {
        samples: samples.len(),
        algorithms,
    })
}

/// Subject index lists drawn with replacement.
pub fn bootstrap_samples(n_subjects: usize, cfg: &BootstrapConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_boot)
        .map(|_| (0..cfg.sample_size).map(|_| rng.gen_range(0..n_subjects)).collect())
        .collect()
}

/// Ranks of each algorithm's subject mean across bootstrap samples.
pub fn bootstrap_ranks(scores: &[AlgorithmScores], cfg: &BootstrapConfig, direction: Direction) -> Result<RankingTable> {
    let n = check(scores)?;
    if cfg.n_boot == 0 || cfg.sample_size == 0 {
        return Err(Error::Config("bootstrap needs n_boot ≥ 1 and sample_size ≥ 1".into()));
    }
    ranks_on_samples(scores, &bootstrap_samples(n, cfg), direction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRanking {
    pub metric: String,
    pub direction: Direction,
    /// `(algorithm, mean, rank)` in input order.
    pub entries: Vec<(String, f64, f64)>,
}

/// Subject means per algorithm, ranked within one metric.
pub fn mean_then_rank(metric: &str, scores: &[AlgorithmScores], direction: Direction) -> Result<MetricRanking> {
    let n = check(scores)?;
    let means: Vec<f64> = scores.iter().map(|a| a.values.iter().sum::<f64>() / n as f64).collect();
    let ranks = rank(&means, direction);
    Ok(MetricRanking {
        metric: metric.to_string(),
        direction,
        entries: scores
            .iter()
            .zip(means)
            .zip(ranks)
            .map(|((a, m), r)| (a.algorithm.clone(), m, r))
            .collect(),
    })
}

/// Line-plot data: `metric,algorithm,mean,rank`.
pub fn line_plot_csv(rankings: &[MetricRanking]) -> String {
    let mut s = String::from("metric,algorithm,mean,rank\n");
    for m in rankings {
        for (a, mean, r) in &m.entries {
            let _ = writeln!(s, "{},{},{},{}", m.metric, a, mean, r);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn alg(name: &str, values: Vec<f64>) -> AlgorithmScores {
        AlgorithmScores {
            algorithm: name.into(),
            values,
        }
    }

    #[test]
    fn average_ranks() {
        assert_eq!(rank(&[0.5, 0.9, 0.5, 0.1], Direction::Maximize), vec![2.5, 1.0, 2.5, 4.0]);
        assert_eq!(rank(&[3.0, 1.0, 2.0], Direction::Minimize), vec![3.0, 1.0, 2.0]);
        assert_eq!(rank(&[1.0, 1.0, 1.0], Direction::Maximize), vec![2.0; 3]);
    }

    #[test]
    fn single_algorithm_always_first() {
        let t = bootstrap_ranks(&[alg("a", vec![0.3, 0.5])], &BootstrapConfig::default(), Direction::Maximize).unwrap();
        assert_eq!(t.algorithms[0].histogram(), vec![(1.0, 1000)]);
    }

    #[test]
    fn dominant_algorithm_always_first() {
        let scores = vec![alg("weak", vec![0.1, 0.4, 0.2, 0.3]), alg("strong", vec![0.2, 0.5, 0.3, 0.35])];
        let t = bootstrap_ranks(&scores, &BootstrapConfig::default(), Direction::Maximize).unwrap();
        assert_eq!(t.get("strong").unwrap().histogram(), vec![(1.0, 1000)]);
        assert_eq!(t.get("strong").unwrap().median, 1.0);
        assert!(t.blob_csv().contains("strong,1,1\n"));
    }

    #[test]
    fn minimize_prefers_lower_means() {
        let scores = vec![alg("far", vec![5.0, 6.0]), alg("near", vec![1.0, 2.0])];
        let r = mean_then_rank("asd", &scores, Direction::Minimize).unwrap();
        assert_eq!(r.entries[1], ("near".to_string(), 1.5, 1.0));
    }

    #[test]
    fn identity_sample_reproduces_mean_then_rank() {
        let scores = vec![alg("a", vec![0.1, 0.9, 0.4]), alg("b", vec![0.5, 0.5, 0.5]), alg("c", vec![0.2, 0.3, 0.1])];
        let t = ranks_on_samples(&scores, &[vec![0, 1, 2]], Direction::Maximize).unwrap();
        let m = mean_then_rank("dsc", &scores, Direction::Maximize).unwrap();
        for (a, (_, _, r)) in t.algorithms.iter().zip(&m.entries) {
            assert_eq!(a.ranks, vec![*r]);
        }
    }

    #[test]
    fn missing_entries_are_rejected() {
        assert!(mean_then_rank("dsc", &[alg("a", vec![f64::NAN])], Direction::Maximize).is_err());
        assert!(mean_then_rank("dsc", &[alg("a", vec![1.0]), alg("b", vec![])], Direction::Maximize).is_err());
    }

    #[test]
    fn type7_quantiles() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert!((quantile(&[1.0, 2.0, 3.0, 4.0], 0.025) - 1.075).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_ranking(values in proptest::collection::vec(0.01f64..1.0, 12), seed in 0u64..50) {
            let a: Vec<AlgorithmScores> = values.chunks(4).enumerate().map(|(i, v)| alg(&format!("a{i}"), v.to_vec())).collect();
            let b: Vec<AlgorithmScores> = a.iter().map(|x| alg(&x.algorithm, x.values.iter().map(|v| v * 3.0 + 1.0).collect())).collect();
            let cfg = BootstrapConfig { n_boot: 50, sample_size: 4, seed };
            let ta = bootstrap_ranks(&a, &cfg, Direction::Maximize).unwrap();
            let tb = bootstrap_ranks(&b, &cfg, Direction::Maximize).unwrap();
            // Affine maps can merge near-ties only through rounding; compare histograms.
            for (x, y) in ta.algorithms.iter().zip(&tb.algorithms) {
                prop_assert_eq!(x.histogram(), y.histogram());
            }
        }

        #[test]
        fn ranks_sum_like_a_permutation(values in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let r = rank(&values, Direction::Maximize);
            let n = values.len() as f64;
            prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }
    }
}
