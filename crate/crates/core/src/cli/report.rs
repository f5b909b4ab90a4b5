//! Collation of metric reports into plain tables: per-subject box data,
//! bootstrap rank blobs, rank-across-metrics lines and quantile example
//! images. Optional gnuplot scripts read those tables back.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::metrics::{MetricReport, MetricTriple};
use crate::ranking::{bootstrap_ranks, line_plot_csv, mean_then_rank, AlgorithmScores, BootstrapConfig, Direction, RankingTable};
use crate::{Error, Result};

pub const METRICS: [&str; 3] = ["dsc", "asd", "nsd"];
pub const EXAMPLE_QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Per-subject values of `metric` for every algorithm, checking that all
/// reports cover the same subjects in the same order. `None` if any report
/// lacks the metric.
pub fn algorithm_scores(reports: &[(String, MetricReport)], metric: &str) -> Result<Option<Vec<AlgorithmScores>>> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Empty("no reports given".into()));
    };
    let subjects: Vec<&str> = first.subjects.iter().map(|s| s.subject.as_str()).collect();
    let mut out = Vec::new();
    for (name, r) in reports {
        let these: Vec<&str> = r.subjects.iter().map(|s| s.subject.as_str()).collect();
        if these != subjects {
            return Err(Error::InvalidData(format!("report {name} covers different subjects")));
        }
        match r.subject_values(metric) {
            Some(values) => out.push(AlgorithmScores {
                algorithm: name.clone(),
                values,
            }),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `algorithm,subject,dsc,asd,nsd`.
pub fn box_table(reports: &[(String, MetricReport)]) -> String {
    let mut s = String::from("algorithm,subject,dsc,asd,nsd\n");
    for (name, r) in reports {
        for sub in &r.subjects {
            let _ = writeln!(s, "{name},{},{},{},{}", sub.subject, sub.mean.dsc, sub.mean.asd, fmt_opt(sub.mean.nsd));
        }
    }
    s
}

pub fn bootstrap_tables(reports: &[(String, MetricReport)], cfg: &BootstrapConfig) -> Result<Vec<(String, RankingTable)>> {
    let mut out = Vec::new();
    for m in METRICS {
        if let Some(scores) = algorithm_scores(reports, m)? {
            let dir = Direction::for_metric(m).expect("known metric");
            out.push((m.to_string(), bootstrap_ranks(&scores, cfg, dir)?));
        }
    }
    Ok(out)
}

pub fn ranking_lines(reports: &[(String, MetricReport)]) -> Result<String> {
    let mut rankings = Vec::new();
    for m in METRICS {
        if let Some(scores) = algorithm_scores(reports, m)? {
            rankings.push(mean_then_rank(m, &scores, Direction::for_metric(m).expect("known metric"))?);
        }
    }
    Ok(line_plot_csv(&rankings))
}

/// Images at the given quantiles of the algorithm-averaged image DSC, with
/// every algorithm's scores on them: `quantile,subject,image,algorithm,dsc,asd,nsd`.
/// Only images scored by every algorithm take part.
pub fn image_examples(reports: &[(String, MetricReport)], quantiles: &[f64]) -> Result<String> {
    let mut by_image: BTreeMap<(String, String), Vec<Option<MetricTriple>>> = BTreeMap::new();
    for (a, (_, r)) in reports.iter().enumerate() {
        for (img, m) in r.images.iter().zip(&r.image_means) {
            let row = by_image
                .entry((img.subject.clone(), img.image.clone()))
                .or_insert_with(|| vec![None; reports.len()]);
            row[a] = *m;
        }
    }
    let mut ranked: Vec<((String, String), f64, Vec<MetricTriple>)> = by_image
        .into_iter()
        .filter_map(|(k, v)| {
            let v: Option<Vec<MetricTriple>> = v.into_iter().collect();
            v.map(|v| {
                let mean = v.iter().map(|m| m.dsc).sum::<f64>() / v.len() as f64;
                (k, mean, v)
            })
        })
        .collect();
    if ranked.is_empty() {
        return Err(Error::Empty("no image is scored by every algorithm".into()));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut s = String::from("quantile,subject,image,algorithm,dsc,asd,nsd\n");
    for &q in quantiles {
        let i = (q.clamp(0.0, 1.0) * (ranked.len() - 1) as f64).round() as usize;
        let ((subject, image), _, scores) = &ranked[i];
        for ((name, _), m) in reports.iter().zip(scores) {
            let _ = writeln!(s, "{q},{subject},{image},{name},{},{},{}", m.dsc, m.asd, fmt_opt(m.nsd));
        }
    }
    Ok(s)
}

/// Mean and sample SD of DSC per `(kind, n)` from a size-study CSV.
pub fn datasize_summary(csv: &str) -> Result<String> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for (i, line) in csv.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = || -> Option<(String, usize, f64)> { Some((f.first()?.to_string(), f.get(1)?.parse().ok()?, f.get(3)?.parse().ok()?)) };
        let (kind, n, dsc) = parse().ok_or_else(|| Error::InvalidData(format!("size-study line {} is malformed", i + 1)))?;
        groups.entry((kind, n)).or_default().push(dsc);
    }
    let mut s = String::from("kind,n,runs,dsc_mean,dsc_sd\n");
    for ((kind, n), v) in groups {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(s, "{kind},{n},{},{mean},{sd}", v.len());
    }
    Ok(s)
}

pub fn gnuplot_box(metric: &str, column: usize) -> String {
    format!(
        "set datafile separator ','\nset style data boxplot\nset ylabel '{metric}'\nset xtics rotate by -45\n\
         plot 'box.csv' every ::1 using (0):{column}:(0.5):1 notitle\n"
    )
}

pub fn gnuplot_blob(metric: &str) -> String {
    format!(
        "set datafile separator ','\nset ylabel 'rank'\nset title 'bootstrap ranks ({metric})'\n\
         plot 'ranking_{metric}.csv' every ::1 using 0:2:($3*5):xtic(1) with points pt 7 ps variable notitle\n"
    )
}

pub fn gnuplot_lines() -> String {
    "set datafile separator ','\nset ylabel 'rank'\nset yrange [*:*] reverse\n\
     plot for [a in system(\"tail -n +2 ranking_metrics.csv | cut -d, -f2 | sort -u\")] \
     '< grep ,'.a.', ranking_metrics.csv' using 0:4:xtic(1) with linespoints title a\n"
        .to_string()
}
