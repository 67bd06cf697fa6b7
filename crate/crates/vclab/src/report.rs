//! Evaluation reports as JSON, CSV and SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vclab_core::eval::EvalReport;
use vclab_core::phoneme_prior::LatentSeq;

use crate::codec::write_file;
use crate::corpus_io::write_json;
use crate::error::Result;
use crate::svg::{scatter_chart, Series};

/// Candidate minus baseline for every scalar metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub nearest_gaussian_accuracy: f64,
    /// `None` when either ratio is infinite.
    pub scatter_ratio: Option<f64>,
    pub mean_mahalanobis: f64,
    pub mcd: f64,
    pub domain_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub baseline: EvalReport,
    pub candidate: EvalReport,
    pub delta: MetricDeltas,
}

impl PairedReport {
    pub fn new(baseline: EvalReport, candidate: EvalReport) -> Self {
        let delta = MetricDeltas {
            nearest_gaussian_accuracy: candidate.nearest_gaussian_accuracy - baseline.nearest_gaussian_accuracy,
            scatter_ratio: baseline.scatter_ratio.zip(candidate.scatter_ratio).map(|(b, c)| c - b),
            mean_mahalanobis: candidate.mean_mahalanobis - baseline.mean_mahalanobis,
            mcd: candidate.mcd - baseline.mcd,
            domain_accuracy: candidate.domain_accuracy - baseline.domain_accuracy,
        };
        PairedReport { baseline, candidate, delta }
    }
}

fn ratio_text(r: Option<f64>) -> String {
    r.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

/// One row per labelled report; an infinite scatter ratio is written as `inf`.
pub fn metrics_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from(
        "label,utterances,latent_frames,nearest_gaussian_accuracy,scatter_ratio,mean_mahalanobis,mcd,domain_accuracy\n",
    );
    for (label, r) in rows {
        writeln!(
            s,
            "{label},{},{},{},{},{},{},{}",
            r.utterances,
            r.latent_frames,
            r.nearest_gaussian_accuracy,
            ratio_text(r.scatter_ratio),
            r.mean_mahalanobis,
            r.mcd,
            r.domain_accuracy
        )
        .unwrap();
    }
    s
}

/// `true` phoneme rows against `predicted` phoneme columns.
pub fn confusion_csv(r: &EvalReport, names: &[String]) -> String {
    let mut s = String::from("true");
    for n in names {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for (name, row) in names.iter().zip(&r.confusion.counts) {
        s.push_str(name);
        for c in row {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// First two latent dimensions, one colour per phoneme.
pub fn latent_scatter(latents: &[LatentSeq], labels: &[Vec<usize>], names: &[String]) -> String {
    let mut series: Vec<Series> = names.iter().map(|n| Series { name: n.clone(), points: Vec::new() }).collect();
    for (y, lab) in latents.iter().zip(labels) {
        if y.dim() < 2 {
            continue;
        }
        for (t, &p) in lab.iter().enumerate().take(y.frames()) {
            let f = y.frame(t);
            series[p].points.push((f[0], f[1]));
        }
    }
    scatter_chart("latent dimensions 1 and 2", &series)
}

pub fn write_eval_outputs(dir: &Path, report: &EvalReport, names: &[String], scatter: Option<&str>) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_file(&dir.join("report.csv"), metrics_csv(&[("model", report)]).as_bytes())?;
    write_file(&dir.join("confusion.csv"), confusion_csv(report, names).as_bytes())?;
    if let Some(svg) = scatter {
        write_file(&dir.join("latents.svg"), svg.as_bytes())?;
    }
    Ok(())
}

pub fn write_paired_outputs(dir: &Path, paired: &PairedReport) -> Result<()> {
    write_json(&dir.join("paired_report.json"), paired)?;
    let csv = metrics_csv(&[("baseline", &paired.baseline), ("candidate", &paired.candidate)]);
    write_file(&dir.join("paired_report.csv"), csv.as_bytes())
}
