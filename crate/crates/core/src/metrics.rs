//! Discrimination and calibration metrics under two sampling protocols.
//!
//! The mean protocol scores each patient by the mean of its predictive samples.
//! The CI protocol evaluates one metric set per sample index ("round") and
//! reports the mean and the 2.5/97.5 percentile interval across rounds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictive::{running_mean, PredictiveDistribution};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_ROUNDS: usize = 30;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Mann-Whitney estimate of the area under the ROC curve; tied pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: precision at each recall step, weighted by the recall gained.
/// Tied scores are processed as one threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::InvalidInput("average precision needs a positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let before = tp;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            }
            seen += 1;
            j += 1;
        }
        if tp > before {
            ap += (tp - before) as f64 / n_pos as f64 * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_low: f64,
    pub bin_high: f64,
    /// Absent for empty bins.
    pub mean_predicted: Option<f64>,
    pub observed_rate: Option<f64>,
    pub count: usize,
}

impl CalibrationBin {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Equal-width bins on [0, 1]; a score of exactly 1 falls in the last bin.
pub fn calibration_curve(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    check_lengths(scores, labels)?;
    if n_bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {n_bins}")));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("score {s} outside [0, 1]")));
    }
    let mut sum_p = vec![0.0; n_bins];
    let mut pos = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        sum_p[b] += s;
        count[b] += 1;
        pos[b] += l as usize;
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b];
            CalibrationBin {
                bin_low: b as f64 / n_bins as f64,
                bin_high: (b + 1) as f64 / n_bins as f64,
                mean_predicted: (n > 0).then(|| sum_p[b] / n as f64),
                observed_rate: (n > 0).then(|| pos[b] as f64 / n as f64),
                count: n,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Mean30,
    Ci30,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricIntervals {
    pub auroc: Interval,
    pub auprc: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub protocol: Protocol,
    pub n: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub calibration_bins: Vec<CalibrationBin>,
    pub ci: Option<MetricIntervals>,
    /// Number of (AUROC, AUPRC) evaluations performed to build the report.
    pub n_metric_evaluations: usize,
}

fn check_distributions(dists: &[PredictiveDistribution], labels: &[bool]) -> Result<()> {
    if dists.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} distributions but {} labels",
            dists.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn evaluate_mean_protocol(
    dists: &[PredictiveDistribution],
    labels: &[bool],
    n_bins: usize,
) -> Result<EvaluationReport> {
    check_distributions(dists, labels)?;
    let means: Vec<f64> = dists.iter().map(PredictiveDistribution::mean).collect();
    Ok(EvaluationReport {
        protocol: Protocol::Mean30,
        n: labels.len(),
        auroc: auroc(&means, labels)?,
        auprc: auprc(&means, labels)?,
        calibration_bins: calibration_curve(&means, labels, n_bins)?,
        ci: None,
        n_metric_evaluations: 1,
    })
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn interval(values: &[f64]) -> Interval {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Interval {
        low: percentile(&v, 2.5),
        high: percentile(&v, 97.5),
    }
}

/// Round `r` scores every patient by its `r`-th sample. Calibration uses the
/// per-patient sample means.
pub fn evaluate_ci_protocol(
    dists: &[PredictiveDistribution],
    labels: &[bool],
    n_rounds: usize,
    n_bins: usize,
) -> Result<EvaluationReport> {
    check_distributions(dists, labels)?;
    if n_rounds == 0 {
        return Err(Error::InvalidInput("n_rounds must be positive".into()));
    }
    if let Some(d) = dists.iter().find(|d| d.len() < n_rounds) {
        return Err(Error::InvalidInput(format!(
            "distribution with {} samples cannot supply {n_rounds} rounds",
            d.len()
        )));
    }
    let mut aurocs = Vec::with_capacity(n_rounds);
    let mut auprcs = Vec::with_capacity(n_rounds);
    for r in 0..n_rounds {
        let scores: Vec<f64> = dists.iter().map(|d| d.samples()[r]).collect();
        aurocs.push(auroc(&scores, labels)?);
        auprcs.push(auprc(&scores, labels)?);
    }
    let means: Vec<f64> = dists.iter().map(PredictiveDistribution::mean).collect();
    Ok(EvaluationReport {
        protocol: Protocol::Ci30,
        n: labels.len(),
        auroc: running_mean(&aurocs),
        auprc: running_mean(&auprcs),
        calibration_bins: calibration_curve(&means, labels, n_bins)?,
        ci: Some(MetricIntervals {
            auroc: interval(&aurocs),
            auprc: interval(&auprcs),
        }),
        n_metric_evaluations: aurocs.len(),
    })
}

pub fn write_report_json(path: &Path, report: &EvaluationReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::parse("evaluation report", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<EvaluationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn write_calibration_csv(path: &Path, bins: &[CalibrationBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::cohort::csv_error(path, e))?;
    w.write_record(["bin_low", "bin_high", "mean_predicted", "observed_rate", "count"])
        .map_err(|e| crate::cohort::csv_error(path, e))?;
    for b in bins {
        w.serialize((b.bin_low, b.bin_high, b.mean_predicted, b.observed_rate, b.count))
            .map_err(|e| crate::cohort::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let l = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.3, 0.8, 0.2], &l).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = auprc(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(auprc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn calibration_counts_sum() {
        let bins = calibration_curve(&[0.0, 0.05, 0.55, 1.0], &[false, true, true, true], 10).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(bins[0].count, 2);
        assert_eq!(bins[9].count, 1);
        assert!(bins[3].is_empty() && bins[3].mean_predicted.is_none());
        assert!(calibration_curve(&[0.5], &[true], 1).is_err());
    }

    #[test]
    fn small_input_no_crash() {
        let bins = calibration_curve(&[0.3, 0.7], &[false, true], 10).unwrap();
        assert_eq!(bins.len(), 10);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert!((percentile(&v, 2.5) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ci_protocol_needs_enough_samples() {
        let d = vec![PredictiveDistribution::new(vec![0.5; 3]).unwrap(); 2];
        assert!(evaluate_ci_protocol(&d, &[true, false], 30, 10).is_err());
    }
}
