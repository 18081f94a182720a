use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Explanation, FidelityReport};
use crate::cohort::{csv_error, Vocabulary, MIN_AGE};
use crate::error::{Error, Result};
use crate::student::EncodedPatient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRow {
    pub code: String,
    pub age: u32,
    pub score: f64,
    pub description: String,
}

/// One row per encounter in sequence order.
pub fn explanation_rows(
    patient: &EncodedPatient,
    explanation: &Explanation,
    vocab: &Vocabulary,
) -> Result<Vec<ExplanationRow>> {
    let seq = &patient.sequence;
    if explanation.scores.scores.len() != seq.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} encounters",
            explanation.scores.scores.len(),
            seq.len()
        )));
    }
    Ok(seq
        .code_ids
        .iter()
        .zip(&seq.age_ids)
        .zip(&explanation.scores.scores)
        .map(|((&c, &a), &score)| ExplanationRow {
            code: vocab.label(c).to_string(),
            age: MIN_AGE + a as u32,
            score,
            description: vocab.description(c),
        })
        .collect())
}

pub fn write_explanation_csv(
    path: &Path,
    patient: &EncodedPatient,
    explanation: &Explanation,
    vocab: &Vocabulary,
) -> Result<Vec<ExplanationRow>> {
    let rows = explanation_rows(patient, explanation, vocab)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSummary {
    pub patient_id: u64,
    pub p_baseline: f64,
    pub threshold: f64,
    pub final_loss: Option<f64>,
    pub n_selected: usize,
    pub fraction_selected: f64,
    pub p_full: Vec<f64>,
    pub p_selected: Vec<f64>,
}

impl ExplanationSummary {
    pub fn new(explanation: &Explanation, report: &FidelityReport, threshold: f64) -> Self {
        Self {
            patient_id: explanation.patient_id,
            p_baseline: explanation.p_baseline,
            threshold,
            final_loss: explanation.trace.last().map(|s| s.loss),
            n_selected: report.n_selected,
            fraction_selected: report.fraction_selected,
            p_full: report.p_full.samples().to_vec(),
            p_selected: report.p_selected.samples().to_vec(),
        }
    }
}

pub fn write_explanation_summary(path: &Path, summary: &ExplanationSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::parse(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
