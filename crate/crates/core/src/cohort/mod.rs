//! Synthetic longitudinal event cohorts with planted risk effects.
//!
//! Each patient carries an age-ordered list of coded encounters up to a
//! baseline age and a binary outcome drawn from a logistic model whose
//! additive and pairwise-interaction weights are known. The known weights
//! ([`GroundTruth`]) are what association recovery is checked against.

mod generate;
mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_cohort, planted_truth, split_cohort, Cohort, SPLIT_FRACTIONS};
pub(crate) use io::csv_error;
pub use io::{
    read_cohort_jsonl, read_ground_truth, read_truth_table_csv, write_cohort_jsonl, write_ground_truth,
    write_truth_table_csv,
};

pub const MIN_AGE: u32 = 16;
pub const MAX_AGE: u32 = 100;
/// Number of rows in the age-embedding table (one per integer year 16..=100).
pub const N_AGES: usize = (MAX_AGE - MIN_AGE + 1) as usize;
pub const DEFAULT_MAX_LEN: usize = 256;
pub const BASELINE_AGE_MEAN: f64 = 57.0;
pub const BASELINE_AGE_SD: f64 = 18.0;
pub const BASELINE_AGE_MAX: u32 = 95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Diagnosis,
    Medication,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCode {
    pub id: usize,
    pub label: String,
    pub kind: CodeKind,
}

/// Dense code vocabulary: diagnoses first, then medications.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    codes: Vec<EventCode>,
}

impl Vocabulary {
    /// ICD-10-style labels for diagnoses and BNF-section-style labels for medications.
    pub fn synthetic(n_diag: usize, n_med: usize) -> Self {
        let mut codes = Vec::with_capacity(n_diag + n_med);
        for i in 0..n_diag {
            let letter = (b'A' + ((i / 100) % 26) as u8) as char;
            let label = format!("{}{:02}.{}", letter, i % 100, i / 2600);
            codes.push(EventCode {
                id: i,
                label,
                kind: CodeKind::Diagnosis,
            });
        }
        for j in 0..n_med {
            let label = format!("{:02}{:02}", 1 + j / 20, 1 + j % 20);
            let label = if j >= 2000 {
                format!("{label}/{}", j / 2000)
            } else {
                label
            };
            codes.push(EventCode {
                id: n_diag + j,
                label,
                kind: CodeKind::Medication,
            });
        }
        Self { codes }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&EventCode> {
        self.codes.get(id)
    }

    pub fn codes(&self) -> &[EventCode] {
        &self.codes
    }

    pub fn label(&self, id: usize) -> &str {
        self.codes.get(id).map(|c| c.label.as_str()).unwrap_or("?")
    }

    pub fn description(&self, id: usize) -> String {
        match self.codes.get(id) {
            Some(c) => match c.kind {
                CodeKind::Diagnosis => format!("synthetic diagnosis {}", c.label),
                CodeKind::Medication => format!("synthetic medication {}", c.label),
            },
            None => "unknown code".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub code: usize,
    pub age: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Tune,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub encounters: Vec<Encounter>,
    pub baseline_age: u32,
    pub label: bool,
    pub split: Option<Split>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidRecord(format!("patient {}: {}", self.patient_id, why)));
        if self.encounters.is_empty() {
            return bad("no encounters".into());
        }
        if !(MIN_AGE..=MAX_AGE).contains(&self.baseline_age) {
            return bad(format!(
                "baseline age {} outside [{MIN_AGE}, {MAX_AGE}]",
                self.baseline_age
            ));
        }
        let mut prev = 0;
        for e in &self.encounters {
            if !(MIN_AGE..=MAX_AGE).contains(&e.age) {
                return bad(format!("encounter age {} outside [{MIN_AGE}, {MAX_AGE}]", e.age));
            }
            if e.age < prev {
                return bad("encounters not ordered by age".into());
            }
            if e.age > self.baseline_age {
                return bad(format!(
                    "encounter at age {} after baseline {}",
                    e.age, self.baseline_age
                ));
            }
            prev = e.age;
        }
        Ok(())
    }

    /// Distinct codes present before baseline, ascending.
    pub fn code_set(&self) -> Vec<usize> {
        let mut codes: Vec<usize> = self.encounters.iter().map(|e| e.code).collect();
        codes.sort_unstable();
        codes.dedup();
        codes
    }

    pub fn has_code(&self, code: usize) -> bool {
        self.encounters.iter().any(|e| e.code == code)
    }

    /// Age at the first occurrence of `code`, if present.
    pub fn first_occurrence(&self, code: usize) -> Option<u32> {
        self.encounters.iter().filter(|e| e.code == code).map(|e| e.age).min()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedEffect {
    pub code: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedInteraction {
    pub codes: [usize; 2],
    pub weight: f64,
}

/// Which part of the label model the intercept is calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterceptReference {
    /// Prevalence of the full model (effects, interactions, age) matches the target.
    #[default]
    FullModel,
    /// Only the age term is used for calibration; planted effects shift prevalence on top.
    AgeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub vocab_diag: usize,
    pub vocab_med: usize,
    pub target_prevalence: f64,
    pub planted_effects: Vec<PlantedEffect>,
    pub planted_interactions: Vec<PlantedInteraction>,
    /// Log-odds per decade of baseline age above 57.
    pub age_slope: f64,
    pub visits_mean: f64,
    pub codes_per_visit_mean: f64,
    /// Mean size of a patient's pool of distinct recurring codes.
    pub distinct_codes_mean: f64,
    /// Probability that a pool code is a diagnosis rather than a medication.
    pub diagnosis_share: f64,
    /// Codes planted into every patient's history regardless of sampling.
    pub forced_codes: Vec<usize>,
    pub intercept_reference: InterceptReference,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// The desk-scale preset: 20,000 patients, 150 + 50 codes, 30 visits mean,
    /// prevalence 8.3%, with a fixed panel of planted effects and interactions.
    pub fn desk() -> Self {
        let diag = |rank: usize| rank;
        let med = |rank: usize| 150 + rank;
        let mut effects = vec![
            // strong positive
            (diag(0), 1.3),
            (diag(3), 1.2),
            (diag(7), 1.4),
            (diag(11), 1.2),
            (med(1), 1.3),
            (med(5), 1.2),
            // strong negative
            (diag(2), -1.3),
            (diag(5), -1.2),
            (diag(9), -1.4),
            (med(3), -1.2),
            (med(8), -1.3),
        ];
        // weak effects spread over the tail
        for (k, rank) in (14..44).step_by(3).enumerate() {
            effects.push((diag(rank), if k % 2 == 0 { 0.4 } else { -0.4 }));
        }
        for (k, rank) in (11..29).step_by(3).enumerate() {
            effects.push((med(rank), if k % 2 == 0 { -0.35 } else { 0.35 }));
        }
        let interactions = vec![
            ([diag(1), med(0)], 1.0),
            ([diag(4), diag(6)], 1.0),
            ([diag(8), med(2)], 0.9),
            ([med(4), med(7)], 0.9),
        ];
        Self {
            n_patients: 20_000,
            vocab_diag: 150,
            vocab_med: 50,
            target_prevalence: 0.083,
            planted_effects: effects
                .into_iter()
                .map(|(code, weight)| PlantedEffect { code, weight })
                .collect(),
            planted_interactions: interactions
                .into_iter()
                .map(|(codes, weight)| PlantedInteraction { codes, weight })
                .collect(),
            age_slope: 0.1,
            visits_mean: 30.0,
            codes_per_visit_mean: 2.0,
            distinct_codes_mean: 16.0,
            diagnosis_share: 0.5,
            forced_codes: Vec::new(),
            intercept_reference: InterceptReference::FullModel,
            seed: 0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_diag + self.vocab_med
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.vocab_diag, self.vocab_med)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return fail("n_patients must be positive".into());
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return fail(format!(
                "target_prevalence {} must lie in (0, 1)",
                self.target_prevalence
            ));
        }
        if self.vocab_diag == 0 || self.vocab_med == 0 {
            return fail("vocabulary sizes must be at least 1".into());
        }
        if !(self.visits_mean > 0.0) {
            return fail(format!("visits_mean {} must be positive", self.visits_mean));
        }
        if !(self.codes_per_visit_mean >= 1.0) {
            return fail(format!(
                "codes_per_visit_mean {} must be at least 1",
                self.codes_per_visit_mean
            ));
        }
        if !(self.distinct_codes_mean >= 1.0) {
            return fail(format!(
                "distinct_codes_mean {} must be at least 1",
                self.distinct_codes_mean
            ));
        }
        if !(0.0..=1.0).contains(&self.diagnosis_share) {
            return fail(format!("diagnosis_share {} must lie in [0, 1]", self.diagnosis_share));
        }
        let v = self.vocab_size();
        for e in &self.planted_effects {
            if e.code >= v {
                return fail(format!("planted effect on code {} outside vocabulary of {}", e.code, v));
            }
            if !e.weight.is_finite() {
                return fail(format!("planted effect on code {} is not finite", e.code));
            }
        }
        for i in &self.planted_interactions {
            if i.codes.iter().any(|&c| c >= v) || i.codes[0] == i.codes[1] {
                return fail(format!("invalid interaction pair {:?}", i.codes));
            }
            if !i.weight.is_finite() {
                return fail(format!("interaction {:?} weight is not finite", i.codes));
            }
        }
        if let Some(&c) = self.forced_codes.iter().find(|&&c| c >= v) {
            return fail(format!("forced code {} outside vocabulary of {}", c, v));
        }
        Ok(())
    }

    /// Dense per-code planted weights (0 for null codes); repeated entries add up.
    pub fn effect_vector(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.vocab_size()];
        for e in &self.planted_effects {
            w[e.code] += e.weight;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSign {
    Positive,
    Negative,
    Null,
}

impl EffectSign {
    pub fn of(weight: f64) -> Self {
        if weight > 0.0 {
            EffectSign::Positive
        } else if weight < 0.0 {
            EffectSign::Negative
        } else {
            EffectSign::Null
        }
    }
}

/// One row of the planted-truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub code: usize,
    pub label: String,
    pub kind: CodeKind,
    pub planted_weight: f64,
}

impl TruthRow {
    pub fn sign(&self) -> EffectSign {
        EffectSign::of(self.planted_weight)
    }

    pub fn magnitude(&self) -> f64 {
        self.planted_weight.abs()
    }
}

/// Planted weights derived from a configuration alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub rows: Vec<TruthRow>,
    pub interactions: Vec<PlantedInteraction>,
}

impl TruthTable {
    pub fn sign(&self, code: usize) -> EffectSign {
        self.rows.get(code).map(TruthRow::sign).unwrap_or(EffectSign::Null)
    }

    /// Codes that take part in any planted interaction.
    pub fn interaction_codes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.interactions.iter().flat_map(|i| i.codes).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Everything the generator knows about the label model of a realized cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub table: TruthTable,
    pub intercept: f64,
    pub age_slope: f64,
    /// True outcome probability per patient id.
    pub probabilities: BTreeMap<u64, f64>,
}

impl GroundTruth {
    pub fn probability(&self, patient_id: u64) -> Option<f64> {
        self.probabilities.get(&patient_id).copied()
    }

    /// Label logit of an arbitrary record under the planted model.
    pub fn logit(&self, record: &PatientRecord) -> f64 {
        let codes = record.code_set();
        let mut eta = self.intercept + self.age_slope * age_term(record.baseline_age);
        for &c in &codes {
            eta += self.table.rows.get(c).map(|r| r.planted_weight).unwrap_or(0.0);
        }
        for i in &self.table.interactions {
            if codes.binary_search(&i.codes[0]).is_ok() && codes.binary_search(&i.codes[1]).is_ok() {
                eta += i.weight;
            }
        }
        eta
    }
}

/// Binary presence of every vocabulary code before baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHotVector {
    pub bits: Vec<bool>,
}

impl MultiHotVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

pub fn encode_multihot(record: &PatientRecord, vocab_size: usize) -> Result<MultiHotVector> {
    let mut bits = vec![false; vocab_size];
    for e in &record.encounters {
        match bits.get_mut(e.code) {
            Some(b) => *b = true,
            None => {
                return Err(Error::InvalidRecord(format!(
                    "patient {}: code {} outside vocabulary of {}",
                    record.patient_id, e.code, vocab_size
                )))
            }
        }
    }
    Ok(MultiHotVector { bits })
}

/// Code and age token sequences fed to the recurrent encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEncoding {
    pub code_ids: Vec<usize>,
    pub age_ids: Vec<usize>,
}

impl SequenceEncoding {
    pub fn len(&self) -> usize {
        self.code_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code_ids.is_empty()
    }
}

/// Decades of baseline age above the cohort mean.
pub fn age_term(baseline_age: u32) -> f64 {
    (baseline_age as f64 - BASELINE_AGE_MEAN) / 10.0
}

pub fn age_id(age: u32) -> usize {
    (age.clamp(MIN_AGE, MAX_AGE) - MIN_AGE) as usize
}

/// Encounters stably sorted by age, truncated to the most recent `max_len`.
pub fn encode_sequence(record: &PatientRecord, max_len: usize) -> SequenceEncoding {
    let mut enc: Vec<Encounter> = record.encounters.clone();
    enc.sort_by_key(|e| e.age);
    let start = enc.len().saturating_sub(max_len);
    let kept = &enc[start..];
    SequenceEncoding {
        code_ids: kept.iter().map(|e| e.code).collect(),
        age_ids: kept.iter().map(|e| age_id(e.age)).collect(),
    }
}
