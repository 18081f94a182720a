//! Cohort persistence.
//!
//! Records are stored one JSON object per line:
//!
//! ```text
//! {"patient_id":0,"split":"train","baseline_age":61,"label":false,"encounters":[[12,55],[3,58]]}
//! ```
//!
//! Each encounter is a `[code, age]` pair. The planted-truth table is a CSV with
//! header `code,label,kind,planted_weight`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodeKind, Encounter, GroundTruth, PatientRecord, Split, TruthRow};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    patient_id: u64,
    split: Option<Split>,
    baseline_age: u32,
    label: bool,
    encounters: Vec<(usize, u32)>,
}

pub fn write_cohort_jsonl(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = RecordLine {
            patient_id: r.patient_id,
            split: r.split,
            baseline_age: r.baseline_age,
            label: r.label,
            encounters: r.encounters.iter().map(|e| (e.code, e.age)).collect(),
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::parse("cohort record", e))?;
        writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cohort_jsonl(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = format!("{} line {}", path.display(), n + 1);
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| Error::parse(ctx, e))?;
        let record = PatientRecord {
            patient_id: raw.patient_id,
            encounters: raw
                .encounters
                .into_iter()
                .map(|(code, age)| Encounter { code, age })
                .collect(),
            baseline_age: raw.baseline_age,
            label: raw.label,
            split: raw.split,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Serialize, Deserialize)]
struct TruthCsvRow {
    code: usize,
    label: String,
    kind: CodeKind,
    planted_weight: f64,
}

pub fn write_truth_table_csv(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["code", "label", "kind", "planted_weight"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize((r.code, &r.label, r.kind, r.planted_weight))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth_table_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| {
            let row: TruthCsvRow = row.map_err(|e| csv_error(path, e))?;
            Ok(TruthRow {
                code: row.code,
                label: row.label,
                kind: row.kind,
                planted_weight: row.planted_weight,
            })
        })
        .collect()
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let text = serde_json::to_string_pretty(truth).map_err(|e| Error::parse("ground truth", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}
