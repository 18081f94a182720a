use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::stages::{
    AssociationSummary, ExplanationIndexEntry, ModelMetrics, ASSOCIATION_CSV, ASSOCIATION_SUMMARY, EXPLANATION_INDEX,
    METRICS_SUMMARY,
};
use super::{RunManifest, Stage};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.md";

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn absent(out: &mut String, stage: Stage) {
    let _ = writeln!(out, "_Absent: stage `{stage}` has not completed._\n");
}

/// Markdown summary of a run. The text depends only on the manifest and the
/// files it lists, never on timings, so regenerating it is byte-stable.
pub fn write_report(manifest: &RunManifest, output_dir: &Path) -> Result<PathBuf> {
    let mut out =
        String::from("# Run report\n\n## Stages\n\n| stage | seed | config hash | outputs |\n|---|---|---|---|\n");
    for stage in Stage::ALL {
        match manifest.get(stage) {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "| {stage} | {} | {} | {} |",
                    r.seed,
                    &r.config_hash[..12],
                    r.outputs.len()
                );
            }
            None => {
                let _ = writeln!(out, "| {stage} | - | - | not run |");
            }
        }
    }

    out.push_str("\n## Discrimination on the validation split\n\n");
    if manifest.verified(Stage::Evaluate, output_dir).is_some() {
        let summary: BTreeMap<String, ModelMetrics> = read_json(&output_dir.join(METRICS_SUMMARY))?;
        out.push_str("| model | AUROC | AUPRC | AUROC 95% interval | AUPRC 95% interval |\n|---|---|---|---|---|\n");
        for (name, title) in [("teacher", "Teacher"), ("bdld", "BDLD"), ("bdl", "BDL")] {
            if let Some(m) = summary.get(name) {
                let _ = writeln!(
                    out,
                    "| {title} | {:.4} | {:.4} | [{:.4}, {:.4}] | [{:.4}, {:.4}] |",
                    m.auroc, m.auprc, m.auroc_ci.low, m.auroc_ci.high, m.auprc_ci.low, m.auprc_ci.high
                );
            }
        }
        if let (Some(d), Some(b)) = (summary.get("bdld"), summary.get("bdl")) {
            let _ = writeln!(out, "\nBDLD minus BDL AUROC: {:+.4}", d.auroc - b.auroc);
        }
        out.push_str("\nAUROC and AUPRC use the per-patient mean of the predictive samples; intervals come from scoring each sample round separately.\n\n");
    } else {
        absent(&mut out, Stage::Evaluate);
    }

    out.push_str("## Association map\n\n");
    if manifest.verified(Stage::Associate, output_dir).is_some() {
        let s: AssociationSummary = read_json(&output_dir.join(ASSOCIATION_SUMMARY))?;
        let _ = writeln!(
            out,
            "Codes: {}; unclassified: {}; collinear pairs: {}\n",
            s.n_codes, s.unclassified, s.n_collinear_pairs
        );
        out.push_str("| quadrant | codes |\n|---|---|\n");
        for (q, n) in &s.quadrant_counts {
            let _ = writeln!(out, "| {q} | {n} |");
        }
        let _ = writeln!(
            out,
            "\nTable: `{ASSOCIATION_CSV}`; plot: `association/association.svg`\n"
        );
    } else {
        absent(&mut out, Stage::Associate);
    }

    out.push_str("## Patient explanations\n\n");
    if manifest.verified(Stage::Explain, output_dir).is_some() {
        let index: Vec<ExplanationIndexEntry> = read_json(&output_dir.join(EXPLANATION_INDEX))?;
        out.push_str("| patient | label | p full | p selected | selected | file |\n|---|---|---|---|---|---|\n");
        for e in &index {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {} ({:.1}%) | `{}` |",
                e.patient_id,
                u8::from(e.label),
                e.p_full,
                e.p_selected,
                e.n_selected,
                100.0 * e.fraction_selected,
                e.csv
            );
        }
        out.push('\n');
    } else {
        absent(&mut out, Stage::Explain);
    }

    let path = output_dir.join(REPORT_FILE);
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
