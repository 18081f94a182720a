use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AssociationEntry, Quadrant, StratifiedGroups};
use crate::cohort::{csv_error, PatientRecord, Vocabulary};
use crate::error::{Error, Result};

const HEADER: [&str; 7] = [
    "code",
    "label",
    "coefficient_mean",
    "coefficient_sd",
    "contextual_ratio",
    "n_band_pairs",
    "quadrant",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    code: usize,
    label: String,
    coefficient_mean: f64,
    coefficient_sd: f64,
    contextual_ratio: Option<f64>,
    n_band_pairs: usize,
    quadrant: String,
}

pub fn write_association_csv(path: &Path, entries: &[AssociationEntry], vocab: &Vocabulary) -> Result<()> {
    // the header is written by hand so that an empty map still gets one
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_error(path, e))?;
    for e in entries {
        w.serialize(CsvRow {
            code: e.code,
            label: vocab.label(e.code).to_string(),
            coefficient_mean: e.coefficient_mean,
            coefficient_sd: e.coefficient_sd,
            contextual_ratio: e.contextual_ratio,
            n_band_pairs: e.n_band_pairs_used,
            quadrant: e.quadrant.map_or("", |q| q.as_str()).to_string(),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_association_csv(path: &Path) -> Result<Vec<AssociationEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?;
    if headers.iter().ne(HEADER) {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unexpected header {headers:?}"),
        ));
    }
    r.deserialize()
        .map(|row| {
            let row: CsvRow = row.map_err(|e| csv_error(path, e))?;
            let quadrant = match row.quadrant.as_str() {
                "" => None,
                s => Some(
                    Quadrant::parse(s)
                        .ok_or_else(|| Error::parse(path.display().to_string(), format!("unknown quadrant {s}")))?,
                ),
            };
            Ok(AssociationEntry {
                code: row.code,
                coefficient_mean: row.coefficient_mean,
                coefficient_sd: row.coefficient_sd,
                contextual_ratio: row.contextual_ratio,
                n_band_pairs_used: row.n_band_pairs,
                quadrant,
            })
        })
        .collect()
}

fn quadrant_colour(q: Option<Quadrant>) -> &'static str {
    match q {
        Some(Quadrant::Associated) => "#c0392b",
        Some(Quadrant::Dissociated) => "#2471a3",
        Some(Quadrant::AmbiguousHighContext) => "#b9770e",
        Some(Quadrant::AmbiguousHighCoef) => "#7d3c98",
        None => "#999999",
    }
}

/// Scatter of `ln CR` (x) against the posterior-mean coefficient (y).
pub fn write_association_svg(path: &Path, entries: &[AssociationEntry], vocab: &Vocabulary) -> Result<()> {
    let (w, h, pad) = (640.0, 480.0, 48.0);
    let pts: Vec<(f64, f64, &AssociationEntry)> = entries
        .iter()
        .filter_map(|e| e.contextual_ratio.map(|cr| (cr.ln(), e.coefficient_mean, e)))
        .collect();
    let extent =
        |f: fn(&(f64, f64, &AssociationEntry)) -> f64| pts.iter().map(f).fold(1e-3f64, |m, v| m.max(v.abs())) * 1.1;
    let (xs, ys) = (extent(|p| p.0), extent(|p| p.1));
    let px = |x: f64| pad + (x + xs) / (2.0 * xs) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y + ys) / (2.0 * ys) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<line x1="{:.1}" y1="{pad}" x2="{:.1}" y2="{:.1}" stroke="#444"/>"##,
        px(0.0),
        px(0.0),
        h - pad
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{pad}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#444"/>"##,
        py(0.0),
        w - pad,
        py(0.0)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">ln contextual ratio</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">coefficient</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (x, y, e) in &pts {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"><title>{} {}</title></circle>"#,
            px(*x),
            py(*y),
            quadrant_colour(e.quadrant),
            vocab.label(e.code),
            e.quadrant.map_or("unclassified", |q| q.as_str())
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub code: usize,
    pub group: String,
    /// Lower edge of a five-year baseline-age bin.
    pub age_bin: u32,
    pub count: usize,
}

/// Baseline-age histograms of the exposed and non-exposed groups of each code,
/// pooled over band pairs (each patient counted once per group).
pub fn write_age_histograms(
    path: &Path,
    groups: &[StratifiedGroups],
    records: &[&PatientRecord],
) -> Result<Vec<HistogramRow>> {
    let age: std::collections::BTreeMap<u64, u32> = records.iter().map(|r| (r.patient_id, r.baseline_age)).collect();
    let mut rows = Vec::new();
    for g in groups {
        for (name, pick) in [("exposure", 0), ("non_exposure", 1)] {
            let ids: std::collections::BTreeSet<u64> = g
                .pairs
                .iter()
                .flat_map(|p| if pick == 0 { &p.exposure } else { &p.non_exposure })
                .copied()
                .collect();
            let mut bins = std::collections::BTreeMap::<u32, usize>::new();
            for id in ids {
                let a = *age
                    .get(&id)
                    .ok_or_else(|| Error::InvalidInput(format!("patient {id} missing from records")))?;
                *bins.entry(a / 5 * 5).or_default() += 1;
            }
            rows.extend(bins.into_iter().map(|(age_bin, count)| HistogramRow {
                code: g.code,
                group: name.to_string(),
                age_bin,
                count,
            }));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["code", "group", "age_bin", "count"])
        .map_err(|e| csv_error(path, e))?;
    for r in &rows {
        w.serialize((r.code, &r.group, r.age_bin, r.count))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}
