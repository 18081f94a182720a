//! Population-level associations: age-stratified contextual ratios, posterior
//! additive coefficients and their quadrant map, plus a Cramér's V audit.
//!
//! The contextual ratio of a band pair is the mean contextual latent of the
//! non-exposed group divided by that of the exposed group. The averaged
//! quantity is a latent value, not a probability. With negative latents a
//! ratio above 1 means exposure raises the contextual risk; strata whose two
//! means differ in sign are skipped since the ratio would mislead.

mod cramers;
mod export;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::error::{Error, Result};
use crate::predictive::running_mean;
use crate::student::{ArchConfig, EncodedPatient, StudentModel};

pub use cramers::{collinear_pairs, cramers_v, cramers_v_table, CollinearPair, CramersV};
pub use export::{
    read_association_csv, write_age_histograms, write_association_csv, write_association_svg, HistogramRow,
};

/// Exposure means smaller than this in magnitude make a ratio unstable.
pub const RATIO_EPSILON: f64 = 1e-6;

/// Years `[lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeBand {
    pub lower: u32,
    pub upper: u32,
}

impl AgeBand {
    pub fn new(lower: u32, upper: u32) -> Result<Self> {
        if lower >= upper {
            return Err(Error::Config(format!("age band {lower}-{upper} is empty")));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, age: u32) -> bool {
        (self.lower..self.upper).contains(&age)
    }

    /// 45-55, then five-year bands up to 90.
    pub fn standard() -> Vec<AgeBand> {
        let mut bands = vec![AgeBand { lower: 45, upper: 55 }];
        bands.extend((55..90).step_by(5).map(|l| AgeBand { lower: l, upper: l + 5 }));
        bands
    }

    /// [`Self::standard`] extended below 45 for younger synthetic cohorts.
    pub fn desk() -> Vec<AgeBand> {
        let mut bands = vec![AgeBand { lower: 16, upper: 30 }, AgeBand { lower: 30, upper: 45 }];
        bands.extend(Self::standard());
        bands
    }
}

impl std::fmt::Display for AgeBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.lower, self.upper)
    }
}

pub fn validate_bands(bands: &[AgeBand]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::Config("no age bands".into()));
    }
    for b in bands {
        AgeBand::new(b.lower, b.upper)?;
    }
    if bands.windows(2).any(|w| w[1].lower < w[0].upper) {
        return Err(Error::Config("age bands must be sorted and disjoint".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPair {
    pub incident: AgeBand,
    pub baseline: AgeBand,
    pub exposure: Vec<u64>,
    pub non_exposure: Vec<u64>,
}

impl BandPair {
    /// Pairs with an empty side carry no comparison.
    pub fn skipped(&self) -> bool {
        self.exposure.is_empty() || self.non_exposure.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedGroups {
    pub code: usize,
    /// Every pair with baseline band at or after the incident band, in band order.
    pub pairs: Vec<BandPair>,
}

/// Exposure: first occurrence of `code` in the incident band and baseline in the
/// baseline band. Non-exposure: no occurrence of `code`, baseline in the baseline band.
pub fn age_stratified_groups(
    records: &[&PatientRecord],
    code: usize,
    vocab_size: usize,
    bands: &[AgeBand],
) -> Result<StratifiedGroups> {
    if code >= vocab_size {
        return Err(Error::InvalidInput(format!(
            "code {code} outside vocabulary of {vocab_size}"
        )));
    }
    validate_bands(bands)?;
    let band_of = |age: u32| bands.iter().position(|b| b.contains(age));
    let nb = bands.len();
    let mut exposure = vec![Vec::new(); nb * nb];
    let mut non_exposure = vec![Vec::new(); nb];
    for r in records {
        let Some(base) = band_of(r.baseline_age) else { continue };
        match r.first_occurrence(code) {
            None => non_exposure[base].push(r.patient_id),
            Some(age) => {
                if let Some(inc) = band_of(age) {
                    if inc <= base {
                        exposure[inc * nb + base].push(r.patient_id);
                    }
                }
            }
        }
    }
    let mut pairs = Vec::new();
    for inc in 0..nb {
        for base in inc..nb {
            pairs.push(BandPair {
                incident: bands[inc],
                baseline: bands[base],
                exposure: std::mem::take(&mut exposure[inc * nb + base]),
                non_exposure: non_exposure[base].clone(),
            });
        }
    }
    Ok(StratifiedGroups { code, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptyGroup,
    NearZeroExposure,
    MixedSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub incident: AgeBand,
    pub baseline: AgeBand,
    pub n_exposure: usize,
    pub n_non_exposure: usize,
    pub exposure_mean: Option<f64>,
    pub non_exposure_mean: Option<f64>,
    pub ratio: Option<f64>,
    pub skipped: Option<SkipReason>,
}

impl std::fmt::Display for PairRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "incident {} baseline {}: {} exposed, {} not exposed, {:?}",
            self.incident, self.baseline, self.n_exposure, self.n_non_exposure, self.skipped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualRatio {
    pub ratio: f64,
    pub pairs: Vec<PairRatio>,
}

impl ContextualRatio {
    pub fn n_used(&self) -> usize {
        self.pairs.iter().filter(|p| p.ratio.is_some()).count()
    }
}

/// Ratio from per-patient mean contextual values. Patients missing from
/// `values` are an error.
pub fn contextual_ratio_from_values(groups: &StratifiedGroups, values: &BTreeMap<u64, f64>) -> Result<ContextualRatio> {
    let mean_of = |ids: &[u64]| -> Result<Option<f64>> {
        if ids.is_empty() {
            return Ok(None);
        }
        let v = ids
            .iter()
            .map(|id| {
                values
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("no contextual value for patient {id}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Some(running_mean(&v)))
    };
    let mut pairs = Vec::with_capacity(groups.pairs.len());
    for p in &groups.pairs {
        // a pair with an empty side is skipped without looking anything up
        let (exposure_mean, non_exposure_mean) = if p.skipped() {
            (None, None)
        } else {
            (mean_of(&p.exposure)?, mean_of(&p.non_exposure)?)
        };
        let (ratio, skipped) = match (exposure_mean, non_exposure_mean) {
            (Some(e), Some(_)) if e.abs() < RATIO_EPSILON => (None, Some(SkipReason::NearZeroExposure)),
            (Some(e), Some(n)) if e * n < 0.0 => (None, Some(SkipReason::MixedSign)),
            (Some(e), Some(n)) => (Some(n / e), None),
            _ => (None, Some(SkipReason::EmptyGroup)),
        };
        pairs.push(PairRatio {
            incident: p.incident,
            baseline: p.baseline,
            n_exposure: p.exposure.len(),
            n_non_exposure: p.non_exposure.len(),
            exposure_mean,
            non_exposure_mean,
            ratio,
            skipped,
        });
    }
    let used: Vec<f64> = pairs.iter().filter_map(|p| p.ratio).collect();
    if used.is_empty() {
        return Err(Error::NoUsableStrata {
            code: groups.code,
            diagnostics: pairs.iter().map(ToString::to_string).collect(),
        });
    }
    Ok(ContextualRatio {
        ratio: running_mean(&used),
        pairs,
    })
}

/// Mean contextual latent of every patient over `n_samples` weight draws.
pub fn mean_contextual(
    model: &StudentModel,
    records: &[&PatientRecord],
    n_samples: usize,
    seed: u64,
) -> Result<BTreeMap<u64, f64>> {
    let enc = encode(records, &model.arch)?;
    let refs: Vec<&EncodedPatient> = enc.iter().collect();
    let latents = model.latent_samples(&refs, n_samples, seed)?;
    Ok(records
        .iter()
        .zip(latents)
        .map(|(r, l)| {
            let v: Vec<f64> = l.iter().map(|x| x.contextual).collect();
            (r.patient_id, running_mean(&v))
        })
        .collect())
}

fn encode(records: &[&PatientRecord], arch: &ArchConfig) -> Result<Vec<EncodedPatient>> {
    records.iter().map(|r| EncodedPatient::new(r, arch)).collect()
}

/// Ratio for one code's groups, evaluating only the patients the groups mention.
pub fn contextual_ratio(
    model: &StudentModel,
    groups: &StratifiedGroups,
    records: &[&PatientRecord],
    n_samples: usize,
    seed: u64,
) -> Result<ContextualRatio> {
    let wanted: std::collections::BTreeSet<u64> = groups
        .pairs
        .iter()
        .filter(|p| !p.skipped())
        .flat_map(|p| p.exposure.iter().chain(&p.non_exposure).copied())
        .collect();
    let subset: Vec<&PatientRecord> = records
        .iter()
        .copied()
        .filter(|r| wanted.contains(&r.patient_id))
        .collect();
    let values = mean_contextual(model, &subset, n_samples, seed)?;
    contextual_ratio_from_values(groups, &values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    /// Ratio above 1, coefficient above 0.
    Associated,
    /// Ratio below 1, coefficient below 0.
    Dissociated,
    /// Ratio above 1, coefficient below 0.
    AmbiguousHighContext,
    /// Ratio below 1, coefficient above 0.
    AmbiguousHighCoef,
}

impl Quadrant {
    /// `None` on either boundary.
    pub fn classify(contextual_ratio: f64, coefficient: f64) -> Option<Quadrant> {
        use std::cmp::Ordering::*;
        match (contextual_ratio.partial_cmp(&1.0)?, coefficient.partial_cmp(&0.0)?) {
            (Greater, Greater) => Some(Quadrant::Associated),
            (Less, Less) => Some(Quadrant::Dissociated),
            (Greater, Less) => Some(Quadrant::AmbiguousHighContext),
            (Less, Greater) => Some(Quadrant::AmbiguousHighCoef),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Quadrant::Associated => "associated",
            Quadrant::Dissociated => "dissociated",
            Quadrant::AmbiguousHighContext => "ambiguous_high_context",
            Quadrant::AmbiguousHighCoef => "ambiguous_high_coef",
        }
    }

    pub fn parse(s: &str) -> Option<Quadrant> {
        [
            Quadrant::Associated,
            Quadrant::Dissociated,
            Quadrant::AmbiguousHighContext,
            Quadrant::AmbiguousHighCoef,
        ]
        .into_iter()
        .find(|q| q.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationEntry {
    pub code: usize,
    pub coefficient_mean: f64,
    pub coefficient_sd: f64,
    pub contextual_ratio: Option<f64>,
    pub n_band_pairs_used: usize,
    pub quadrant: Option<Quadrant>,
}

impl AssociationEntry {
    /// `|coefficient| · |ln CR|`, the within-quadrant ordering key.
    pub fn strength(&self) -> f64 {
        self.contextual_ratio
            .map(|cr| self.coefficient_mean.abs() * cr.ln().abs())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    pub bands: Vec<AgeBand>,
    pub contextual_samples: usize,
    pub coefficient_samples: usize,
    pub seed: u64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            bands: AgeBand::desk(),
            contextual_samples: 30,
            coefficient_samples: 1000,
            seed: 0,
        }
    }
}

/// One entry per vocabulary code, sorted by quadrant and then by descending
/// strength; codes without usable strata come last with no ratio.
pub fn association_map(
    model: &StudentModel,
    records: &[&PatientRecord],
    config: &AssociationConfig,
) -> Result<Vec<AssociationEntry>> {
    validate_bands(&config.bands)?;
    let values = mean_contextual(model, records, config.contextual_samples, config.seed)?;
    let coefficients = model.posterior_coefficients(config.coefficient_samples, config.seed)?;
    let vocab = model.arch.vocab_size;
    let mut entries = (0..vocab)
        .into_par_iter()
        .map(|code| {
            let groups = age_stratified_groups(records, code, vocab, &config.bands)?;
            let cr = match contextual_ratio_from_values(&groups, &values) {
                Ok(cr) => Some(cr),
                Err(Error::NoUsableStrata { .. }) => None,
                Err(e) => return Err(e),
            };
            let (mean, sd) = coefficients[code];
            let ratio = cr.as_ref().map(|c| c.ratio);
            Ok(AssociationEntry {
                code,
                coefficient_mean: mean,
                coefficient_sd: sd,
                contextual_ratio: ratio,
                n_band_pairs_used: cr.as_ref().map_or(0, ContextualRatio::n_used),
                quadrant: ratio.and_then(|r| Quadrant::classify(r, mean)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_entries(&mut entries);
    Ok(entries)
}

pub fn sort_entries(entries: &mut [AssociationEntry]) {
    entries.sort_by(|a, b| {
        let qa = a.quadrant.map_or(4, |q| q as u8);
        let qb = b.quadrant.map_or(4, |q| q as u8);
        qa.cmp(&qb)
            .then(b.strength().total_cmp(&a.strength()))
            .then(a.code.cmp(&b.code))
    });
}

#[cfg(test)]
mod tests;
