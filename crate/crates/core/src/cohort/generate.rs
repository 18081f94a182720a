use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use super::{
    age_term, Encounter, GeneratorConfig, GroundTruth, InterceptReference, PatientRecord, Split, TruthRow, TruthTable,
    Vocabulary, BASELINE_AGE_MAX, BASELINE_AGE_MEAN, BASELINE_AGE_SD, MIN_AGE,
};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.60, 0.10, 0.30);

/// Mean and sd of the span of recorded history before baseline, in years.
const HISTORY_YEARS_MEAN: f64 = 8.9;
const HISTORY_YEARS_SD: f64 = 5.2;
/// Offset of the Zipf-like code popularity law `1 / (rank + offset)`.
const ZIPF_OFFSET: f64 = 3.0;

/// A generated cohort together with its label model.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub truth: GroundTruth,
    pub vocabulary: Vocabulary,
}

impl Cohort {
    pub fn prevalence(&self) -> f64 {
        let pos = self.records.iter().filter(|r| r.label).count();
        pos as f64 / self.records.len().max(1) as f64
    }

    pub fn split(&self, split: Split) -> Vec<&PatientRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }
}

pub fn planted_truth(config: &GeneratorConfig) -> TruthTable {
    let vocab = config.vocabulary();
    let weights = config.effect_vector();
    let rows = vocab
        .codes()
        .iter()
        .map(|c| TruthRow {
            code: c.id,
            label: c.label.clone(),
            kind: c.kind,
            planted_weight: weights[c.id],
        })
        .collect();
    TruthTable {
        rows,
        interactions: config.planted_interactions.clone(),
    }
}

struct CodeSampler {
    diag_cdf: Vec<f64>,
    med_cdf: Vec<f64>,
    n_diag: usize,
    diagnosis_share: f64,
}

impl CodeSampler {
    fn new(config: &GeneratorConfig) -> Self {
        let cdf = |n: usize| {
            let mut acc = 0.0;
            let mut v: Vec<f64> = (0..n)
                .map(|r| {
                    acc += 1.0 / (r as f64 + ZIPF_OFFSET);
                    acc
                })
                .collect();
            let total = acc;
            v.iter_mut().for_each(|x| *x /= total);
            v
        };
        Self {
            diag_cdf: cdf(config.vocab_diag),
            med_cdf: cdf(config.vocab_med),
            n_diag: config.vocab_diag,
            diagnosis_share: config.diagnosis_share,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let (cdf, offset) = if rng.random::<f64>() < self.diagnosis_share {
            (&self.diag_cdf, 0)
        } else {
            (&self.med_cdf, self.n_diag)
        };
        let rank = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
        offset + rank
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

fn sample_baseline_age(rng: &mut ChaCha8Rng) -> u32 {
    let normal = Normal::new(BASELINE_AGE_MEAN, BASELINE_AGE_SD).expect("constant parameters");
    loop {
        let a = normal.sample(rng).round();
        if a >= MIN_AGE as f64 && a <= BASELINE_AGE_MAX as f64 {
            return a as u32;
        }
    }
}

fn generate_patient(config: &GeneratorConfig, sampler: &CodeSampler, patient_id: u64) -> PatientRecord {
    let mut rng = stream_rng(config.seed, streams::PATIENT, patient_id);
    let baseline_age = sample_baseline_age(&mut rng);
    let history = Normal::new(HISTORY_YEARS_MEAN, HISTORY_YEARS_SD)
        .expect("constant parameters")
        .sample(&mut rng)
        .abs()
        .round() as u32;
    let start_age = baseline_age.saturating_sub(history).max(MIN_AGE);

    // distinct recurring codes, each with its own onset age
    let pool_size = 1 + poisson(&mut rng, config.distinct_codes_mean - 1.0);
    let mut pool: Vec<(usize, u32)> = Vec::with_capacity(pool_size + config.forced_codes.len());
    let mut tries = 0;
    while pool.len() < pool_size && tries < pool_size * 20 {
        tries += 1;
        let code = sampler.draw(&mut rng);
        if pool.iter().all(|&(c, _)| c != code) {
            pool.push((code, rng.random_range(start_age..=baseline_age)));
        }
    }
    for &code in &config.forced_codes {
        if pool.iter().all(|&(c, _)| c != code) {
            pool.push((code, rng.random_range(start_age..=baseline_age)));
        }
    }
    pool.sort_by_key(|&(c, onset)| (onset, c));

    let n_visits = 1 + poisson(&mut rng, config.visits_mean - 1.0);
    let mut visit_ages: Vec<u32> = (0..n_visits)
        .map(|_| rng.random_range(start_age..=baseline_age))
        .collect();
    visit_ages.sort_unstable();

    let mut encounters = Vec::new();
    for age in visit_ages {
        let n_codes = 1 + poisson(&mut rng, config.codes_per_visit_mean - 1.0);
        for _ in 0..n_codes {
            let available = pool.partition_point(|&(_, onset)| onset <= age);
            let code = if available == 0 {
                // nothing has started yet: the earliest code starts now
                pool[0].1 = age;
                pool[0].0
            } else {
                pool[rng.random_range(0..available)].0
            };
            encounters.push(Encounter { code, age });
        }
    }
    // forced codes must be present even if no visit drew them
    for &code in &config.forced_codes {
        if !encounters.iter().any(|e| e.code == code) {
            let age = pool
                .iter()
                .find(|&&(c, _)| c == code)
                .map(|&(_, a)| a)
                .unwrap_or(baseline_age);
            let at = encounters.partition_point(|e| e.age <= age);
            encounters.insert(at, Encounter { code, age });
        }
    }

    PatientRecord {
        patient_id,
        encounters,
        baseline_age,
        label: false,
        split: None,
    }
}

fn sigmoid(x: f64) -> f64 {
    riskdistill_diffcore::sigmoid(x)
}

/// Intercept `b` with `mean(σ(b + offsets)) = target`.
fn solve_intercept(offsets: &[f64], target: f64) -> Result<f64> {
    let prevalence = |b: f64| offsets.iter().map(|&o| sigmoid(b + o)).sum::<f64>() / offsets.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    if prevalence(lo) > target || prevalence(hi) < target {
        return Err(Error::Config(format!(
            "target prevalence {target} unreachable: achievable range [{:.4}, {:.4}]",
            prevalence(lo),
            prevalence(hi)
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if prevalence(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn generate_cohort(config: &GeneratorConfig) -> Result<Cohort> {
    config.validate()?;
    let sampler = CodeSampler::new(config);
    let mut records: Vec<PatientRecord> = (0..config.n_patients as u64)
        .into_par_iter()
        .map(|id| generate_patient(config, &sampler, id))
        .collect();

    let table = planted_truth(config);
    let mut truth = GroundTruth {
        table,
        intercept: 0.0,
        age_slope: config.age_slope,
        probabilities: BTreeMap::new(),
    };
    let full: Vec<f64> = records.par_iter().map(|r| truth.logit(r)).collect();
    let calibration: Vec<f64> = match config.intercept_reference {
        InterceptReference::FullModel => full.clone(),
        InterceptReference::AgeOnly => records
            .iter()
            .map(|r| config.age_slope * age_term(r.baseline_age))
            .collect(),
    };
    truth.intercept = solve_intercept(&calibration, config.target_prevalence)?;

    for (r, eta) in records.iter_mut().zip(&full) {
        let p = sigmoid(truth.intercept + eta);
        let mut rng = stream_rng(config.seed, streams::LABEL, r.patient_id);
        r.label = rng.random::<f64>() < p;
        truth.probabilities.insert(r.patient_id, p);
    }

    Ok(Cohort {
        records,
        truth,
        vocabulary: config.vocabulary(),
    })
}

/// Random partition into train/tune/validation with sizes rounded from `fractions`.
pub fn split_cohort(cohort: &mut Cohort, fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = cohort.records.len();
    let n_train = (a * n as f64).round() as usize;
    let n_tune = ((b * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, streams::SPLIT, 0);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    for (rank, &i) in order.iter().enumerate() {
        cohort.records[i].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_tune {
            Split::Tune
        } else {
            Split::Validation
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{EffectSign, PlantedEffect};

    fn small(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: n,
            seed,
            ..GeneratorConfig::desk()
        }
    }

    #[test]
    fn records_satisfy_invariants() {
        let cohort = generate_cohort(&small(500, 3)).unwrap();
        for r in &cohort.records {
            r.validate().unwrap();
            assert!(r.encounters.iter().all(|e| e.code < 200));
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small(300, 9)).unwrap();
        let b = generate_cohort(&small(300, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(300, 10)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let cfg = small(400, 5);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let par = pool.install(|| generate_cohort(&cfg).unwrap());
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = one.install(|| generate_cohort(&cfg).unwrap());
        assert_eq!(par, seq);
    }

    #[test]
    fn split_sizes_exact() {
        let mut cohort = generate_cohort(&small(10, 1)).unwrap();
        split_cohort(&mut cohort, SPLIT_FRACTIONS, 4).unwrap();
        let counts = [Split::Train, Split::Tune, Split::Validation].map(|s| cohort.split(s).len());
        assert_eq!(counts, [6, 1, 3]);
        let first: Vec<_> = cohort.records.iter().map(|r| r.split).collect();
        split_cohort(&mut cohort, SPLIT_FRACTIONS, 4).unwrap();
        let second: Vec<_> = cohort.records.iter().map(|r| r.split).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let mut cohort = generate_cohort(&small(10, 1)).unwrap();
        assert!(split_cohort(&mut cohort, (0.5, 0.1, 0.3), 0).is_err());
    }

    #[test]
    fn unreachable_prevalence_is_a_config_error() {
        let mut cfg = small(50, 1);
        cfg.intercept_reference = InterceptReference::FullModel;
        assert!(solve_intercept(&[0.0; 4], 0.3).is_ok());
        cfg.target_prevalence = 1e-300;
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn truth_table_signs() {
        let mut cfg = small(10, 0);
        cfg.planted_effects = vec![PlantedEffect { code: 4, weight: 0.8 }];
        let t = planted_truth(&cfg);
        assert_eq!(t.sign(4), EffectSign::Positive);
        assert_eq!(t.sign(5), EffectSign::Null);
        assert_eq!(t.rows.len(), 200);
    }

    #[test]
    fn probabilities_match_logit() {
        let cohort = generate_cohort(&small(200, 2)).unwrap();
        for r in &cohort.records {
            let p = cohort.truth.probability(r.patient_id).unwrap();
            let q = sigmoid(cohort.truth.logit(r));
            assert!((p - q).abs() < 1e-12);
        }
    }
}
