use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::*;
use crate::cohort::{Encounter, Vocabulary};
use crate::rng::stream_rng;
use crate::student::init_student;

fn patient(id: u64, baseline: u32, events: &[(usize, u32)]) -> PatientRecord {
    let mut encounters: Vec<Encounter> = events.iter().map(|&(code, age)| Encounter { code, age }).collect();
    encounters.sort_by_key(|e| e.age);
    if encounters.is_empty() {
        encounters.push(Encounter { code: 0, age: baseline });
    }
    PatientRecord {
        patient_id: id,
        encounters,
        baseline_age: baseline,
        label: false,
        split: None,
    }
}

fn band(l: u32, u: u32) -> AgeBand {
    AgeBand::new(l, u).unwrap()
}

#[test]
fn worked_membership() {
    let a = patient(1, 54, &[(3, 46), (3, 50)]);
    let b = patient(2, 54, &[(1, 40)]);
    let recs = vec![&a, &b];
    let g = age_stratified_groups(&recs, 3, 5, &AgeBand::desk()).unwrap();
    let first = band(45, 55);
    for p in &g.pairs {
        assert_eq!(p.exposure.contains(&1), p.incident == first && p.baseline == first);
        assert_eq!(p.non_exposure.contains(&2), p.baseline == first);
        assert!(!p.non_exposure.contains(&1));
    }
    assert!(g.pairs.iter().all(|p| p.baseline >= p.incident));
}

#[test]
fn band_presets_and_validation() {
    let s = AgeBand::standard();
    assert_eq!(s.first(), Some(&band(45, 55)));
    assert_eq!(s.last(), Some(&band(85, 90)));
    assert_eq!(s.len(), 8);
    assert_eq!(AgeBand::desk()[0], band(16, 30));
    assert!(AgeBand::new(5, 5).is_err());
    assert!(validate_bands(&[band(10, 20), band(15, 30)]).is_err());
    assert!(validate_bands(&[band(20, 30), band(10, 20)]).is_err());
    let recs: Vec<&PatientRecord> = vec![];
    assert!(matches!(
        age_stratified_groups(&recs, 9, 5, &s),
        Err(Error::InvalidInput(_))
    ));
}

fn random_cohort(seed: u64, n: usize, vocab: usize) -> Vec<PatientRecord> {
    let mut rng = stream_rng(seed, 99, 0);
    (0..n as u64)
        .map(|id| {
            let baseline = rng.random_range(16..=95);
            let events: Vec<(usize, u32)> = (0..rng.random_range(1..6))
                .map(|_| (rng.random_range(0..vocab), rng.random_range(16..=baseline)))
                .collect();
            patient(id, baseline, &events)
        })
        .collect()
}

#[test]
fn membership_matches_brute_force() {
    let bands = AgeBand::desk();
    for seed in 0..40 {
        let cohort = random_cohort(seed, 4 + (seed as usize % 17), 4);
        let recs: Vec<&PatientRecord> = cohort.iter().collect();
        for code in 0..4 {
            let g = age_stratified_groups(&recs, code, 4, &bands).unwrap();
            let mut k = 0;
            for i in 0..bands.len() {
                for j in i..bands.len() {
                    let exposed: BTreeSet<u64> = cohort
                        .iter()
                        .filter(|r| {
                            let ages: Vec<u32> =
                                r.encounters.iter().filter(|e| e.code == code).map(|e| e.age).collect();
                            !ages.is_empty()
                                && bands[i].lower <= *ages.iter().min().unwrap()
                                && *ages.iter().min().unwrap() < bands[i].upper
                                && bands[j].lower <= r.baseline_age
                                && r.baseline_age < bands[j].upper
                        })
                        .map(|r| r.patient_id)
                        .collect();
                    let unexposed: BTreeSet<u64> = cohort
                        .iter()
                        .filter(|r| r.encounters.iter().all(|e| e.code != code) && bands[j].contains(r.baseline_age))
                        .map(|r| r.patient_id)
                        .collect();
                    let p = &g.pairs[k];
                    assert_eq!((p.incident, p.baseline), (bands[i], bands[j]));
                    assert_eq!(p.exposure.iter().copied().collect::<BTreeSet<_>>(), exposed);
                    assert_eq!(p.non_exposure.iter().copied().collect::<BTreeSet<_>>(), unexposed);
                    k += 1;
                }
            }
            assert_eq!(k, g.pairs.len());
        }
    }
}

fn groups(pairs: Vec<(Vec<u64>, Vec<u64>)>) -> StratifiedGroups {
    StratifiedGroups {
        code: 0,
        pairs: pairs
            .into_iter()
            .enumerate()
            .map(|(i, (exposure, non_exposure))| BandPair {
                incident: band(10 * i as u32 + 20, 10 * i as u32 + 30),
                baseline: band(10 * i as u32 + 20, 10 * i as u32 + 30),
                exposure,
                non_exposure,
            })
            .collect(),
    }
}

#[test]
fn identical_groups_give_unit_ratio() {
    let values = BTreeMap::from([(1, -3.7), (2, -0.2), (3, -8.1)]);
    let g = groups(vec![(vec![1, 2, 3], vec![1, 2, 3])]);
    assert_eq!(contextual_ratio_from_values(&g, &values).unwrap().ratio, 1.0);
}

#[test]
fn worked_ratio() {
    let values = BTreeMap::from([(1, -9.0), (2, -4.5)]);
    let g = groups(vec![(vec![2], vec![1])]);
    let cr = contextual_ratio_from_values(&g, &values).unwrap();
    assert_eq!(cr.ratio, 2.0);
    assert_eq!(cr.pairs[0].ratio, Some(2.0));
}

#[test]
fn empty_pair_is_left_out_of_the_mean() {
    let values = BTreeMap::from([(1, -2.0), (2, -4.0), (3, -6.0), (4, -1.0), (5, -3.0)]);
    // pair ratios: (-4 + -6)/2 / -2 = 2.5; none; -3 / -1 = 3
    let g = groups(vec![(vec![1], vec![2, 3]), (vec![], vec![4]), (vec![4], vec![5])]);
    let cr = contextual_ratio_from_values(&g, &values).unwrap();
    assert_eq!(cr.ratio, 2.75);
    assert_eq!(cr.n_used(), 2);
    assert_eq!(cr.pairs[1].skipped, Some(SkipReason::EmptyGroup));
}

#[test]
fn unstable_pairs_are_skipped() {
    let values = BTreeMap::from([(1, -2.0), (2, 3.0), (3, 1e-9), (4, -5.0)]);
    let g = groups(vec![(vec![1], vec![2]), (vec![3], vec![4])]);
    match contextual_ratio_from_values(&g, &values) {
        Err(Error::NoUsableStrata { code, diagnostics }) => {
            assert_eq!(code, 0);
            assert_eq!(diagnostics.len(), 2);
        }
        other => panic!("{other:?}"),
    }
    let g = groups(vec![(vec![1], vec![2]), (vec![3], vec![4]), (vec![1], vec![4])]);
    let cr = contextual_ratio_from_values(&g, &values).unwrap();
    assert_eq!(cr.pairs[0].skipped, Some(SkipReason::MixedSign));
    assert_eq!(cr.pairs[1].skipped, Some(SkipReason::NearZeroExposure));
    assert_eq!(cr.ratio, 2.5);
    let missing = groups(vec![(vec![9], vec![1])]);
    assert!(matches!(
        contextual_ratio_from_values(&missing, &values),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn ratios_match_brute_force_and_ignore_scale() {
    let bands = AgeBand::desk();
    for seed in 0..30 {
        let cohort = random_cohort(seed + 100, 20, 3);
        let recs: Vec<&PatientRecord> = cohort.iter().collect();
        let mut rng = stream_rng(seed, 98, 0);
        let values: BTreeMap<u64, f64> = cohort
            .iter()
            .map(|r| (r.patient_id, -rng.random_range(0.5..9.5)))
            .collect();
        let g = age_stratified_groups(&recs, 1, 3, &bands).unwrap();
        let mut ratios = Vec::new();
        for p in &g.pairs {
            if p.exposure.is_empty() || p.non_exposure.is_empty() {
                continue;
            }
            let e: f64 = p.exposure.iter().map(|i| values[i]).sum::<f64>() / p.exposure.len() as f64;
            let n: f64 = p.non_exposure.iter().map(|i| values[i]).sum::<f64>() / p.non_exposure.len() as f64;
            ratios.push(n / e);
        }
        match contextual_ratio_from_values(&g, &values) {
            Ok(cr) => {
                let expect = ratios.iter().sum::<f64>() / ratios.len() as f64;
                assert!((cr.ratio - expect).abs() < 1e-12);
                let scaled: BTreeMap<u64, f64> = values.iter().map(|(k, v)| (*k, 3.5 * v)).collect();
                let again = contextual_ratio_from_values(&g, &scaled).unwrap();
                assert!((again.ratio - cr.ratio).abs() < 1e-12);
            }
            Err(Error::NoUsableStrata { .. }) => assert!(ratios.is_empty()),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn quadrants() {
    assert_eq!(Quadrant::classify(1.3, 0.2), Some(Quadrant::Associated));
    assert_eq!(Quadrant::classify(0.7, -0.2), Some(Quadrant::Dissociated));
    assert_eq!(Quadrant::classify(1.3, -0.2), Some(Quadrant::AmbiguousHighContext));
    assert_eq!(Quadrant::classify(0.7, 0.2), Some(Quadrant::AmbiguousHighCoef));
    assert_eq!(Quadrant::classify(1.0, 0.2), None);
    assert_eq!(Quadrant::classify(1.2, 0.0), None);
    for q in [Quadrant::Associated, Quadrant::AmbiguousHighCoef] {
        assert_eq!(Quadrant::parse(q.as_str()), Some(q));
    }
}

fn chi_square_v(t: [[u64; 2]; 2]) -> f64 {
    let n = (t[0][0] + t[0][1] + t[1][0] + t[1][1]) as f64;
    let mut chi = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let row = (t[i][0] + t[i][1]) as f64;
            let col = (t[0][j] + t[1][j]) as f64;
            let expected = row * col / n;
            chi += (t[i][j] as f64 - expected).powi(2) / expected;
        }
    }
    (chi / n).sqrt()
}

#[test]
fn cramers_matches_chi_square_on_small_tables() {
    for a in 0..12 {
        for b in 0..12 {
            for c in 0..12 {
                for d in 0..12 {
                    let t = [[a, b], [c, d]];
                    let v = cramers_v_table(t);
                    if v.degenerate {
                        assert_eq!(v.v, 0.0);
                    } else {
                        assert!((v.v - chi_square_v(t)).abs() < 1e-12, "{t:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn cramers_on_records() {
    let mut rng = stream_rng(3, 97, 0);
    let cohort: Vec<PatientRecord> = (0..100_000u64)
        .map(|id| {
            let mut ev = vec![(2, 30)];
            if rng.random_bool(0.3) {
                ev.push((0, 31));
            }
            if rng.random_bool(0.2) {
                ev.push((1, 32));
            }
            patient(id, 40, &ev)
        })
        .collect();
    let recs: Vec<&PatientRecord> = cohort.iter().collect();
    assert!(cramers_v(&recs, 0, 1).unwrap().v < 0.05);
    assert_eq!(cramers_v(&recs, 0, 0).unwrap().v, 1.0);
    assert!(cramers_v(&recs, 0, 2).unwrap().degenerate);
    assert!(cramers_v(&[], 0, 1).is_err());
    let pairs = collinear_pairs(&recs[..2000], &[0, 1, 2], 0.6).unwrap();
    assert!(pairs.is_empty());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("assoc.csv");
    let vocab = Vocabulary::synthetic(4, 2);
    write_association_csv(&path, &[], &vocab).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "code,label,coefficient_mean,coefficient_sd,contextual_ratio,n_band_pairs,quadrant\n"
    );
    assert!(read_association_csv(&path).unwrap().is_empty());

    let entries = vec![
        AssociationEntry {
            code: 4,
            coefficient_mean: 0.123456789012345,
            coefficient_sd: 0.01,
            contextual_ratio: Some(1.0000001),
            n_band_pairs_used: 3,
            quadrant: Some(Quadrant::Associated),
        },
        AssociationEntry {
            code: 1,
            coefficient_mean: -1e-17,
            coefficient_sd: 0.2,
            contextual_ratio: None,
            n_band_pairs_used: 0,
            quadrant: None,
        },
    ];
    write_association_csv(&path, &entries, &vocab).unwrap();
    assert_eq!(read_association_csv(&path).unwrap(), entries);
    let svg = dir.path().join("assoc.svg");
    write_association_svg(&svg, &entries, &vocab).unwrap();
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<circle"));
}

#[test]
fn map_over_model_is_complete_and_ordered() {
    let cohort = random_cohort(7, 60, 6);
    let recs: Vec<&PatientRecord> = cohort.iter().collect();
    let mut arch = crate::student::ArchConfig::desk(6);
    arch.embed_dim = 4;
    arch.hidden_dim = 3;
    let model = init_student(&arch, 1).unwrap();
    let config = AssociationConfig {
        contextual_samples: 3,
        coefficient_samples: 50,
        ..AssociationConfig::default()
    };
    let entries = association_map(&model, &recs, &config).unwrap();
    assert_eq!(entries.iter().map(|e| e.code).collect::<BTreeSet<_>>().len(), 6);
    assert_eq!(entries, association_map(&model, &recs, &config).unwrap());
    for w in entries.windows(2) {
        let (qa, qb) = (
            w[0].quadrant.map_or(4, |q| q as u8),
            w[1].quadrant.map_or(4, |q| q as u8),
        );
        assert!(qa < qb || (qa == qb && w[0].strength() >= w[1].strength()));
    }
    for e in &entries {
        if let (Some(cr), Some(q)) = (e.contextual_ratio, e.quadrant) {
            assert_eq!(Quadrant::classify(cr, e.coefficient_mean), Some(q));
        }
    }

    let code = entries.iter().find(|e| e.contextual_ratio.is_some()).unwrap().code;
    let g = age_stratified_groups(&recs, code, 6, &config.bands).unwrap();
    let direct = contextual_ratio(&model, &g, &recs, 3, 0).unwrap();
    let entry = entries.iter().find(|e| e.code == code).unwrap();
    assert!((direct.ratio - entry.contextual_ratio.unwrap()).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let rows = write_age_histograms(&dir.path().join("h.csv"), &[g], &recs).unwrap();
    assert!(rows.iter().any(|r| r.group == "non_exposure"));
}
