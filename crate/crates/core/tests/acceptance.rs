//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the
//! test fails if any of them does.
//!
//! Slow: trains twenty desk-scale students. Run with `--release` or the
//! default optimized dev profile.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskdistill_core::association::{
    age_stratified_groups, association_map, contextual_ratio, cramers_v_table, AgeBand, AssociationConfig, Quadrant,
};
use riskdistill_core::bayes::gaussian_kl;
use riskdistill_core::cohort::{
    generate_cohort, split_cohort, Cohort, Encounter, GeneratorConfig, PatientRecord, PlantedEffect, Split,
    SPLIT_FRACTIONS,
};
use riskdistill_core::explainer::{self, fidelity_report, fit_explainer, fit_explainers, ExplainerConfig, LOGITS};
use riskdistill_core::metrics::{auprc, auroc, evaluate_ci_protocol, evaluate_mean_protocol};
use riskdistill_core::pipeline::{parse_config_str, run_all};
use riskdistill_core::student::{
    binary_entropy, distill_loss, init_student, names, objective_tape, total_loss, train_student, ArchConfig, Batch,
    EncodedPatient, Row, SoftLabelMode, StudentModel, Targets, TrainConfig,
};
use riskdistill_core::teacher::Teacher;
use riskdistill_core::PredictiveDistribution;
use riskdistill_diffcore::{finite_difference_check, Tensor};

type Check<'a> = Box<dyn FnOnce() -> Verdict + 'a>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_cohort(seed: u64, extra: &[PlantedEffect]) -> (GeneratorConfig, Cohort) {
    let mut g = GeneratorConfig::desk();
    g.seed = seed;
    g.planted_effects.extend_from_slice(extra);
    let mut c = generate_cohort(&g).unwrap();
    split_cohort(&mut c, SPLIT_FRACTIONS, seed).unwrap();
    (g, c)
}

fn small_arch(vocab: usize) -> ArchConfig {
    ArchConfig {
        embed_dim: 8,
        hidden_dim: 8,
        ..ArchConfig::desk(vocab)
    }
}

fn encode_all(records: &[&PatientRecord], arch: &ArchConfig) -> Vec<EncodedPatient> {
    records.iter().map(|r| EncodedPatient::new(r, arch).unwrap()).collect()
}

fn set(model: &mut StudentModel, name: &str, f: impl Fn(usize) -> f64) {
    for (i, v) in model.params.get_mut(name).unwrap().data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

// ---------------------------------------------------------------- gradients

fn micro_records() -> Vec<PatientRecord> {
    let visits: [&[(usize, u32)]; 4] = [
        &[(0, 40), (3, 41), (1, 44)],
        &[(2, 50), (2, 52), (5, 55), (4, 57)],
        &[(1, 33)],
        &[(4, 60), (0, 61), (3, 61), (5, 63), (1, 64)],
    ];
    visits
        .iter()
        .enumerate()
        .map(|(i, v)| PatientRecord {
            patient_id: i as u64,
            encounters: v.iter().map(|&(code, age)| Encounter { code, age }).collect(),
            baseline_age: 66,
            label: i % 2 == 0,
            split: None,
        })
        .collect()
}

fn gradients() -> Verdict {
    let arch = ArchConfig {
        embed_dim: 3,
        hidden_dim: 2,
        n_inducing: 4,
        ..ArchConfig::desk(6)
    };
    let mut model = init_student(&arch, 3).unwrap();
    // off-grid values so the GP scale, lengthscale and variance paths all carry signal
    set(&mut model, names::GP_SCALE_LOWER, |i| 0.01 * ((i * 7 % 5) as f64 - 2.0));
    set(&mut model, names::GP_LOG_LENGTHSCALE, |_| 0.3);
    set(&mut model, names::GP_LOG_VARIANCE, |_| -0.2);
    let records = micro_records();
    let refs: Vec<&PatientRecord> = records.iter().collect();
    let enc = encode_all(&refs, &arch);
    let rows = || -> Vec<Row<'_>> {
        enc.iter()
            .enumerate()
            .map(|(i, p)| Row::new(p, 11, 0.3 * i as f64 - 0.4))
            .collect()
    };
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let soft = [0.7, 0.2, 0.4, 0.1];

    let mut worst = 0.0f64;
    let mut uncovered = Vec::new();
    for (soft, alpha) in [(Some(&soft[..]), 0.5), (None, 1.0)] {
        let targets = Targets {
            labels: &labels,
            soft,
            alpha,
            kl_scale: 0.05,
        };
        let tape = objective_tape(&model, &Batch::new(rows()), &targets).unwrap();
        let check = finite_difference_check(&tape, &model.params, "total", 1e-5).unwrap();
        worst = worst.max(check.max_relative_error);
        let grads = tape.gradient(&model.params, "total").unwrap();
        for name in model.params.keys() {
            if grads.get(name).is_none_or(|g| g.data().iter().all(|x| *x == 0.0)) {
                uncovered.push(name.clone());
            }
        }
    }

    let patient = &enc[3];
    let config = ExplainerConfig {
        samples_per_step: 3,
        ..Default::default()
    };
    let tape = explainer::objective(&model, patient, 0.6, &config, 5).unwrap();
    let mut inputs = model.params.clone();
    let t = patient.sequence.len();
    inputs.insert(
        LOGITS.into(),
        Tensor::row((0..t).map(|i| 0.4 * i as f64 - 0.7).collect()),
    );
    let check = finite_difference_check(&tape, &inputs, "loss", 1e-5).unwrap();
    worst = worst.max(check.max_relative_error);
    let grads = tape.gradient(&inputs, "loss").unwrap();
    if grads[LOGITS].data().contains(&0.0) {
        uncovered.push(LOGITS.into());
    }
    uncovered.sort();
    uncovered.dedup();
    verdict(
        worst < 1e-4 && uncovered.is_empty(),
        format!(
            "max relative error {worst:.2e} over {} tensors plus logits; without gradient: {uncovered:?}",
            model.params.len()
        ),
    )
}

// ------------------------------------------------------------- distillation

struct SeedRun {
    generator: GeneratorConfig,
    cohort: Cohort,
    bdld: StudentModel,
}

fn distillation(runs: &mut Vec<SeedRun>) -> Verdict {
    let started = Instant::now();
    let mut wins = 0;
    let mut gaps = Vec::new();
    let mut prevalence_ok = true;
    for seed in 0..10u64 {
        let (generator, cohort) = desk_cohort(seed, &[]);
        prevalence_ok &= (cohort.prevalence() - 0.083).abs() <= 0.01;
        let (train, tune, val) = (
            cohort.split(Split::Train),
            cohort.split(Split::Tune),
            cohort.split(Split::Validation),
        );
        let arch = small_arch(cohort.vocabulary.len());
        let teacher = Teacher::oracle(&cohort.truth, 0.3).unwrap();
        let enc = encode_all(&val, &arch);
        let refs: Vec<&EncodedPatient> = enc.iter().collect();
        let labels: Vec<bool> = val.iter().map(|r| r.label).collect();
        let config = TrainConfig {
            max_epochs: 3,
            batch_size: 128,
            learning_rate: 1e-3,
            alpha: 0.5,
            patience: 2,
            seed,
            soft_label: SoftLabelMode::Mean,
            ..Default::default()
        };
        let fit = |t: Option<&Teacher>| {
            let model = train_student(init_student(&arch, seed).unwrap(), &train, &tune, t, &config)
                .unwrap()
                .model;
            let means: Vec<f64> = model
                .predict_many(&refs, 10, seed)
                .unwrap()
                .iter()
                .map(|d| d.mean())
                .collect();
            (model, auroc(&means, &labels).unwrap())
        };
        let (_, bdl) = fit(None);
        let (bdld, distilled) = fit(Some(&teacher));
        let gap = distilled - bdl;
        println!(
            "  seed {seed}: prevalence {:.4} BDL {bdl:.4} BDLD {distilled:.4} gap {gap:+.4}",
            cohort.prevalence()
        );
        wins += usize::from(gap >= 0.02);
        gaps.push(gap);
        runs.push(SeedRun {
            generator,
            cohort,
            bdld,
        });
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        wins >= 8 && prevalence_ok && secs < 900.0,
        format!(
            "gap >= 0.02 in {wins}/10 seeds, median gap {:+.4}, prevalence within 1pt: {prevalence_ok}, {secs:.0}s",
            median(gaps)
        ),
    )
}

// -------------------------------------------------------------- association

fn association(runs: &[SeedRun]) -> Verdict {
    let mut fractions = Vec::new();
    let (mut planted_logs, mut null_logs) = (Vec::new(), Vec::new());
    for (seed, run) in runs.iter().enumerate() {
        let all: Vec<&PatientRecord> = run.cohort.records.iter().collect();
        let val = run.cohort.split(Split::Validation);
        let config = AssociationConfig {
            seed: seed as u64,
            ..Default::default()
        };
        let entries = association_map(&run.bdld, &val, &config).unwrap();
        let by_code: BTreeMap<usize, _> = entries.iter().map(|e| (e.code, e)).collect();
        let weights: BTreeMap<usize, f64> = run
            .generator
            .planted_effects
            .iter()
            .map(|e| (e.code, e.weight))
            .collect();
        let interacting: Vec<usize> = run
            .generator
            .planted_interactions
            .iter()
            .flat_map(|i| i.codes)
            .collect();

        let (mut matched, mut total) = (0, 0);
        for (&code, &w) in &weights {
            let exposed = all.iter().filter(|r| r.has_code(code)).count();
            if w.abs() < 1.0 || exposed < 500 {
                continue;
            }
            total += 1;
            let e = by_code[&code];
            // the quadrant's sign is the sign of its coefficient side
            let positive = matches!(e.quadrant, Some(Quadrant::Associated | Quadrant::AmbiguousHighCoef));
            let negative = matches!(e.quadrant, Some(Quadrant::Dissociated | Quadrant::AmbiguousHighContext));
            if (w > 0.0 && positive) || (w < 0.0 && negative) {
                matched += 1;
            }
            if let Some(cr) = e.contextual_ratio {
                planted_logs.push(cr.ln().abs());
            }
        }
        for e in &entries {
            if !weights.contains_key(&e.code) && !interacting.contains(&e.code) {
                if let Some(cr) = e.contextual_ratio {
                    null_logs.push(cr.ln().abs());
                }
            }
        }
        let fraction = matched as f64 / total.max(1) as f64;
        println!("  seed {seed}: {matched}/{total} planted signs recovered");
        fractions.push(fraction);
    }
    let mean_fraction = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    let (mp, mn) = (median(planted_logs), median(null_logs));
    verdict(
        fractions.len() == 10 && mean_fraction >= 0.8 && mn < mp,
        format!(
            "sign match {:.1}% over {} seeds; median |ln CR| planted {mp:.4}, null {mn:.4}",
            100.0 * mean_fraction,
            fractions.len()
        ),
    )
}

// -------------------------------------------------------- contextual oracle

fn brute_groups(
    records: &[PatientRecord],
    code: usize,
    bands: &[AgeBand],
) -> Vec<(AgeBand, AgeBand, Vec<u64>, Vec<u64>)> {
    let band_index = |age: u32| bands.iter().position(|b| b.lower <= age && age < b.upper);
    let mut out = Vec::new();
    for (i, inc) in bands.iter().enumerate() {
        for (j, base) in bands.iter().enumerate().skip(i) {
            let mut exposure = Vec::new();
            let mut non_exposure = Vec::new();
            for r in records {
                if band_index(r.baseline_age) != Some(j) {
                    continue;
                }
                let first = r.encounters.iter().filter(|e| e.code == code).map(|e| e.age).min();
                match first {
                    None => non_exposure.push(r.patient_id),
                    Some(a) if band_index(a) == Some(i) => exposure.push(r.patient_id),
                    Some(_) => {}
                }
            }
            out.push((*inc, *base, exposure, non_exposure));
        }
    }
    out
}

fn random_small_cohort(rng: &mut ChaCha8Rng, first_id: u64) -> Vec<PatientRecord> {
    let n = rng.random_range(1..=20);
    (0..n)
        .map(|i| {
            let baseline_age = rng.random_range(20..95);
            let k = rng.random_range(1..6);
            let encounters = (0..k)
                .map(|_| Encounter {
                    code: rng.random_range(0..5),
                    age: rng.random_range(16..=baseline_age),
                })
                .collect();
            PatientRecord {
                patient_id: first_id + i,
                encounters,
                baseline_age,
                label: rng.random_bool(0.5),
                split: None,
            }
        })
        .collect()
}

fn contextual_oracle() -> Verdict {
    let arch = ArchConfig {
        embed_dim: 3,
        hidden_dim: 3,
        n_inducing: 4,
        ..ArchConfig::desk(5)
    };
    let model = init_student(&arch, 9).unwrap();
    let bands = AgeBand::desk();
    let n_samples = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut membership_errors, mut ratio_checks, mut worst) = (0, 0, 0.0f64);
    for trial in 0..150u64 {
        let mut records = random_small_cohort(&mut rng, trial * 100);
        for r in &mut records {
            r.encounters.sort_by_key(|e| e.age);
        }
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let enc = encode_all(&refs, &arch);
        let enc_refs: Vec<&EncodedPatient> = enc.iter().collect();
        let latents = model.latent_samples(&enc_refs, n_samples, trial).unwrap();
        let value: BTreeMap<u64, f64> = records
            .iter()
            .zip(&latents)
            .map(|(r, l)| {
                (
                    r.patient_id,
                    l.iter().map(|x| x.contextual).sum::<f64>() / n_samples as f64,
                )
            })
            .collect();
        for code in 0..5 {
            let groups = age_stratified_groups(&refs, code, 5, &bands).unwrap();
            let brute = brute_groups(&records, code, &bands);
            let same = groups.pairs.len() == brute.len()
                && groups.pairs.iter().zip(&brute).all(|(p, (i, b, e, n))| {
                    p.incident == *i && p.baseline == *b && &p.exposure == e && &p.non_exposure == n
                });
            if !same {
                membership_errors += 1;
                continue;
            }
            let mean = |ids: &[u64]| ids.iter().map(|id| value[id]).sum::<f64>() / ids.len() as f64;
            let ratios: Vec<f64> = brute
                .iter()
                .filter(|(_, _, e, n)| !e.is_empty() && !n.is_empty())
                .filter_map(|(_, _, e, n)| {
                    let (me, mn) = (mean(e), mean(n));
                    (me.abs() >= 1e-6 && me * mn >= 0.0).then(|| mn / me)
                })
                .collect();
            let computed = contextual_ratio(&model, &groups, &refs, n_samples, trial);
            match (computed, ratios.is_empty()) {
                (Err(_), true) => {}
                (Ok(cr), false) => {
                    let expected = ratios.iter().sum::<f64>() / ratios.len() as f64;
                    worst = worst.max((cr.ratio - expected).abs());
                    ratio_checks += 1;
                }
                _ => membership_errors += 1,
            }
        }
    }
    verdict(
        membership_errors == 0 && worst <= 1e-12 && ratio_checks > 100,
        format!("150 cohorts of at most 20 patients: {membership_errors} mismatches, {ratio_checks} ratios, max error {worst:.1e}"),
    )
}

// --------------------------------------------------------------- explainer

fn explainer_fidelity() -> Verdict {
    let driver = |code| PlantedEffect { code, weight: 3.0 };
    let (g, cohort) = desk_cohort(0, &[driver(13), driver(160)]);
    let (train, tune, val) = (
        cohort.split(Split::Train),
        cohort.split(Split::Tune),
        cohort.split(Split::Validation),
    );
    let arch = small_arch(cohort.vocabulary.len());
    let teacher = Teacher::oracle(&cohort.truth, 0.3).unwrap();
    let config = TrainConfig {
        max_epochs: 5,
        batch_size: 128,
        learning_rate: 5e-3,
        alpha: 0.5,
        patience: 2,
        seed: 0,
        soft_label: SoftLabelMode::Mean,
        ..Default::default()
    };
    let model = train_student(init_student(&arch, 0).unwrap(), &train, &tune, Some(&teacher), &config)
        .unwrap()
        .model;
    let explain = |seed| ExplainerConfig {
        gamma: 0.01,
        seed,
        ..Default::default()
    };

    // two drivers planted among twenty codes that carry no effect
    let interacting: Vec<usize> = g.planted_interactions.iter().flat_map(|i| i.codes).collect();
    let nulls: Vec<usize> = (0..200)
        .filter(|c| !g.planted_effects.iter().any(|e| e.code == *c) && !interacting.contains(c))
        .take(20)
        .collect();
    let mut hits = 0;
    for s in 0..10u64 {
        let mut k = s as usize;
        let encounters = (0..40u32)
            .map(|i| {
                let code = match i {
                    13 => 13,
                    29 => 160,
                    _ => {
                        k = k.wrapping_mul(31).wrapping_add(7);
                        nulls[k % nulls.len()]
                    }
                };
                Encounter { code, age: 40 + i / 4 }
            })
            .collect();
        let record = PatientRecord {
            patient_id: 900_000 + s,
            encounters,
            baseline_age: 50,
            label: true,
            split: None,
        };
        let fit = fit_explainer(&model, &EncodedPatient::new(&record, &arch).unwrap(), &explain(s)).unwrap();
        let top = &fit.scores.ranking()[..5];
        hits += usize::from(top.contains(&13) && top.contains(&29));
    }

    let patients = encode_all(
        &val.iter()
            .copied()
            .filter(|r| r.has_code(13) || r.has_code(160))
            .take(50)
            .collect::<Vec<_>>(),
        &arch,
    );
    let refs: Vec<&EncodedPatient> = patients.iter().collect();
    let fits = fit_explainers(&model, &refs, &explain(0)).unwrap();
    let faithful = patients
        .iter()
        .zip(&fits)
        .filter(|(p, f)| {
            let r = fidelity_report(&model, p, &f.scores, 0.5, 30, 0).unwrap();
            r.mean_gap() < 0.1 && r.fraction_selected < 0.25
        })
        .count();
    verdict(
        patients.len() == 50 && faithful >= 40 && hits >= 8,
        format!(
            "faithful and sparse for {faithful}/{} patients; both drivers in top 5 for {hits}/10 seeds",
            patients.len()
        ),
    )
}

// ----------------------------------------------------------------- metrics

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut auroc_worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        // every other trial draws from a coarse grid to force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    rng.random_range(0..8) as f64 / 8.0
                } else {
                    rng.random()
                }
            })
            .collect();
        auroc_worst = auroc_worst.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
    }

    let mut ap_worst = 0.0f64;
    for v in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + v);
        let n = 5 + v as usize;
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[n / 2] = true;
        let scores: Vec<f64> = (0..n)
            .map(|i| ((i * 37 + v as usize * 11) % 101) as f64 + 0.5 * i as f64 / n as f64)
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let n_pos = labels.iter().filter(|l| **l).count() as f64;
        let mut tp = 0.0;
        let mut hand = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if labels[i] {
                tp += 1.0;
                hand += tp / (rank + 1) as f64;
            }
        }
        ap_worst = ap_worst.max((auprc(&scores, &labels).unwrap() - hand / n_pos).abs());
    }

    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.083)).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let prevalence = labels.iter().filter(|l| **l).count() as f64 / 1e4;
    let random_ap = auprc(&scores, &labels).unwrap();
    verdict(
        auroc_worst < 1e-12 && ap_worst < 1e-12 && (random_ap - prevalence).abs() < 0.02,
        format!(
            "AUROC vs pairwise max error {auroc_worst:.1e}; AP vs hand max error {ap_worst:.1e}; random AP {random_ap:.4} at prevalence {prevalence:.4}"
        ),
    )
}

fn protocols() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<bool> = (0..300).map(|i| i % 4 == 0 || rng.random_bool(0.1)).collect();
    let dists: Vec<PredictiveDistribution> = labels
        .iter()
        .map(|&l| {
            let p: f64 = rng.random::<f64>() * 0.6 + if l { 0.3 } else { 0.0 };
            PredictiveDistribution::new(vec![p; 30]).unwrap()
        })
        .collect();
    let mean = evaluate_mean_protocol(&dists, &labels, 10).unwrap();
    let ci = evaluate_ci_protocol(&dists, &labels, 30, 10).unwrap();
    let intervals = ci.ci.clone().unwrap();
    let zero_width = intervals.auroc.width() == 0.0 && intervals.auprc.width() == 0.0;
    let identical = mean.auroc == ci.auroc && mean.auprc == ci.auprc && mean.calibration_bins == ci.calibration_bins;
    verdict(
        zero_width && identical && ci.n_metric_evaluations == 30,
        format!(
            "interval widths {} and {}; protocols identical: {identical}; {} evaluations",
            intervals.auroc.width(),
            intervals.auprc.width(),
            ci.n_metric_evaluations
        ),
    )
}

fn cramers() -> Verdict {
    let mut worst = 0.0f64;
    let mut tables = 0u64;
    let mut degenerate_ok = true;
    for a in 0..=50u64 {
        for b in 0..=50 - a {
            for c in 0..=50 - a {
                for d in 0..=(50 - b).min(50 - c) {
                    tables += 1;
                    let got = cramers_v_table([[a, b], [c, d]]);
                    let obs = [[a, b], [c, d]].map(|r| r.map(|x| x as f64));
                    let rows = [obs[0][0] + obs[0][1], obs[1][0] + obs[1][1]];
                    let cols = [obs[0][0] + obs[1][0], obs[0][1] + obs[1][1]];
                    let n = rows[0] + rows[1];
                    if rows.contains(&0.0) || cols.contains(&0.0) {
                        degenerate_ok &= got.degenerate && got.v == 0.0;
                        continue;
                    }
                    let mut chi2 = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            let e = rows[i] * cols[j] / n;
                            chi2 += (obs[i][j] - e).powi(2) / e;
                        }
                    }
                    let v = (chi2 / n).sqrt();
                    worst = worst.max((got.v - v).abs() / v.max(1.0));
                }
            }
        }
    }
    let worked = cramers_v_table([[30, 10], [10, 30]]).v;
    verdict(
        worst < 1e-12 && degenerate_ok && worked == 0.5,
        format!("{tables} tables, max error {worst:.1e}, empty margins flagged: {degenerate_ok}; [[30,10],[10,30]] gives {worked}"),
    )
}

// ------------------------------------------------------------- determinism

fn run_config(dir: &Path) -> String {
    format!(
        r#"
output_dir = "{}"
global_seed = 11
explain_patients = 2

[generator]
n_patients = 1500

[student.arch]
embed_dim = 4
hidden_dim = 4
n_inducing = 9

[student.bdl]
max_epochs = 1
batch_size = 128

[student.bdld]
max_epochs = 1
batch_size = 128

[association]
contextual_samples = 5
coefficient_samples = 100

[explainer]
iterations = 20
samples_per_step = 4
"#,
        dir.display()
    )
}

fn files_under(dir: &Path, sub: &str, ext: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join(sub)).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == ext) {
            out.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            );
        }
    }
    out
}

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for d in &dirs {
        let config = parse_config_str(&run_config(d.path())).unwrap();
        run_all(&config, false).unwrap();
        let mut files = files_under(d.path(), "metrics", "json");
        files.extend(files_under(d.path(), "association", "csv"));
        outputs.push(files);
    }
    let differing: Vec<&String> = outputs[0]
        .keys()
        .filter(|k| outputs[1].get(*k) != Some(&outputs[0][*k]))
        .collect();
    verdict(
        outputs[0].len() >= 8 && outputs[0].len() == outputs[1].len() && differing.is_empty(),
        format!(
            "{} metric and association files compared, differing: {differing:?}",
            outputs[0].len()
        ),
    )
}

// ---------------------------------------------------------- loss identities

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scalar_alpha_one = (0..1000).all(|_| {
        let (e, d) = (rng.random_range(0.0..50.0), rng.random_range(0.0..5.0));
        total_loss(e, d, 1.0) == e
    });

    let arch = ArchConfig {
        embed_dim: 3,
        hidden_dim: 2,
        n_inducing: 4,
        ..ArchConfig::desk(6)
    };
    let model = init_student(&arch, 1).unwrap();
    let records = micro_records();
    let refs: Vec<&PatientRecord> = records.iter().collect();
    let enc = encode_all(&refs, &arch);
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let soft = [0.9, 0.1, 0.3, 0.6];
    let run = |soft: Option<&[f64]>| {
        let rows = enc.iter().map(|p| Row::new(p, 4, 0.1)).collect();
        let targets = Targets {
            labels: &labels,
            soft,
            alpha: 1.0,
            kl_scale: 0.1,
        };
        let tape = objective_tape(&model, &Batch::new(rows), &targets).unwrap();
        let out = tape.evaluate(&model.params).unwrap();
        (out["total"].data()[0], out["elbo"].data()[0])
    };
    let (distilled, elbo) = run(Some(&soft));
    let (plain, plain_elbo) = run(None);
    let tape_alpha_one = distilled == elbo && plain == plain_elbo && distilled == plain;

    let entropy_worst = (1..1000)
        .map(|i| {
            let p = i as f64 / 1000.0;
            let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            (distill_loss(p, p) - h).abs().max((binary_entropy(p) - h).abs())
        })
        .fold(0.0, f64::max);

    let mut min_kl = f64::INFINITY;
    let mut state = init_student(&arch, 2).unwrap();
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let log_sd: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..2.0)).collect();
        min_kl = min_kl.min(gaussian_kl(&mean, &log_sd, rng.random_range(0.05..3.0)));
        for (name, t) in state.params.iter_mut() {
            if name == names::GP_INDUCING {
                continue;
            }
            for v in t.data_mut() {
                *v = rng.random_range(-1.5..1.5);
            }
        }
        min_kl = min_kl.min(state.weight_kl()).min(state.gp_kl().unwrap());
    }
    verdict(
        scalar_alpha_one && tape_alpha_one && entropy_worst <= 1e-12 && min_kl >= 0.0,
        format!(
            "alpha 1 equals the ELBO: scalar {scalar_alpha_one}, objective {tape_alpha_one}; entropy max error {entropy_worst:.1e}; smallest KL {min_kl:.3e}"
        ),
    )
}

#[test]
fn acceptance() {
    let mut runs = Vec::new();
    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("distillation benefit", Box::new(|| distillation(&mut runs))),
        ("contextual-ratio oracle", Box::new(contextual_oracle)),
        ("explainer fidelity", Box::new(explainer_fidelity)),
        ("metric oracles", Box::new(metric_oracles)),
        ("protocol semantics", Box::new(protocols)),
        ("cramers v", Box::new(cramers)),
        ("determinism", Box::new(determinism)),
        ("loss identities", Box::new(loss_identities)),
    ];
    let mut results: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let ids = [1, 2, 4, 5, 6, 7, 8, 9, 10];
    for ((name, check), id) in criteria.into_iter().zip(ids) {
        let started = Instant::now();
        let v = check();
        let secs = started.elapsed().as_secs_f64();
        println!(
            "criterion {id} {} {name}: {} ({secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((id, name, v, secs));
    }
    // association reuses the distilled students of criterion 2
    let started = Instant::now();
    let v = association(&runs);
    let secs = started.elapsed().as_secs_f64();
    println!(
        "criterion 3 {} association recovery: {} ({secs:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    results.push((3, "association recovery", v, secs));

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (id, name, v, _) in &results {
        println!("criterion {id:>2} {}: {name}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
