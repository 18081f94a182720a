use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RunConfig, RunManifest, Stage, TeacherKind};
use crate::association::{
    age_stratified_groups, association_map, collinear_pairs, write_age_histograms, write_association_csv,
    write_association_svg, AssociationEntry, Quadrant,
};
use crate::cohort::{
    csv_error, generate_cohort, read_cohort_jsonl, read_ground_truth, split_cohort, write_cohort_jsonl,
    write_ground_truth, write_truth_table_csv, PatientRecord, Split, Vocabulary, SPLIT_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::explainer::{
    fidelity_report, fit_explainers, write_explanation_csv, write_explanation_summary, ExplanationSummary,
};
use crate::metrics::{
    evaluate_ci_protocol, evaluate_mean_protocol, write_calibration_csv, write_report_json, Interval,
};
use crate::predictive::PredictiveDistribution;
use crate::rng::{derive_seed, streams};
use crate::student::{
    config_hash, init_student, load_student, save_student, train_student, EncodedPatient, StudentModel,
};
use crate::teacher::{load_teacher, save_teacher, train_reference_teacher, Teacher};

pub(super) const COHORT: &str = "cohort.jsonl";
pub(super) const GROUND_TRUTH: &str = "ground_truth.json";
pub(super) const TRUTH_TABLE: &str = "truth_table.csv";
pub(super) const TEACHER: &str = "teacher.json";
pub(super) const METRICS_SUMMARY: &str = "metrics/summary.json";
pub(super) const ASSOCIATION_CSV: &str = "association/association.csv";
pub(super) const ASSOCIATION_SUMMARY: &str = "association/summary.json";
pub(super) const EXPLANATION_INDEX: &str = "explanations/index.json";

pub(super) struct Context<'a> {
    pub config: &'a RunConfig,
    pub dir: &'a Path,
    pub manifest: &'a RunManifest,
    pub config_hash: &'a str,
}

impl Context<'_> {
    fn path(&self, file: &str) -> std::path::PathBuf {
        self.dir.join(file)
    }

    fn subdir(&self, name: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))
    }

    fn seed(&self) -> u64 {
        self.config.global_seed
    }

    fn records(&self) -> Result<Vec<PatientRecord>> {
        read_cohort_jsonl(&self.path(COHORT))
    }

    fn vocabulary(&self) -> Vocabulary {
        self.config.generator.vocabulary()
    }

    fn teacher(&self) -> Result<Teacher> {
        load_teacher(
            &self.path(TEACHER),
            &self.manifest.get(Stage::Teach).expect("dependency").config_hash,
        )
    }

    fn student(&self, stage: Stage) -> Result<StudentModel> {
        let file = student_file(stage);
        let hash = &self.manifest.get(stage).expect("dependency").config_hash;
        Ok(load_student(&self.path(file), hash)?.0)
    }
}

fn student_file(stage: Stage) -> &'static str {
    match stage {
        Stage::TrainBdl => "bdl.json",
        _ => "bdld.json",
    }
}

fn split(records: &[PatientRecord], which: Split) -> Vec<&PatientRecord> {
    records.iter().filter(|r| r.split == Some(which)).collect()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Hash of the config slice a stage depends on.
pub(super) fn stage_hash(config: &RunConfig, stage: Stage) -> String {
    let slice = match stage {
        Stage::Generate => serde_json::json!(config.generator),
        Stage::Teach => serde_json::json!(config.teacher),
        Stage::TrainBdl => serde_json::json!([config.student.arch, config.student.bdl]),
        Stage::TrainBdld => serde_json::json!([config.student.arch, config.student.bdld]),
        Stage::Evaluate => serde_json::json!(config.metrics),
        Stage::Associate => serde_json::json!([config.association, config.collinearity_threshold]),
        Stage::Explain => serde_json::json!([config.explainer, config.explain_patients]),
    };
    config_hash(&serde_json::json!({ "stage": stage.name(), "seed": config.global_seed, "config": slice }))
}

/// Runs one stage and returns the files it wrote, relative to the run directory.
pub(super) fn run(ctx: &Context<'_>, stage: Stage) -> Result<Vec<String>> {
    match stage {
        Stage::Generate => generate(ctx),
        Stage::Teach => teach(ctx),
        Stage::TrainBdl | Stage::TrainBdld => train(ctx, stage),
        Stage::Evaluate => evaluate(ctx),
        Stage::Associate => associate(ctx),
        Stage::Explain => explain(ctx),
    }
}

fn generate(ctx: &Context<'_>) -> Result<Vec<String>> {
    let mut cohort = generate_cohort(&ctx.config.generator)?;
    split_cohort(&mut cohort, SPLIT_FRACTIONS, ctx.seed())?;
    write_cohort_jsonl(&ctx.path(COHORT), &cohort.records)?;
    write_ground_truth(&ctx.path(GROUND_TRUTH), &cohort.truth)?;
    write_truth_table_csv(&ctx.path(TRUTH_TABLE), &cohort.truth.table.rows)?;
    Ok(vec![COHORT.into(), GROUND_TRUTH.into(), TRUTH_TABLE.into()])
}

fn teach(ctx: &Context<'_>) -> Result<Vec<String>> {
    let section = &ctx.config.teacher;
    let teacher = match section.kind {
        TeacherKind::Oracle => Teacher::oracle(&read_ground_truth(&ctx.path(GROUND_TRUTH))?, section.noise_sd)?,
        TeacherKind::Trained => {
            let records = ctx.records()?;
            train_reference_teacher(
                &split(&records, Split::Train),
                &split(&records, Split::Tune),
                ctx.config.generator.vocab_size(),
                &section.trained,
            )?
        }
    };
    save_teacher(&ctx.path(TEACHER), &teacher, ctx.config_hash)?;
    Ok(vec![TEACHER.into()])
}

fn train(ctx: &Context<'_>, stage: Stage) -> Result<Vec<String>> {
    let records = ctx.records()?;
    let (teacher, config) = match stage {
        Stage::TrainBdl => (None, &ctx.config.student.bdl),
        _ => (Some(ctx.teacher()?), &ctx.config.student.bdld),
    };
    let model = init_student(&ctx.config.student.arch, ctx.seed())?;
    let outcome = train_student(
        model,
        &split(&records, Split::Train),
        &split(&records, Split::Tune),
        teacher.as_ref(),
        config,
    )?;
    let file = student_file(stage);
    save_student(&ctx.path(file), &outcome.model, None, ctx.config_hash)?;
    let history = file.replace(".json", "_history.json");
    write_json(&ctx.path(&history), &outcome.history)?;
    Ok(vec![file.into(), history])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct ModelMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_ci: Interval,
    pub auprc_ci: Interval,
    pub ci_mean_auroc: f64,
    pub ci_mean_auprc: f64,
}

fn evaluate(ctx: &Context<'_>) -> Result<Vec<String>> {
    ctx.subdir("metrics")?;
    let m = &ctx.config.metrics;
    let records = ctx.records()?;
    let val = split(&records, Split::Validation);
    let labels: Vec<bool> = val.iter().map(|r| r.label).collect();
    let seed = derive_seed(ctx.seed(), streams::EVAL, 0);

    let teacher = ctx.teacher()?;
    let teacher_dists: Vec<PredictiveDistribution> = val
        .par_iter()
        .map(|r| teacher.predict(r, m.n_samples, seed))
        .collect::<Result<_>>()?;
    let mut per_model = vec![("teacher", teacher_dists)];
    for (name, stage) in [("bdld", Stage::TrainBdld), ("bdl", Stage::TrainBdl)] {
        let model = ctx.student(stage)?;
        let enc: Vec<EncodedPatient> = val
            .iter()
            .map(|r| EncodedPatient::new(r, &model.arch))
            .collect::<Result<_>>()?;
        let refs: Vec<&EncodedPatient> = enc.iter().collect();
        per_model.push((name, model.predict_many(&refs, m.n_samples, seed)?));
    }

    let mut files = Vec::new();
    let mut summary = BTreeMap::new();
    for (name, dists) in &per_model {
        let mean = evaluate_mean_protocol(dists, &labels, m.n_bins)?;
        let ci = evaluate_ci_protocol(dists, &labels, m.ci_rounds, m.n_bins)?;
        for (suffix, report) in [("mean30", &mean), ("ci30", &ci)] {
            let f = format!("metrics/{name}_{suffix}.json");
            write_report_json(&ctx.path(&f), report)?;
            files.push(f);
        }
        let f = format!("metrics/{name}_calibration.csv");
        write_calibration_csv(&ctx.path(&f), &mean.calibration_bins)?;
        files.push(f);
        let intervals = ci.ci.expect("ci protocol reports intervals");
        summary.insert(
            name.to_string(),
            ModelMetrics {
                auroc: mean.auroc,
                auprc: mean.auprc,
                auroc_ci: intervals.auroc,
                auprc_ci: intervals.auprc,
                ci_mean_auroc: ci.auroc,
                ci_mean_auprc: ci.auprc,
            },
        );
    }
    write_json(&ctx.path(METRICS_SUMMARY), &summary)?;
    files.push(METRICS_SUMMARY.into());
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct AssociationSummary {
    pub n_codes: usize,
    pub quadrant_counts: BTreeMap<String, usize>,
    pub unclassified: usize,
    pub n_collinear_pairs: usize,
}

fn associate(ctx: &Context<'_>) -> Result<Vec<String>> {
    ctx.subdir("association")?;
    let records = ctx.records()?;
    let val = split(&records, Split::Validation);
    let model = ctx.student(Stage::TrainBdld)?;
    let vocab = ctx.vocabulary();
    let entries = association_map(&model, &val, &ctx.config.association)?;
    write_association_csv(&ctx.path(ASSOCIATION_CSV), &entries, &vocab)?;
    let svg = "association/association.svg";
    write_association_svg(&ctx.path(svg), &entries, &vocab)?;

    let groups = entries
        .iter()
        .filter(|e| e.contextual_ratio.is_some())
        .map(|e| age_stratified_groups(&val, e.code, vocab.len(), &ctx.config.association.bands))
        .collect::<Result<Vec<_>>>()?;
    let hist = "association/age_histograms.csv";
    write_age_histograms(&ctx.path(hist), &groups, &val)?;

    let codes: Vec<usize> = (0..vocab.len()).collect();
    let pairs = collinear_pairs(&val, &codes, ctx.config.collinearity_threshold)?;
    let collinear = "association/collinear_pairs.csv";
    let path = ctx.path(collinear);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["code_a", "label_a", "code_b", "label_b", "cramers_v"])
        .map_err(|e| csv_error(&path, e))?;
    for p in &pairs {
        w.serialize((p.code_a, vocab.label(p.code_a), p.code_b, vocab.label(p.code_b), p.v))
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_json(
        &ctx.path(ASSOCIATION_SUMMARY),
        &association_summary(&entries, pairs.len()),
    )?;
    Ok(vec![
        ASSOCIATION_CSV.into(),
        svg.into(),
        hist.into(),
        collinear.into(),
        ASSOCIATION_SUMMARY.into(),
    ])
}

fn association_summary(entries: &[AssociationEntry], n_collinear_pairs: usize) -> AssociationSummary {
    let mut quadrant_counts: BTreeMap<String, usize> = [
        Quadrant::Associated,
        Quadrant::Dissociated,
        Quadrant::AmbiguousHighContext,
        Quadrant::AmbiguousHighCoef,
    ]
    .iter()
    .map(|q| (q.as_str().to_string(), 0))
    .collect();
    let mut unclassified = 0;
    for e in entries {
        match e.quadrant {
            Some(q) => *quadrant_counts.get_mut(q.as_str()).expect("all quadrants listed") += 1,
            None => unclassified += 1,
        }
    }
    AssociationSummary {
        n_codes: entries.len(),
        quadrant_counts,
        unclassified,
        n_collinear_pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct ExplanationIndexEntry {
    pub patient_id: u64,
    pub label: bool,
    pub csv: String,
    pub summary: String,
    pub p_full: f64,
    pub p_selected: f64,
    pub n_selected: usize,
    pub fraction_selected: f64,
}

/// Validation positives by ascending id, topped up with negatives when there are too few.
fn explained_patients(val: &[&PatientRecord], n: usize) -> Vec<u64> {
    let mut ids: Vec<(bool, u64)> = val.iter().map(|r| (!r.label, r.patient_id)).collect();
    ids.sort_unstable();
    ids.into_iter().take(n).map(|(_, id)| id).collect()
}

fn explain(ctx: &Context<'_>) -> Result<Vec<String>> {
    ctx.subdir("explanations")?;
    let records = ctx.records()?;
    let val = split(&records, Split::Validation);
    let model = ctx.student(Stage::TrainBdld)?;
    let vocab = ctx.vocabulary();
    let cfg = &ctx.config.explainer;
    let ids = explained_patients(&val, ctx.config.explain_patients);
    let by_id: BTreeMap<u64, &PatientRecord> = val.iter().map(|r| (r.patient_id, *r)).collect();
    let enc: Vec<EncodedPatient> = ids
        .iter()
        .map(|id| EncodedPatient::new(by_id[id], &model.arch))
        .collect::<Result<_>>()?;
    let refs: Vec<&EncodedPatient> = enc.iter().collect();
    let fits = fit_explainers(&model, &refs, cfg)?;

    let mut files = Vec::new();
    let mut index = Vec::new();
    for (p, fit) in enc.iter().zip(&fits) {
        let seed = derive_seed(ctx.seed(), streams::EXPLAIN, p.patient_id);
        let report = fidelity_report(
            &model,
            p,
            &fit.scores,
            cfg.selection_threshold,
            cfg.baseline_samples,
            seed,
        )?;
        let csv = format!("explanations/patient_{}.csv", p.patient_id);
        let json = format!("explanations/patient_{}.json", p.patient_id);
        write_explanation_csv(&ctx.path(&csv), p, fit, &vocab)?;
        write_explanation_summary(
            &ctx.path(&json),
            &ExplanationSummary::new(fit, &report, cfg.selection_threshold),
        )?;
        index.push(ExplanationIndexEntry {
            patient_id: p.patient_id,
            label: p.label,
            csv: csv.clone(),
            summary: json.clone(),
            p_full: report.p_full.mean(),
            p_selected: report.p_selected.mean(),
            n_selected: report.n_selected,
            fraction_selected: report.fraction_selected,
        });
        files.push(csv);
        files.push(json);
    }
    write_json(&ctx.path(EXPLANATION_INDEX), &index)?;
    files.push(EXPLANATION_INDEX.into());
    Ok(files)
}
