use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{Batch, Row};
use super::{EncodedPatient, LossComponents, StudentModel};
use crate::cohort::PatientRecord;
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::optim::Adam;
use crate::rng::{derive_seed, stream_rng, streams};
use crate::teacher::Teacher;

/// How the per-step soft label is obtained from the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelMode {
    /// One fresh teacher sample per patient per step.
    #[default]
    Sample,
    /// Mean of `teacher_mean_samples` teacher samples.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Weight of the KL terms per example; `None` means `1 / n_train`.
    pub kl_scale: Option<f64>,
    pub n_train_samples: usize,
    pub soft_label: SoftLabelMode,
    pub teacher_mean_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            learning_rate: 7e-4,
            batch_size: 256,
            patience: 5,
            max_epochs: 50,
            kl_scale: None,
            n_train_samples: 1,
            soft_label: SoftLabelMode::Sample,
            teacher_mean_samples: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.n_train_samples == 0 || self.max_epochs == 0 {
            return fail("batch_size, n_train_samples and max_epochs must be positive".into());
        }
        if self.kl_scale.is_some_and(|k| !(k >= 0.0)) {
            return fail("kl_scale must be non-negative".into());
        }
        if self.soft_label == SoftLabelMode::Mean && self.teacher_mean_samples == 0 {
            return fail("teacher_mean_samples must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo_loss: f64,
    pub distill_loss: Option<f64>,
    pub total_loss: f64,
    pub tune_total_loss: f64,
    pub tune_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters from the epoch with the lowest tune loss.
    pub model: StudentModel,
    pub history: TrainingHistory,
    pub optimizer: Adam,
}

fn encode_all(records: &[&PatientRecord], model: &StudentModel) -> Result<Vec<EncodedPatient>> {
    records.iter().map(|r| EncodedPatient::new(r, &model.arch)).collect()
}

/// Batches of similar sequence length: the shuffled order is cut into windows,
/// each window sorted by length and split, and the batch order shuffled again.
fn length_buckets(patients: &[EncodedPatient], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * 16) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| patients[i].sequence.len());
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn fixed_buckets(patients: &[EncodedPatient], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.sort_by_key(|&i| (patients[i].sequence.len(), i));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

struct SoftLabels<'a> {
    teacher: Option<&'a Teacher>,
    mode: SoftLabelMode,
    mean_samples: usize,
}

impl SoftLabels<'_> {
    fn get(&self, records: &[&PatientRecord], seed: u64) -> Result<Option<Vec<f64>>> {
        let Some(t) = self.teacher else { return Ok(None) };
        records
            .iter()
            .map(|r| match self.mode {
                SoftLabelMode::Sample => t.predict(r, 1, seed).map(|d| d.samples()[0]),
                SoftLabelMode::Mean => t.predict(r, self.mean_samples, seed).map(|d| d.mean()),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn diverged(epoch: usize, history: &TrainingHistory, reason: String) -> Error {
    Error::Diverged {
        epoch,
        last_finite_epoch: history.epochs.last().map(|e| e.epoch),
        reason,
        history: Box::new(history.clone()),
    }
}

/// Trains with Adam and early stopping on the tune-split total loss.
///
/// Without a teacher, or with `alpha = 1`, the objective is the ELBO alone and
/// the teacher is never queried.
pub fn train_student(
    model: StudentModel,
    train: &[&PatientRecord],
    tune: &[&PatientRecord],
    teacher: Option<&Teacher>,
    config: &TrainConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if train.is_empty() || tune.is_empty() {
        return Err(Error::InvalidInput("train and tune splits must be non-empty".into()));
    }
    let (teacher, alpha) = match teacher {
        Some(t) if config.alpha < 1.0 => (Some(t), config.alpha),
        _ => (None, 1.0),
    };
    let soft = SoftLabels {
        teacher,
        mode: config.soft_label,
        mean_samples: config.teacher_mean_samples,
    };
    let kl_scale = config.kl_scale.unwrap_or(1.0 / train.len() as f64);
    let train_enc = encode_all(train, &model)?;
    let tune_enc = encode_all(tune, &model)?;
    let tune_batches = fixed_buckets(&tune_enc, config.batch_size);

    let mut model = model;
    let mut adam = Adam::new(config.learning_rate);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, StudentModel)> = None;
    let mut step: u64 = 0;
    let s = config.n_train_samples;

    for epoch in 0..config.max_epochs {
        let mut shuffle = stream_rng(config.seed, streams::SHUFFLE, epoch as u64);
        let batches = length_buckets(&train_enc, config.batch_size, &mut shuffle);
        let (mut sum_elbo, mut sum_distill, mut sum_total, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for idx in &batches {
            let mut noise = stream_rng(config.seed, streams::WEIGHTS, step);
            let draws: Vec<u64> = (0..s).map(|_| noise.random()).collect();
            let mut rows = Vec::with_capacity(idx.len() * s);
            let mut labels = Vec::with_capacity(idx.len() * s);
            for &draw in &draws {
                for &i in idx {
                    rows.push(Row::new(&train_enc[i], draw, noise.sample(StandardNormal)));
                    labels.push(train_enc[i].label);
                }
            }
            let recs: Vec<&PatientRecord> = idx.iter().map(|&i| train[i]).collect();
            let soft_labels = soft
                .get(&recs, derive_seed(config.seed, streams::SOFT_LABEL, step))?
                .map(|v| v.iter().copied().cycle().take(idx.len() * s).collect::<Vec<_>>());
            let batch = Batch::new(rows);
            let result = model.objective_gradient(&batch, &labels, soft_labels.as_deref(), alpha, kl_scale);
            let (c, grads) = match result {
                Ok(ok) => ok,
                Err(Error::Tape(e)) => return Err(diverged(epoch, &history, e.to_string())),
                Err(e) => return Err(e),
            };
            if !c.total.is_finite() {
                return Err(diverged(epoch, &history, format!("non-finite loss {}", c.total)));
            }
            adam.update(&mut model.params, &grads, &[]);
            let n = idx.len();
            sum_elbo += c.elbo * n as f64;
            sum_distill += c.distill.unwrap_or(0.0) * n as f64;
            sum_total += c.total * n as f64;
            seen += n;
            step += 1;
        }

        let (tune_loss, tune_auc) = match evaluate_split(
            &model,
            &tune_enc,
            &tune_batches,
            tune,
            &soft,
            alpha,
            kl_scale,
            config.seed,
        ) {
            Ok(v) => v,
            Err(Error::Tape(e)) => return Err(diverged(epoch, &history, e.to_string())),
            Err(e) => return Err(e),
        };
        if !tune_loss.is_finite() {
            return Err(diverged(epoch, &history, format!("non-finite tune loss {tune_loss}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            elbo_loss: sum_elbo / seen as f64,
            distill_loss: teacher.map(|_| sum_distill / seen as f64),
            total_loss: sum_total / seen as f64,
            tune_total_loss: tune_loss,
            tune_auroc: tune_auc,
        });
        if best.as_ref().is_none_or(|(l, _)| tune_loss < *l) {
            best = Some((tune_loss, model.clone()));
            history.best_epoch = Some(epoch);
        }
        if history.best_epoch.is_some_and(|b| epoch - b >= config.patience) {
            break;
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok(TrainingOutcome {
        model: best_model,
        history,
        optimizer: adam,
    })
}

/// Tune-split total loss and AUROC under fixed per-batch weight draws.
#[allow(clippy::too_many_arguments)]
fn evaluate_split(
    model: &StudentModel,
    patients: &[EncodedPatient],
    batches: &[Vec<usize>],
    records: &[&PatientRecord],
    soft: &SoftLabels<'_>,
    alpha: f64,
    kl_scale: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut probs = vec![0.0; patients.len()];
    for (k, idx) in batches.iter().enumerate() {
        let mut noise = stream_rng(seed, streams::EVAL, k as u64);
        let draw: u64 = noise.random();
        let rows: Vec<Row> = idx
            .iter()
            .map(|&i| Row::new(&patients[i], draw, noise.sample(StandardNormal)))
            .collect();
        let labels: Vec<bool> = idx.iter().map(|&i| patients[i].label).collect();
        let recs: Vec<&PatientRecord> = idx.iter().map(|&i| records[i]).collect();
        let soft_labels = soft.get(&recs, derive_seed(seed, streams::SOFT_LABEL, u64::MAX - k as u64))?;
        let targets = super::loss::Targets {
            labels: &labels,
            soft: soft_labels.as_deref(),
            alpha,
            kl_scale,
        };
        let tape = super::loss::objective_tape(model, &Batch::new(rows), &targets)?;
        let out = tape.evaluate(&model.params)?;
        let c: LossComponents = super::loss::components(&out, kl_scale);
        total += c.total * idx.len() as f64;
        for (&i, &p) in idx.iter().zip(out["prob"].data()) {
            probs[i] = p;
        }
    }
    let labels: Vec<bool> = patients.iter().map(|p| p.label).collect();
    let auc = auroc(&probs, &labels).unwrap_or(0.5);
    Ok((total / patients.len() as f64, auc))
}
