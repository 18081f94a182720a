//! Per-patient selection of the encounters that carry a prediction.
//!
//! Every step of a patient's encoded sequence gets its own importance logit.
//! Relaxed Bernoulli (binary concrete) samples of those logits scale the
//! step inputs of the recurrent encoder, and each present code's multi-hot
//! bit becomes the largest score among its occurrences. The logits are fitted
//! against the frozen student so that the masked prediction stays close to
//! the full one while the summed scores stay small.

mod export;

use rand::Rng;
use rand_distr::Open01;
use rayon::prelude::*;
use riskdistill_diffcore::{sigmoid, Bindings, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, Params};
use crate::predictive::PredictiveDistribution;
use crate::rng::{derive_seed, stream_rng, streams};
use crate::student::graph::ParamVars;
use crate::student::{sample_draw_seed, sample_gp_noise, Batch, EncodedPatient, Row, StepMask, StudentModel};

pub use export::{write_explanation_csv, write_explanation_summary, ExplanationRow, ExplanationSummary};

/// Tape input name of the importance logits, a `[1, T]` row.
pub const LOGITS: &str = "explainer.logits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub temperature: f64,
    pub samples_per_step: usize,
    pub selection_threshold: f64,
    /// Samples behind the reference prediction and the fidelity report.
    pub baseline_samples: usize,
    /// Starting logit of every encounter; positive starts from "keep everything".
    pub init_logit: f64,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            learning_rate: 9e-2,
            iterations: 500,
            temperature: 0.5,
            samples_per_step: 10,
            selection_threshold: 0.5,
            baseline_samples: 30,
            init_logit: 3.0,
            seed: 0,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("explainer: {m}")));
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.samples_per_step == 0 || self.baseline_samples == 0 {
            return bad("sample counts must be at least 1");
        }
        if !self.init_logit.is_finite() {
            return bad("init_logit must be finite");
        }
        Ok(())
    }
}

/// One logit and one score per step of the encoded sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub logits: Vec<f64>,
    /// Noise-free scores `σ(logit)`.
    pub scores: Vec<f64>,
    pub temperature: f64,
}

impl ImportanceScores {
    pub fn from_logits(logits: Vec<f64>, temperature: f64) -> Self {
        let scores = logits.iter().map(|&l| sigmoid(l)).collect();
        Self {
            logits,
            scores,
            temperature,
        }
    }

    /// Step indices ordered by descending score (ties by position).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainerStep {
    pub iteration: usize,
    pub loss: f64,
    pub squared_error: f64,
    pub anchor: f64,
    pub p_predictor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub patient_id: u64,
    pub p_baseline: f64,
    /// Mean masked prediction under the final scores, with the baseline's draws.
    pub p_masked: f64,
    pub scores: ImportanceScores,
    pub trace: Vec<ExplainerStep>,
}

/// Open-interval uniform to logistic noise, `log u − log(1 − u)`.
fn logistic_noise(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    u.ln() - (-u).ln_1p()
}

/// One binary-concrete sample `σ((logit + G) / τ)`, kept strictly inside (0, 1).
pub fn gumbel_relax(logit: f64, temperature: f64, seed: u64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let g = logistic_noise(&mut stream_rng(seed, streams::GUMBEL, 0));
    Ok(sigmoid((logit + g) / temperature).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Records `σ((logits + noise) / τ)` for `[1, T]` logits and `[S, T]` noise.
pub fn relaxed_scores(tape: &mut Tape, logits: Var, noise: Tensor, temperature: f64) -> Var {
    let s = noise.shape()[0];
    let ones = tape.constant(Tensor::filled(&[s, 1], 1.0));
    let wide = tape.matmul(ones, logits);
    let g = tape.constant(noise);
    let z = tape.add(wide, g);
    let z = tape.scale(z, 1.0 / temperature);
    tape.sigmoid(z)
}

/// Soft presence of each code of `codes`: the largest step score among its
/// occurrences. Codes with no step in the (possibly truncated) sequence stay present.
fn presence_mask(tape: &mut Tape, steps: Var, patient: &EncodedPatient, codes: &[usize], rows: usize) -> Var {
    if codes.is_empty() {
        // unused by the additive head when no code is present
        return tape.constant(Tensor::filled(&[rows, 1], 1.0));
    }
    let cols: Vec<Var> = codes
        .iter()
        .map(|&c| {
            let occ: Vec<usize> = (0..patient.sequence.len())
                .filter(|&t| patient.sequence.code_ids[t] == c)
                .collect();
            match occ.split_first() {
                None => tape.constant(Tensor::filled(&[rows, 1], 1.0)),
                Some((&first, rest)) => {
                    let mut m = tape.slice(steps, 1, first, 1);
                    for &t in rest {
                        let col = tape.slice(steps, 1, t, 1);
                        m = tape.max(m, col);
                    }
                    m
                }
            }
        })
        .collect();
    tape.concat(&cols, 1)
}

fn sample_rows(patient: &EncodedPatient, n: usize, seed: u64) -> Vec<Row<'_>> {
    (0..n as u64)
        .map(|k| {
            Row::new(
                patient,
                sample_draw_seed(seed, k),
                sample_gp_noise(seed, k, patient.patient_id),
            )
        })
        .collect()
}

/// Predictive distribution with every step scaled by `scores`. Sample `k` uses
/// the same weight draw and GP noise as [`StudentModel::predict`].
pub fn masked_predict(
    model: &StudentModel,
    patient: &EncodedPatient,
    scores: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    let t = patient.sequence.len();
    if scores.len() != t {
        return Err(Error::InvalidInput(format!(
            "{} scores for {t} encounters",
            scores.len()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    let batch = Batch::new(sample_rows(patient, n_samples, seed));
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape);
    let row: Vec<f64> = scores.iter().copied().cycle().take(n_samples * t).collect();
    let steps = tape.constant(Tensor::matrix(n_samples, t, row).expect("S x T"));
    let presence = presence_mask(&mut tape, steps, patient, batch.codes(), n_samples);
    let built = batch.build(&mut tape, &p, &model.arch, Some(StepMask { steps, presence }), true)?;
    tape.output("prob", built.prob.expect("gp built"));
    let out = tape.evaluate(&model.params)?;
    PredictiveDistribution::new(out["prob"].data().to_vec())
}

/// `(p_b − p_p)² + γ Σ scores`.
pub fn explainer_loss(p_baseline: f64, p_predictor: f64, scores: &[f64], gamma: f64) -> Result<f64> {
    for p in [p_baseline, p_predictor] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
        }
    }
    Ok((p_baseline - p_predictor).powi(2) + gamma * scores.iter().sum::<f64>())
}

/// Binds the model parameters plus the logits under [`LOGITS`].
pub struct WithLogits<'a> {
    pub params: &'a Params,
    pub logits: &'a Tensor,
}

impl Bindings for WithLogits<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        if name == LOGITS {
            Some(self.logits)
        } else {
            self.params.get(name)
        }
    }
}

/// One stochastic estimate of the loss; fresh weight draws and Gumbel noise per
/// seed. Outputs: `loss`, `squared_error`, `anchor`, `p_predictor`.
pub fn objective(
    model: &StudentModel,
    patient: &EncodedPatient,
    p_baseline: f64,
    config: &ExplainerConfig,
    seed: u64,
) -> Result<Tape> {
    let (s, t) = (config.samples_per_step, patient.sequence.len());
    let batch = Batch::new(sample_rows(patient, s, seed));
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape);
    let logits = tape.input(LOGITS);
    let mut rng = stream_rng(seed, streams::GUMBEL, patient.patient_id);
    let noise: Vec<f64> = (0..s * t).map(|_| logistic_noise(&mut rng)).collect();
    let steps = relaxed_scores(
        &mut tape,
        logits,
        Tensor::matrix(s, t, noise).expect("S x T"),
        config.temperature,
    );
    let presence = presence_mask(&mut tape, steps, patient, batch.codes(), s);
    let built = batch.build(&mut tape, &p, &model.arch, Some(StepMask { steps, presence }), true)?;
    let pp = tape.reduce_mean(built.prob.expect("gp built"));
    let gap = tape.neg(pp);
    let gap = tape.shift(gap, p_baseline);
    let sq = tape.square(gap);
    // the anchor term averages the relaxed sums over the S noise draws
    let total_scores = tape.reduce_sum(steps);
    let anchor = tape.scale(total_scores, 1.0 / s as f64);
    let weighted = tape.scale(anchor, config.gamma);
    let loss = tape.add(sq, weighted);
    tape.output("loss", loss);
    tape.output("squared_error", sq);
    tape.output("anchor", anchor);
    tape.output("p_predictor", pp);
    Ok(tape)
}

/// Fits the importance logits of one patient with Adam against the frozen model.
pub fn fit_explainer(model: &StudentModel, patient: &EncodedPatient, config: &ExplainerConfig) -> Result<Explanation> {
    config.validate()?;
    let base_seed = derive_seed(config.seed, streams::EXPLAIN, patient.patient_id);
    let p_baseline = model.predict(patient, config.baseline_samples, base_seed)?.mean();
    let t = patient.sequence.len();
    let mut params = Params::new();
    params.insert(LOGITS.into(), Tensor::row(vec![config.init_logit; t]));
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let tape = objective(
            model,
            patient,
            p_baseline,
            config,
            derive_seed(base_seed, streams::GUMBEL, iteration as u64),
        )?;
        let logits = &params[LOGITS];
        let fwd = tape.forward(&WithLogits {
            params: &model.params,
            logits,
        })?;
        let scalar = |name: &str| -> Result<f64> { Ok(fwd.output(name)?.data()[0]) };
        let step = ExplainerStep {
            iteration,
            loss: scalar("loss")?,
            squared_error: scalar("squared_error")?,
            anchor: scalar("anchor")?,
            p_predictor: scalar("p_predictor")?,
        };
        trace.push(step);
        if !step.loss.is_finite() {
            return Err(Error::ExplainerAborted {
                patient_id: patient.patient_id,
                iteration,
                trace: trace.iter().map(|s| s.loss).collect(),
            });
        }
        let mut grads = fwd.backward("loss")?;
        grads.retain(|name, _| name == LOGITS);
        adam.update(&mut params, &grads, &[]);
    }
    let logits = params.remove(LOGITS).expect("logits").data().to_vec();
    let scores = ImportanceScores::from_logits(logits, config.temperature);
    let p_masked = masked_predict(model, patient, &scores.scores, config.baseline_samples, base_seed)?.mean();
    Ok(Explanation {
        patient_id: patient.patient_id,
        p_baseline,
        p_masked,
        scores,
        trace,
    })
}

/// Independent fits of many patients; output order follows `patients`.
pub fn fit_explainers(
    model: &StudentModel,
    patients: &[&EncodedPatient],
    config: &ExplainerConfig,
) -> Result<Vec<Explanation>> {
    patients.par_iter().map(|p| fit_explainer(model, p, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub p_full: PredictiveDistribution,
    pub p_selected: PredictiveDistribution,
    pub selected: Vec<usize>,
    pub n_selected: usize,
    pub fraction_selected: f64,
}

impl FidelityReport {
    pub fn mean_gap(&self) -> f64 {
        (self.p_full.mean() - self.p_selected.mean()).abs()
    }
}

/// Re-predicts with only the steps scoring above `threshold`, at the same seed as the full prediction.
pub fn fidelity_report(
    model: &StudentModel,
    patient: &EncodedPatient,
    scores: &ImportanceScores,
    threshold: f64,
    n_samples: usize,
    seed: u64,
) -> Result<FidelityReport> {
    let selected: Vec<usize> = (0..scores.scores.len())
        .filter(|&i| scores.scores[i] > threshold)
        .collect();
    let mask: Vec<f64> = (0..scores.scores.len())
        .map(|i| if scores.scores[i] > threshold { 1.0 } else { 0.0 })
        .collect();
    let p_full = model.predict(patient, n_samples, seed)?;
    let p_selected = masked_predict(model, patient, &mask, n_samples, seed)?;
    let n_selected = selected.len();
    Ok(FidelityReport {
        p_full,
        p_selected,
        n_selected,
        fraction_selected: n_selected as f64 / mask.len() as f64,
        selected,
    })
}
