//! Teachers supply sampled outcome probabilities that supervise distillation.
//!
//! The oracle wraps the generator's true probabilities with logit-space noise.
//! The trained teacher is a two-layer feed-forward network with mean-field
//! Gaussian weights over the multi-hot vector and baseline age.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use riskdistill_diffcore::{sigmoid, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::bayes::{tape_gaussian_kl, INIT_SD, PRIOR_SD};
use crate::cohort::{age_term, encode_multihot, GroundTruth, PatientRecord};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::optim::{load_params, store_params, Adam, Params, StoredTensor};
use crate::predictive::PredictiveDistribution;
use crate::rng::{derive_seed, stream_rng, streams};
use crate::student::config_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTeacher {
    pub noise_sd: f64,
    pub probabilities: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub kl_scale: Option<f64>,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            learning_rate: 5e-3,
            batch_size: 256,
            patience: 5,
            max_epochs: 40,
            kl_scale: None,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("invalid teacher config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTeacher {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub params: Params,
    pub history: Vec<TeacherEpoch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub tune_loss: f64,
    pub tune_auroc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    Oracle(OracleTeacher),
    Trained(Box<TrainedTeacher>),
}

mod names {
    pub const W1_MEAN: &str = "w1.mean";
    pub const W1_LOG_SD: &str = "w1.log_sd";
    pub const B1: &str = "b1";
    pub const W2_MEAN: &str = "w2.mean";
    pub const W2_LOG_SD: &str = "w2.log_sd";
    pub const B2: &str = "b2";
}

impl Teacher {
    pub fn oracle(truth: &GroundTruth, noise_sd: f64) -> Result<Self> {
        if !(noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd {noise_sd} must be non-negative")));
        }
        Ok(Teacher::Oracle(OracleTeacher {
            noise_sd,
            probabilities: truth.probabilities.clone(),
        }))
    }

    /// `n_samples` draws from the teacher's predictive distribution for `record`.
    pub fn predict(&self, record: &PatientRecord, n_samples: usize, seed: u64) -> Result<PredictiveDistribution> {
        if n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        match self {
            Teacher::Oracle(o) => {
                let p = *o.probabilities.get(&record.patient_id).ok_or_else(|| {
                    Error::InvalidInput(format!("patient {} has no ground-truth probability", record.patient_id))
                })?;
                if o.noise_sd == 0.0 {
                    return PredictiveDistribution::new(vec![p; n_samples]);
                }
                let logit = (p / (1.0 - p)).ln();
                let mut rng = stream_rng(seed, streams::TEACHER, record.patient_id);
                let samples = (0..n_samples)
                    .map(|_| sigmoid(logit + o.noise_sd * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                PredictiveDistribution::new(samples)
            }
            Teacher::Trained(t) => t.predict(record, n_samples, seed),
        }
    }
}

fn features(record: &PatientRecord, vocab_size: usize) -> Result<Vec<f64>> {
    let mut x = encode_multihot(record, vocab_size)?.to_f64();
    x.push(age_term(record.baseline_age));
    Ok(x)
}

/// Noise for row `row` of the first-layer weights under weight draw `draw`.
fn row_noise(draw: u64, row: usize, width: usize) -> Vec<f64> {
    let mut rng = stream_rng(draw, streams::TEACHER, row as u64);
    (0..width).map(|_| rng.sample(StandardNormal)).collect()
}

impl TrainedTeacher {
    fn logit(&self, x: &[f64], draw: u64) -> f64 {
        let h = self.hidden_dim;
        let (m1, s1) = (&self.params[names::W1_MEAN], &self.params[names::W1_LOG_SD]);
        let mut hidden: Vec<f64> = self.params[names::B1].data().to_vec();
        for (row, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let e = row_noise(draw, row, h);
            for j in 0..h {
                let w = m1.data()[row * h + j] + s1.data()[row * h + j].exp() * e[j];
                hidden[j] += xi * w;
            }
        }
        let e2 = row_noise(draw, x.len(), h);
        let (m2, s2) = (&self.params[names::W2_MEAN], &self.params[names::W2_LOG_SD]);
        let mut out = self.params[names::B2].data()[0];
        for j in 0..h {
            let w = m2.data()[j] + s2.data()[j].exp() * e2[j];
            out += hidden[j].tanh() * w;
        }
        out
    }

    pub fn predict(&self, record: &PatientRecord, n_samples: usize, seed: u64) -> Result<PredictiveDistribution> {
        let x = features(record, self.vocab_size)?;
        let base = derive_seed(seed, streams::TEACHER, record.patient_id);
        let samples = (0..n_samples as u64)
            .map(|k| sigmoid(self.logit(&x, derive_seed(base, streams::WEIGHTS, k))))
            .collect();
        PredictiveDistribution::new(samples)
    }

    fn init(vocab_size: usize, hidden: usize, seed: u64) -> Params {
        let mut rng = stream_rng(seed, streams::INIT, 1);
        let mut normal =
            |n: usize, sd: f64| -> Vec<f64> { (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
        let d = vocab_size + 1;
        let mut p = Params::new();
        let ls = INIT_SD.ln();
        p.insert(
            names::W1_MEAN.into(),
            Tensor::matrix(d, hidden, normal(d * hidden, 0.1)).expect("shape"),
        );
        p.insert(names::W1_LOG_SD.into(), Tensor::filled(&[d, hidden], ls));
        p.insert(names::B1.into(), Tensor::row(vec![0.0; hidden]));
        p.insert(
            names::W2_MEAN.into(),
            Tensor::matrix(hidden, 1, normal(hidden, 0.1)).expect("shape"),
        );
        p.insert(names::W2_LOG_SD.into(), Tensor::filled(&[hidden, 1], ls));
        p.insert(names::B2.into(), Tensor::matrix(1, 1, vec![-2.0]).expect("1x1"));
        p
    }

    /// Mean cross-entropy plus scaled weight KL for one batch under one draw.
    fn objective(&self, xs: &[Vec<f64>], labels: &[bool], draw: u64, kl_scale: f64) -> Result<Tape> {
        let b = xs.len();
        let d = self.vocab_size + 1;
        let h = self.hidden_dim;
        let mut tape = Tape::new();
        let w1m = tape.input(names::W1_MEAN);
        let w1s = tape.input(names::W1_LOG_SD);
        let b1 = tape.input(names::B1);
        let w2m = tape.input(names::W2_MEAN);
        let w2s = tape.input(names::W2_LOG_SD);
        let b2 = tape.input(names::B2);
        let sample = |tape: &mut Tape, m, s, rows: usize, cols: usize, first_row: usize| {
            let noise: Vec<f64> = (0..rows).flat_map(|r| row_noise(draw, first_row + r, cols)).collect();
            let e = tape.constant(Tensor::matrix(rows, cols, noise).expect("shape"));
            let sd = tape.exp(s);
            let j = tape.mul(sd, e);
            tape.add(m, j)
        };
        let w1 = sample(&mut tape, w1m, w1s, d, h, 0);
        // the output layer's noise is stored as one row of width h
        let noise2 = row_noise(draw, d, h);
        let e2 = tape.constant(Tensor::column(noise2));
        let sd2 = tape.exp(w2s);
        let j2 = tape.mul(sd2, e2);
        let w2 = tape.add(w2m, j2);

        let x = tape.constant(Tensor::matrix(b, d, xs.concat()).expect("shape"));
        let ones = tape.constant(Tensor::filled(&[b, 1], 1.0));
        let pre = tape.matmul(x, w1);
        let bias = tape.matmul(ones, b1);
        let pre = tape.add(pre, bias);
        let hid = tape.tanh(pre);
        let logit = tape.matmul(hid, w2);
        let logit = tape.add(logit, b2);
        let p = tape.sigmoid(logit);
        let p = tape.clamp(p, crate::student::PROB_FLOOR, 1.0 - crate::student::PROB_FLOOR);
        tape.output("prob", p);
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let ny: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let y = tape.constant(Tensor::column(y));
        let ny = tape.constant(Tensor::column(ny));
        let lp = tape.log(p);
        let q = tape.one_minus(p);
        let lq = tape.log(q);
        let a = tape.mul(y, lp);
        let c = tape.mul(ny, lq);
        let s = tape.add(a, c);
        let ce = tape.reduce_mean(s);
        let ce = tape.neg(ce);
        let k1 = tape_gaussian_kl(&mut tape, w1m, w1s, d * h, PRIOR_SD);
        let k2 = tape_gaussian_kl(&mut tape, w2m, w2s, h, PRIOR_SD);
        let kl = tape.add(k1, k2);
        let kl = tape.scale(kl, kl_scale);
        let total = tape.add(ce, kl);
        tape.output("total", total);
        Ok(tape)
    }
}

/// Fits the stochastic feed-forward teacher by the ELBO with early stopping on tune loss.
pub fn train_reference_teacher(
    train: &[&PatientRecord],
    tune: &[&PatientRecord],
    vocab_size: usize,
    config: &TeacherConfig,
) -> Result<Teacher> {
    config.validate()?;
    if train.is_empty() || tune.is_empty() {
        return Err(Error::InvalidInput(
            "teacher needs non-empty train and tune splits".into(),
        ));
    }
    let xs: Vec<Vec<f64>> = train.iter().map(|r| features(r, vocab_size)).collect::<Result<_>>()?;
    let ys: Vec<bool> = train.iter().map(|r| r.label).collect();
    let tune_x: Vec<Vec<f64>> = tune.iter().map(|r| features(r, vocab_size)).collect::<Result<_>>()?;
    let tune_y: Vec<bool> = tune.iter().map(|r| r.label).collect();
    let kl_scale = config.kl_scale.unwrap_or(1.0 / train.len() as f64);

    let mut teacher = TrainedTeacher {
        vocab_size,
        hidden_dim: config.hidden_dim,
        params: TrainedTeacher::init(vocab_size, config.hidden_dim, config.seed),
        history: Vec::new(),
    };
    let mut adam = Adam::new(config.learning_rate);
    let mut best: Option<(f64, Params, usize)> = None;
    let mut step = 0u64;
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut stream_rng(config.seed, streams::SHUFFLE, epoch as u64),
        );
        let mut sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let bx: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<bool> = idx.iter().map(|&i| ys[i]).collect();
            let draw = derive_seed(config.seed, streams::WEIGHTS, step);
            let tape = teacher.objective(&bx, &by, draw, kl_scale)?;
            let fwd = tape
                .forward(&teacher.params)
                .map_err(|e| diverged(epoch, &teacher, e.to_string()))?;
            let loss = fwd.output("total")?.data()[0];
            if !loss.is_finite() {
                return Err(diverged(epoch, &teacher, format!("non-finite loss {loss}")));
            }
            let grads = fwd.backward("total")?;
            adam.update(&mut teacher.params, &grads, &[]);
            sum += loss * idx.len() as f64;
            step += 1;
        }
        let mut tune_loss = 0.0;
        let mut probs = Vec::with_capacity(tune_x.len());
        for (k, chunk) in tune_x.chunks(config.batch_size).enumerate() {
            let labels = &tune_y[k * config.batch_size..k * config.batch_size + chunk.len()];
            let tape = teacher.objective(
                chunk,
                labels,
                derive_seed(config.seed, streams::EVAL, k as u64),
                kl_scale,
            )?;
            let out = tape.evaluate(&teacher.params)?;
            tune_loss += out["total"].data()[0] * chunk.len() as f64;
            probs.extend_from_slice(out["prob"].data());
        }
        tune_loss /= tune_x.len() as f64;
        teacher.history.push(TeacherEpoch {
            epoch,
            train_loss: sum / xs.len() as f64,
            tune_loss,
            tune_auroc: auroc(&probs, &tune_y).unwrap_or(0.5),
        });
        if best.as_ref().is_none_or(|(l, _, _)| tune_loss < *l) {
            best = Some((tune_loss, teacher.params.clone(), epoch));
        }
        if best.as_ref().is_some_and(|(_, _, b)| epoch - b >= config.patience) {
            break;
        }
    }
    let (_, params, _) = best.expect("at least one epoch");
    teacher.params = params;
    Ok(Teacher::Trained(Box::new(teacher)))
}

fn diverged(epoch: usize, teacher: &TrainedTeacher, reason: String) -> Error {
    Error::Diverged {
        epoch,
        last_finite_epoch: teacher.history.last().map(|e| e.epoch),
        reason,
        history: Box::default(),
    }
}

#[derive(Serialize, Deserialize)]
enum TeacherPayload {
    Oracle(OracleTeacher),
    Trained {
        vocab_size: usize,
        hidden_dim: usize,
        params: BTreeMap<String, StoredTensor>,
        history: Vec<TeacherEpoch>,
    },
}

pub fn save_teacher(path: &Path, teacher: &Teacher, hash: &str) -> Result<()> {
    let payload = match teacher {
        Teacher::Oracle(o) => TeacherPayload::Oracle(o.clone()),
        Teacher::Trained(t) => TeacherPayload::Trained {
            vocab_size: t.vocab_size,
            hidden_dim: t.hidden_dim,
            params: store_params(&t.params),
            history: t.history.clone(),
        },
    };
    crate::student::checkpoint::write_envelope(path, "teacher", hash, payload)
}

pub fn load_teacher(path: &Path, expected_hash: &str) -> Result<Teacher> {
    let payload: TeacherPayload = crate::student::checkpoint::read_envelope(path, "teacher", expected_hash)?;
    Ok(match payload {
        TeacherPayload::Oracle(o) => Teacher::Oracle(o),
        TeacherPayload::Trained {
            vocab_size,
            hidden_dim,
            params,
            history,
        } => Teacher::Trained(Box::new(TrainedTeacher {
            vocab_size,
            hidden_dim,
            params: load_params(&params).ok_or_else(|| Error::Checkpoint("malformed tensor".into()))?,
            history,
        })),
    })
}

/// Hash of a teacher configuration, for checkpoint validation.
pub fn teacher_hash(config: &impl Serialize) -> String {
    config_hash(config)
}
