//! The Bayesian student: stochastic code and age embeddings feed a one-layer
//! bidirectional LSTM whose final states are read out as a scalar contextual
//! variable; a stochastic linear head over the multi-hot vector gives a scalar
//! additive variable; a sparse variational GP classifier maps the pair to an
//! outcome probability.

pub(crate) mod checkpoint;
pub(crate) mod graph;
mod loss;
mod noise;
mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use riskdistill_diffcore::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::bayes::{gaussian_kl, VariationalParameter, INIT_SD, PRIOR_SD};
use crate::cohort::{
    encode_multihot, encode_sequence, MultiHotVector, PatientRecord, SequenceEncoding, DEFAULT_MAX_LEN, N_AGES,
};
use crate::error::{Error, Result};
use crate::optim::Params;
use crate::predictive::PredictiveDistribution;
use crate::rng::{derive_seed, stream_rng, streams};

pub use checkpoint::{config_hash, load_student, save_student, StudentCheckpoint, CHECKPOINT_VERSION};
pub use graph::{Batch, Row, StepMask};
pub use loss::{
    binary_entropy, cross_entropy, distill_loss, objective_tape, total_loss, LossComponents, Targets, PROB_FLOOR,
};
pub use train::{train_student, EpochRecord, SoftLabelMode, TrainConfig, TrainingHistory, TrainingOutcome};

const PREDICT_CHUNK: usize = 256;

/// Parameter names inside [`StudentModel::params`].
pub mod names {
    pub const CODE_MEAN: &str = "code_emb.mean";
    pub const CODE_LOG_SD: &str = "code_emb.log_sd";
    pub const AGE_MEAN: &str = "age_emb.mean";
    pub const AGE_LOG_SD: &str = "age_emb.log_sd";
    pub const FWD_IN: &str = "fwd.w_in";
    pub const FWD_REC: &str = "fwd.w_rec";
    pub const FWD_BIAS: &str = "fwd.bias";
    pub const BWD_IN: &str = "bwd.w_in";
    pub const BWD_REC: &str = "bwd.w_rec";
    pub const BWD_BIAS: &str = "bwd.bias";
    pub const READOUT_W: &str = "readout.w";
    pub const READOUT_B: &str = "readout.b";
    pub const ADD_MEAN: &str = "additive.mean";
    pub const ADD_LOG_SD: &str = "additive.log_sd";
    pub const GP_INDUCING: &str = "gp.inducing";
    pub const GP_MEAN: &str = "gp.mean";
    pub const GP_SCALE_LOWER: &str = "gp.scale_lower";
    pub const GP_SCALE_LOG_DIAG: &str = "gp.scale_log_diag";
    pub const GP_LOG_LENGTHSCALE: &str = "gp.log_lengthscale";
    pub const GP_LOG_VARIANCE: &str = "gp.log_variance";

    /// Mean/log-sd pairs of every mean-field weight.
    pub const VARIATIONAL: [(&str, &str); 3] =
        [(CODE_MEAN, CODE_LOG_SD), (AGE_MEAN, AGE_LOG_SD), (ADD_MEAN, ADD_LOG_SD)];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_inducing: usize,
    pub max_len: usize,
    /// Diagonal jitter added to the inducing-point covariance.
    pub jitter: f64,
    pub prior_sd: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk(200)
    }
}

impl ArchConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 32,
            n_inducing: 20,
            max_len: DEFAULT_MAX_LEN,
            jitter: 1e-6,
            prior_sd: PRIOR_SD,
        }
    }

    /// Full-scale sizes: 150-dimensional embeddings and hidden state, 100 inducing points.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            embed_dim: 150,
            hidden_dim: 150,
            n_inducing: 100,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.n_inducing == 0 {
            return Err(Error::Config(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(self.jitter > 0.0) || !(self.prior_sd > 0.0) {
            return Err(Error::Config("jitter and prior_sd must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar latents of one patient under one weight draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub contextual: f64,
    pub additive: f64,
}

/// A patient prepared for both input paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub patient_id: u64,
    pub sequence: SequenceEncoding,
    /// Indices of the set bits of the multi-hot vector.
    pub present: Vec<usize>,
    pub label: bool,
}

impl EncodedPatient {
    pub fn new(record: &PatientRecord, arch: &ArchConfig) -> Result<Self> {
        let multihot = encode_multihot(record, arch.vocab_size)?;
        Self::from_parts(
            record.patient_id,
            encode_sequence(record, arch.max_len),
            &multihot,
            record.label,
        )
    }

    pub fn from_parts(
        patient_id: u64,
        sequence: SequenceEncoding,
        multihot: &MultiHotVector,
        label: bool,
    ) -> Result<Self> {
        if sequence.is_empty() {
            return Err(Error::InvalidInput(format!(
                "patient {patient_id} has an empty sequence"
            )));
        }
        Ok(Self {
            patient_id,
            sequence,
            present: multihot.indices(),
            label,
        })
    }
}

/// Sparse variational GP parameters in natural units.
#[derive(Debug, Clone, PartialEq)]
pub struct GpClassifier {
    pub inducing_points: Tensor,
    pub variational_mean: Tensor,
    /// Lower-triangular factor of the variational covariance.
    pub covariance_factor: Tensor,
    pub lengthscale: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub arch: ArchConfig,
    pub params: Params,
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], sd: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `m` points of the smallest near-square grid covering [-3, 3]², row-major.
pub fn inducing_grid(m: usize) -> Vec<[f64; 2]> {
    let rows = (m as f64).sqrt().ceil() as usize;
    let cols = m.div_ceil(rows);
    let axis = |k: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -3.0 + 6.0 * k as f64 / (n - 1) as f64
        }
    };
    (0..m).map(|i| [axis(i / cols, rows), axis(i % cols, cols)]).collect()
}

pub fn init_student(arch: &ArchConfig, seed: u64) -> Result<StudentModel> {
    arch.validate()?;
    let (v, d, h, m) = (arch.vocab_size, arch.embed_dim, arch.hidden_dim, arch.n_inducing);
    let mut rng = stream_rng(seed, streams::INIT, 0);
    let log_sd = INIT_SD.ln();
    let mut params = Params::new();
    let mut put = |name: &str, t: Tensor| {
        params.insert(name.to_string(), t);
    };
    put(names::CODE_MEAN, normal_tensor(&mut rng, &[v, d], 0.1));
    put(names::CODE_LOG_SD, Tensor::filled(&[v, d], log_sd));
    put(names::AGE_MEAN, normal_tensor(&mut rng, &[N_AGES, d], 0.1));
    put(names::AGE_LOG_SD, Tensor::filled(&[N_AGES, d], log_sd));
    let bound = 1.0 / (h as f64).sqrt();
    for (w_in, w_rec, bias) in [
        (names::FWD_IN, names::FWD_REC, names::FWD_BIAS),
        (names::BWD_IN, names::BWD_REC, names::BWD_BIAS),
    ] {
        put(w_in, uniform_tensor(&mut rng, &[d, 4 * h], bound));
        put(w_rec, uniform_tensor(&mut rng, &[h, 4 * h], bound));
        // gate order i, f, g, o; the forget gate starts open
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        put(bias, Tensor::row(b));
    }
    put(names::READOUT_W, normal_tensor(&mut rng, &[2 * h, 1], 0.1));
    put(names::READOUT_B, Tensor::matrix(1, 1, vec![-1.0]).expect("1x1"));
    put(names::ADD_MEAN, normal_tensor(&mut rng, &[v, 1], 0.01));
    put(names::ADD_LOG_SD, Tensor::filled(&[v, 1], log_sd));

    let grid = inducing_grid(m);
    let flat: Vec<f64> = grid.iter().flat_map(|p| *p).collect();
    put(names::GP_INDUCING, Tensor::matrix(m, 2, flat).expect("m x 2"));
    // risk rises with both latents from the start, which fixes the sign convention
    let mean: Vec<f64> = grid.iter().map(|p| 0.5 * (p[0] + p[1]) - 1.0).collect();
    put(names::GP_MEAN, Tensor::column(mean));
    put(names::GP_SCALE_LOWER, Tensor::zeros(&[m, m]));
    put(names::GP_SCALE_LOG_DIAG, Tensor::filled(&[m, 1], 0.1f64.ln()));
    put(names::GP_LOG_LENGTHSCALE, Tensor::matrix(1, 1, vec![0.0]).expect("1x1"));
    put(names::GP_LOG_VARIANCE, Tensor::matrix(1, 1, vec![0.0]).expect("1x1"));
    Ok(StudentModel {
        arch: arch.clone(),
        params,
    })
}

impl StudentModel {
    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn variational(&self, mean: &str, log_sd: &str) -> VariationalParameter {
        VariationalParameter {
            mean: self.params[mean].clone(),
            log_sd: self.params[log_sd].clone(),
        }
    }

    pub fn code_embedding(&self) -> VariationalParameter {
        self.variational(names::CODE_MEAN, names::CODE_LOG_SD)
    }

    pub fn age_embedding(&self) -> VariationalParameter {
        self.variational(names::AGE_MEAN, names::AGE_LOG_SD)
    }

    pub fn additive_head(&self) -> VariationalParameter {
        self.variational(names::ADD_MEAN, names::ADD_LOG_SD)
    }

    pub fn gp(&self) -> GpClassifier {
        let m = self.arch.n_inducing;
        let raw = &self.params[names::GP_SCALE_LOWER];
        let diag = &self.params[names::GP_SCALE_LOG_DIAG];
        let mut factor = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..i {
                factor[i * m + j] = raw.data()[i * m + j];
            }
            factor[i * m + i] = diag.data()[i].exp();
        }
        GpClassifier {
            inducing_points: self.params[names::GP_INDUCING].clone(),
            variational_mean: self.params[names::GP_MEAN].clone(),
            covariance_factor: Tensor::matrix(m, m, factor).expect("m x m"),
            lengthscale: self.params[names::GP_LOG_LENGTHSCALE].data()[0].exp(),
            variance: self.params[names::GP_LOG_VARIANCE].data()[0].exp(),
        }
    }

    /// Sum of weight-KL terms against the prior over all mean-field tensors.
    pub fn weight_kl(&self) -> f64 {
        names::VARIATIONAL
            .iter()
            .map(|(m, s)| gaussian_kl(self.params[*m].data(), self.params[*s].data(), self.arch.prior_sd))
            .sum()
    }

    /// KL of the GP variational distribution against the GP prior at the inducing points.
    pub fn gp_kl(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = graph::ParamVars::bind(&mut tape);
        let kl = graph::gp_kl(&mut tape, &vars, &self.arch);
        tape.output("kl", kl);
        Ok(tape.evaluate(&self.params)?["kl"].data()[0])
    }

    /// Latents of one weight draw identified by `sample_seed`.
    pub fn forward_latent(
        &self,
        sequence: &SequenceEncoding,
        multihot: &MultiHotVector,
        sample_seed: u64,
    ) -> Result<LatentPair> {
        let patient = EncodedPatient::from_parts(0, sequence.clone(), multihot, false)?;
        let batch = Batch::new(vec![Row::new(&patient, sample_seed, 0.0)]);
        Ok(batch.latents(self)?[0])
    }

    /// Latents of many patients sharing one weight draw.
    pub fn latents(&self, patients: &[&EncodedPatient], sample_seed: u64) -> Result<Vec<LatentPair>> {
        let rows = patients.iter().map(|p| Row::new(p, sample_seed, 0.0)).collect();
        Batch::new(rows).latents(self)
    }

    /// GP posterior mean and variance of the latent function at `latent`.
    pub fn gp_moments(&self, latents: &[LatentPair]) -> Result<Vec<(f64, f64)>> {
        graph::gp_moments(self, latents)
    }

    /// `n_samples` draws of the GP function at a fixed input, squashed by the logistic link.
    pub fn gp_predict(&self, latent: LatentPair, n_samples: usize, seed: u64) -> Result<PredictiveDistribution> {
        if n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        if !latent.contextual.is_finite() || !latent.additive.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite latent {latent:?}")));
        }
        let (mean, var) = self.gp_moments(&[latent])?[0];
        let mut rng = stream_rng(seed, streams::EVAL, 0);
        let sd = var.sqrt();
        let samples = (0..n_samples)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                riskdistill_diffcore::sigmoid(mean + sd * e)
            })
            .collect();
        PredictiveDistribution::new(samples)
    }

    /// Full predictive distribution of one patient: sample `k` uses its own
    /// weight draw and GP noise.
    pub fn predict(&self, patient: &EncodedPatient, n_samples: usize, seed: u64) -> Result<PredictiveDistribution> {
        Ok(self.predict_many(&[patient], n_samples, seed)?.remove(0))
    }

    /// Predictive distributions for many patients; sample `k` of every patient
    /// shares weight draw `k`, so results equal per-patient [`Self::predict`].
    pub fn predict_many(
        &self,
        patients: &[&EncodedPatient],
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictiveDistribution>> {
        if n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        let samples = self.per_sample(patients, n_samples, |rows| Batch::new(rows).probabilities(self), seed)?;
        samples.into_iter().map(PredictiveDistribution::new).collect()
    }

    /// Latents of every patient under weight draws `0..n_samples`, indexed
    /// `[patient][sample]`, with the same draws as [`Self::predict_many`].
    pub fn latent_samples(
        &self,
        patients: &[&EncodedPatient],
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<Vec<LatentPair>>> {
        if n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        self.per_sample(patients, n_samples, |rows| Batch::new(rows).latents(self), seed)
    }

    /// Evaluates `eval` on length-sorted chunks for each sample draw; rows are
    /// independent given the draw, so chunking does not change any value.
    fn per_sample<T: Send>(
        &self,
        patients: &[&EncodedPatient],
        n_samples: usize,
        eval: impl Fn(Vec<Row<'_>>) -> Result<Vec<T>> + Sync,
        seed: u64,
    ) -> Result<Vec<Vec<T>>> {
        let mut order: Vec<usize> = (0..patients.len()).collect();
        order.sort_by_key(|&i| patients[i].sequence.len());
        let chunks: Vec<&[usize]> = order.chunks(PREDICT_CHUNK).collect();
        let per_chunk = chunks
            .par_iter()
            .map(|idx| {
                let mut out: Vec<Vec<T>> = idx.iter().map(|_| Vec::with_capacity(n_samples)).collect();
                for k in 0..n_samples as u64 {
                    let draw = sample_draw_seed(seed, k);
                    let rows = idx
                        .iter()
                        .map(|&i| Row::new(patients[i], draw, sample_gp_noise(seed, k, patients[i].patient_id)))
                        .collect();
                    for (s, v) in out.iter_mut().zip(eval(rows)?) {
                        s.push(v);
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut samples: Vec<Vec<T>> = patients.iter().map(|_| Vec::new()).collect();
        for (idx, out) in chunks.iter().zip(per_chunk) {
            for (&i, s) in idx.iter().zip(out) {
                samples[i] = s;
            }
        }
        Ok(samples)
    }

    /// Monte Carlo mean and sd of every additive coefficient.
    pub fn posterior_coefficients(&self, n_samples: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
        if n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        let head = self.additive_head();
        Ok(head
            .mean
            .data()
            .iter()
            .zip(head.log_sd.data())
            .enumerate()
            .map(|(code, (&m, &s))| {
                let mut rng = stream_rng(seed, streams::WEIGHTS, code as u64);
                let sd = s.exp();
                let draws: Vec<f64> = (0..n_samples)
                    .map(|_| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mean = crate::predictive::running_mean(&draws);
                let var = if n_samples > 1 {
                    draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64
                } else {
                    0.0
                };
                (mean, var.sqrt())
            })
            .collect())
    }
}

/// Weight-draw seed of predictive sample `k` under `seed`.
pub fn sample_draw_seed(seed: u64, k: u64) -> u64 {
    derive_seed(seed, streams::WEIGHTS, k)
}

/// Standard-normal GP noise of predictive sample `k` for one patient.
pub fn sample_gp_noise(seed: u64, k: u64, patient_id: u64) -> f64 {
    let mut rng = stream_rng(derive_seed(seed, streams::EVAL, k), streams::EVAL, patient_id);
    rng.sample(StandardNormal)
}
