//! Mean-field Gaussian weights and their KL divergence to an isotropic prior.

use riskdistill_diffcore::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Standard deviation of the zero-mean Gaussian weight prior.
pub const PRIOR_SD: f64 = 0.374;

/// Initial posterior standard deviation of every stochastic weight.
pub const INIT_SD: f64 = 0.05;

/// A factorized Gaussian `N(mean, exp(log_sd)^2)` over a weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParameter {
    pub mean: Tensor,
    pub log_sd: Tensor,
}

impl VariationalParameter {
    pub fn new(mean: Tensor, log_sd: Tensor) -> Result<Self> {
        if mean.shape() != log_sd.shape() {
            return Err(Error::InvalidInput(format!(
                "variational mean {:?} and log-sd {:?} differ in shape",
                mean.shape(),
                log_sd.shape()
            )));
        }
        Ok(Self { mean, log_sd })
    }

    pub fn sd(&self) -> Tensor {
        self.log_sd.map(f64::exp)
    }

    /// Reparameterized draw `mean + sd * noise`.
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        self.mean
            .data()
            .iter()
            .zip(self.log_sd.data())
            .zip(noise)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect()
    }

    pub fn kl_to_prior(&self, prior_sd: f64) -> f64 {
        gaussian_kl(self.mean.data(), self.log_sd.data(), prior_sd)
    }
}

/// `Σ KL(N(m, e^{2s}) ‖ N(0, prior_sd²))` over paired entries.
pub fn gaussian_kl(mean: &[f64], log_sd: &[f64], prior_sd: f64) -> f64 {
    let var0 = prior_sd * prior_sd;
    mean.iter()
        .zip(log_sd)
        .map(|(&m, &s)| prior_sd.ln() - s + ((2.0 * s).exp() + m * m) / (2.0 * var0) - 0.5)
        .sum()
}

/// The same divergence recorded on a tape.
pub fn tape_gaussian_kl(tape: &mut Tape, mean: Var, log_sd: Var, n: usize, prior_sd: f64) -> Var {
    let var0 = prior_sd * prior_sd;
    let two_s = tape.scale(log_sd, 2.0);
    let var = tape.exp(two_s);
    let m2 = tape.square(mean);
    let quad = tape.add(var, m2);
    let quad = tape.reduce_sum(quad);
    let quad = tape.scale(quad, 1.0 / (2.0 * var0));
    let logs = tape.reduce_sum(log_sd);
    let kl = tape.sub(quad, logs);
    tape.shift(kl, n as f64 * (prior_sd.ln() - 0.5))
}
