//! Standard-normal weight noise keyed by (draw, row of the weight table), so a
//! draw touches only the embedding rows a batch actually uses.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{stream_rng, streams};

/// Embedding noise (`dim` values) followed by the additive-coefficient noise of `code`.
pub(crate) fn code_noise(draw: u64, code: usize, dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(draw, streams::WEIGHTS, code as u64);
    (0..=dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub(crate) fn age_noise(draw: u64, age: usize, dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(draw, streams::AGE_WEIGHTS, age as u64);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}
