use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampled outcome probabilities approximating a model's predictive distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    samples: Vec<f64>,
}

pub const DEFAULT_SAMPLES: usize = 30;

impl PredictiveDistribution {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput(
                "predictive distribution needs at least one sample".into(),
            ));
        }
        if let Some(bad) = samples.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("sample {bad} outside [0, 1]")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Running mean; a constant sample vector yields its value exactly.
    pub fn mean(&self) -> f64 {
        running_mean(&self.samples)
    }

    pub fn sd(&self) -> f64 {
        let m = self.mean();
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|x| (x - m).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

pub(crate) fn running_mean(xs: &[f64]) -> f64 {
    let mut m = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        m += (x - m) / (k + 1) as f64;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(PredictiveDistribution::new(vec![]).is_err());
        assert!(PredictiveDistribution::new(vec![0.2, 1.5]).is_err());
    }

    #[test]
    fn constant_mean_is_exact() {
        let d = PredictiveDistribution::new(vec![0.1; 30]).unwrap();
        assert_eq!(d.mean(), 0.1);
        assert_eq!(d.sd(), 0.0);
    }
}
