//! Adam over a named parameter set.

use std::collections::BTreeMap;

use riskdistill_diffcore::Tensor;
use serde::{Deserialize, Serialize};

pub type Params = BTreeMap<String, Tensor>;

/// Serializable form of a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Option<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone()).ok()
    }
}

pub fn store_params(params: &Params) -> BTreeMap<String, StoredTensor> {
    params.iter().map(|(k, v)| (k.clone(), v.into())).collect()
}

pub fn load_params(stored: &BTreeMap<String, StoredTensor>) -> Option<Params> {
    stored
        .iter()
        .map(|(k, v)| v.to_tensor().map(|t| (k.clone(), t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: BTreeMap<String, StoredTensor>,
    second: BTreeMap<String, StoredTensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Parameters listed in
    /// `frozen` are left untouched.
    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, frozen: &[&str]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if frozen.contains(&name.as_str()) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let zeros = || StoredTensor {
                shape: g.shape().to_vec(),
                data: vec![0.0; g.len()],
            };
            let m = self.first.entry(name.clone()).or_insert_with(zeros);
            let v = self.second.entry(name.clone()).or_insert_with(zeros);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut params = Params::new();
        params.insert("x".into(), Tensor::column(vec![3.0, -2.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = params["x"].map(|x| 2.0 * x);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            adam.update(&mut params, &grads, &[]);
        }
        assert!(params["x"].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = Params::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(5.0));
        let mut adam = Adam::new(0.01);
        adam.update(&mut params, &grads, &[]);
        assert!((params["x"].item().unwrap() - 0.99).abs() < 1e-9);
    }
}
