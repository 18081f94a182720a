//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::error::{Result, TapeError};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Worst entry-wise disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Input name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
}

/// Compares reverse-mode gradients of `output` against central differences.
///
/// The error for each input entry is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check(
    tape: &Tape,
    inputs: &BTreeMap<String, Tensor>,
    output: &str,
    step: f64,
) -> Result<GradientCheck> {
    if !(step > 0.0) {
        return Err(TapeError::InvalidStep(step));
    }
    let analytic = tape.gradient(inputs, output)?;
    let mut probe = inputs.clone();
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        worst: None,
    };
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let original = inputs[name].data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + step;
            let up = scalar_output(tape, &probe, output)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - step;
            let down = scalar_output(tape, &probe, output)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst.max_relative_error || worst.worst.is_none() {
                worst.max_relative_error = err;
                worst.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(worst)
}

fn scalar_output(tape: &Tape, inputs: &BTreeMap<String, Tensor>, output: &str) -> Result<f64> {
    let fwd = tape.forward(inputs)?;
    let t = fwd.output(output)?;
    t.item().ok_or_else(|| TapeError::NonScalarOutput {
        name: output.to_string(),
        shape: t.shape().to_vec(),
    })
}
