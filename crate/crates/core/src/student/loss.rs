use riskdistill_diffcore::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::graph::{Batch, ParamVars};
use super::{names, StudentModel};
use crate::bayes::tape_gaussian_kl;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Soft-label cross-entropy `−[p log s + (1 − p) log(1 − s)]`. Only the
/// student probability sits inside a log, so only it is floored.
pub fn distill_loss(teacher_prob: f64, student_prob: f64) -> f64 {
    let p = teacher_prob.clamp(0.0, 1.0);
    let s = clamp_prob(student_prob);
    -(p * s.ln() + (1.0 - p) * (1.0 - s).ln())
}

pub fn binary_entropy(p: f64) -> f64 {
    distill_loss(p, p)
}

pub fn total_loss(elbo: f64, distill: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        elbo
    } else if alpha == 0.0 {
        distill
    } else {
        alpha * elbo + (1.0 - alpha) * distill
    }
}

/// Mean binary cross-entropy of probabilities against hard labels.
pub fn cross_entropy(probs: &[f64], labels: &[bool]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| distill_loss(if y { 1.0 } else { 0.0 }, p))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cross_entropy: f64,
    pub kl_weights: f64,
    pub kl_gp: f64,
    pub kl_scale: f64,
    pub elbo: f64,
    pub distill: Option<f64>,
    pub total: f64,
}

/// What a training tape is asked to fit.
pub struct Targets<'t> {
    pub labels: &'t [bool],
    pub soft: Option<&'t [f64]>,
    pub alpha: f64,
    pub kl_scale: f64,
}

/// Records the full objective of `batch` on a fresh tape. Outputs: `total`,
/// `elbo`, `cross_entropy`, `kl_weights`, `kl_gp`, `prob` and, with soft labels, `distill`.
pub fn objective_tape(model: &StudentModel, batch: &Batch<'_>, targets: &Targets<'_>) -> Result<Tape> {
    let b = batch.len();
    if targets.labels.len() != b || targets.soft.is_some_and(|s| s.len() != b) {
        return Err(Error::InvalidInput("targets do not match the batch".into()));
    }
    if !(0.0..=1.0).contains(&targets.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", targets.alpha)));
    }
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape);
    let built = batch.build(&mut tape, &p, &model.arch, None, true)?;
    let prob = built.prob.expect("gp built");
    tape.output("prob", prob);

    let log_p = tape.log(prob);
    let one_minus = tape.one_minus(prob);
    let log_q = tape.log(one_minus);
    let soft_ce = |tape: &mut Tape, target: Vec<f64>| {
        let y = tape.constant(Tensor::column(target.clone()));
        let ny = tape.constant(Tensor::column(target.iter().map(|v| 1.0 - v).collect()));
        let a = tape.mul(y, log_p);
        let c = tape.mul(ny, log_q);
        let s = tape.add(a, c);
        let m = tape.reduce_mean(s);
        tape.neg(m)
    };
    let ce = soft_ce(
        &mut tape,
        targets.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
    );

    let mut kl_w = None;
    for (m, s) in names::VARIATIONAL {
        let n = model.params[m].len();
        let k = tape_gaussian_kl(&mut tape, p.get(m), p.get(s), n, model.arch.prior_sd);
        kl_w = Some(match kl_w {
            None => k,
            Some(acc) => tape.add(acc, k),
        });
    }
    let kl_w = kl_w.expect("variational parameters exist");
    let kl_gp = built.kl_gp.expect("gp built");
    let kl = tape.add(kl_w, kl_gp);
    let kl = tape.scale(kl, targets.kl_scale);
    let elbo = tape.add(ce, kl);
    tape.output("cross_entropy", ce);
    tape.output("kl_weights", kl_w);
    tape.output("kl_gp", kl_gp);
    tape.output("elbo", elbo);

    let total = match targets.soft {
        Some(soft) if targets.alpha < 1.0 => {
            let distill = soft_ce(&mut tape, soft.iter().map(|&v| v.clamp(0.0, 1.0)).collect());
            tape.output("distill", distill);
            if targets.alpha == 0.0 {
                distill
            } else {
                let a = tape.scale(elbo, targets.alpha);
                let c = tape.scale(distill, 1.0 - targets.alpha);
                tape.add(a, c)
            }
        }
        _ => elbo,
    };
    tape.output("total", total);
    Ok(tape)
}

pub(crate) fn components(out: &std::collections::BTreeMap<String, Tensor>, kl_scale: f64) -> LossComponents {
    let get = |k: &str| out.get(k).map(|t| t.data()[0]);
    LossComponents {
        cross_entropy: get("cross_entropy").unwrap_or(f64::NAN),
        kl_weights: get("kl_weights").unwrap_or(f64::NAN),
        kl_gp: get("kl_gp").unwrap_or(f64::NAN),
        kl_scale,
        elbo: get("elbo").unwrap_or(f64::NAN),
        distill: get("distill"),
        total: get("total").unwrap_or(f64::NAN),
    }
}

impl StudentModel {
    /// ELBO of one batch: mean cross-entropy of the sampled probabilities plus
    /// `kl_scale` times the weight and GP divergences.
    pub fn elbo_loss(&self, batch: &Batch<'_>, labels: &[bool], kl_scale: f64) -> Result<(f64, LossComponents)> {
        let targets = Targets {
            labels,
            soft: None,
            alpha: 1.0,
            kl_scale,
        };
        let tape = objective_tape(self, batch, &targets)?;
        let out = tape.evaluate(&self.params)?;
        let c = components(&out, kl_scale);
        Ok((c.elbo, c))
    }

    /// Full objective and its gradient with respect to every parameter.
    pub fn objective_gradient(
        &self,
        batch: &Batch<'_>,
        labels: &[bool],
        soft: Option<&[f64]>,
        alpha: f64,
        kl_scale: f64,
    ) -> Result<(LossComponents, std::collections::BTreeMap<String, Tensor>)> {
        let targets = Targets {
            labels,
            soft,
            alpha,
            kl_scale,
        };
        let tape = objective_tape(self, batch, &targets)?;
        let fwd = tape.forward(&self.params)?;
        let c = components(&fwd.outputs(), kl_scale);
        Ok((c, fwd.backward("total")?))
    }
}
