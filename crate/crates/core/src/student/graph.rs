//! Tape construction for a padded batch of rows.
//!
//! A row is one patient under one weight draw. Rows sharing a draw share
//! sampled embedding tables and additive coefficients; rows with different
//! draws (the samples of one patient, say) get their own.

use std::collections::BTreeMap;

use riskdistill_diffcore::{Tape, Tensor, Var};

use super::loss::PROB_FLOOR;
use super::noise::{age_noise, code_noise};
use super::{names, ArchConfig, EncodedPatient, LatentPair, StudentModel};
use crate::error::{Error, Result};

/// Lower clamp on the GP predictive variance.
const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub patient: &'a EncodedPatient,
    pub draw: u64,
    /// Standard-normal noise for the GP function sample.
    pub gp_noise: f64,
}

impl<'a> Row<'a> {
    pub fn new(patient: &'a EncodedPatient, draw: u64, gp_noise: f64) -> Self {
        Self {
            patient,
            draw,
            gp_noise,
        }
    }
}

/// Soft masks applied by the explainer.
#[derive(Debug, Clone, Copy)]
pub struct StepMask {
    /// `[rows, max_len]`: weight of each step's embedding.
    pub steps: Var,
    /// `[rows, codes]`: soft presence of each code of [`Batch::codes`].
    pub presence: Var,
}

pub(crate) struct ParamVars {
    vars: BTreeMap<&'static str, Var>,
}

const ALL_PARAMS: [&str; 20] = [
    names::CODE_MEAN,
    names::CODE_LOG_SD,
    names::AGE_MEAN,
    names::AGE_LOG_SD,
    names::FWD_IN,
    names::FWD_REC,
    names::FWD_BIAS,
    names::BWD_IN,
    names::BWD_REC,
    names::BWD_BIAS,
    names::READOUT_W,
    names::READOUT_B,
    names::ADD_MEAN,
    names::ADD_LOG_SD,
    names::GP_INDUCING,
    names::GP_MEAN,
    names::GP_SCALE_LOWER,
    names::GP_SCALE_LOG_DIAG,
    names::GP_LOG_LENGTHSCALE,
    names::GP_LOG_VARIANCE,
];

impl ParamVars {
    pub(crate) fn bind(tape: &mut Tape) -> Self {
        Self {
            vars: ALL_PARAMS.iter().map(|&n| (n, tape.input(n))).collect(),
        }
    }

    pub(crate) fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

pub(crate) struct Built {
    pub contextual: Var,
    pub additive: Var,
    pub prob: Option<Var>,
    pub kl_gp: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    rows: Vec<Row<'a>>,
    codes: Vec<usize>,
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::filled(&[rows, cols], 1.0)
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<Row<'a>>) -> Self {
        let mut codes: Vec<usize> = rows.iter().flat_map(|r| r.patient.present.iter().copied()).collect();
        codes.sort_unstable();
        codes.dedup();
        Self { rows, codes }
    }

    pub fn rows(&self) -> &[Row<'a>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Union of the rows' present codes, ascending; the column order of presence masks.
    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn max_len(&self) -> usize {
        self.rows.iter().map(|r| r.patient.sequence.len()).max().unwrap_or(0)
    }

    fn draws(&self) -> Vec<u64> {
        let mut d: Vec<u64> = Vec::new();
        for r in &self.rows {
            if !d.contains(&r.draw) {
                d.push(r.draw);
            }
        }
        d
    }

    /// Records the forward model on `tape`. With `with_gp` unset only the latents are built.
    pub(crate) fn build(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        arch: &ArchConfig,
        mask: Option<StepMask>,
        with_gp: bool,
    ) -> Result<Built> {
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if let Some(r) = self.rows.iter().find(|r| r.patient.sequence.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "patient {} has an empty sequence",
                r.patient.patient_id
            )));
        }
        if let Some(c) = self.codes.iter().find(|&&c| c >= arch.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "code {c} outside vocabulary of {}",
                arch.vocab_size
            )));
        }
        let (b, d, h) = (self.rows.len(), arch.embed_dim, arch.hidden_dim);
        let draws = self.draws();
        let group_of: Vec<usize> = self
            .rows
            .iter()
            .map(|r| draws.iter().position(|&x| x == r.draw).expect("draw listed"))
            .collect();

        // sampled embedding tables, one block per draw
        let mut code_parts = Vec::new();
        let mut age_parts = Vec::new();
        let mut code_offset: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut age_offset: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut coef_noise: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (g, &draw) in draws.iter().enumerate() {
            let members = || {
                self.rows
                    .iter()
                    .zip(&group_of)
                    .filter(move |(_, &k)| k == g)
                    .map(|(r, _)| r)
            };
            let mut codes: Vec<usize> = members()
                .flat_map(|r| r.patient.sequence.code_ids.iter().chain(&r.patient.present).copied())
                .collect();
            codes.sort_unstable();
            codes.dedup();
            let mut ages: Vec<usize> = members()
                .flat_map(|r| r.patient.sequence.age_ids.iter().copied())
                .collect();
            ages.sort_unstable();
            ages.dedup();
            if let Some(a) = ages.iter().find(|&&a| a >= crate::cohort::N_AGES) {
                return Err(Error::InvalidInput(format!("age id {a} outside the age table")));
            }

            let mut noise = Vec::with_capacity(codes.len() * d);
            let base = code_offset.len();
            for (k, &c) in codes.iter().enumerate() {
                let e = code_noise(draw, c, d);
                noise.extend_from_slice(&e[..d]);
                coef_noise.insert((g, c), e[d]);
                code_offset.insert((g, c), base + k);
            }
            code_parts.push(sampled_rows(
                tape,
                p.get(names::CODE_MEAN),
                p.get(names::CODE_LOG_SD),
                &codes,
                noise,
                d,
            ));

            let mut noise = Vec::with_capacity(ages.len() * d);
            let base = age_offset.len();
            for (k, &a) in ages.iter().enumerate() {
                noise.extend(age_noise(draw, a, d));
                age_offset.insert((g, a), base + k);
            }
            age_parts.push(sampled_rows(
                tape,
                p.get(names::AGE_MEAN),
                p.get(names::AGE_LOG_SD),
                &ages,
                noise,
                d,
            ));
        }
        let code_table = concat_rows(tape, code_parts);
        let age_table = concat_rows(tape, age_parts);

        // per-step input indices into the sampled tables
        let t_max = self.max_len();
        let lens: Vec<usize> = self.rows.iter().map(|r| r.patient.sequence.len()).collect();
        let step_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..t_max)
            .map(|t| {
                self.rows
                    .iter()
                    .zip(&group_of)
                    .map(|(r, &g)| {
                        let s = &r.patient.sequence;
                        if t < s.len() {
                            (code_offset[&(g, s.code_ids[t])], age_offset[&(g, s.age_ids[t])])
                        } else {
                            (0, 0)
                        }
                    })
                    .unzip()
            })
            .collect();
        let ones_z = mask.map(|_| tape.constant(ones(1, 4 * h)));
        // (code + age)·W equals code·W + age·W, so the tables are projected once
        let projected_inputs = |tape: &mut Tape, w_in: Var| -> Vec<Var> {
            let code_proj = tape.matmul(code_table, w_in);
            let age_proj = tape.matmul(age_table, w_in);
            step_rows
                .iter()
                .enumerate()
                .map(|(t, (ci, ai))| {
                    let ce = tape.gather_rows(code_proj, ci.clone());
                    let ae = tape.gather_rows(age_proj, ai.clone());
                    let x = tape.add(ce, ae);
                    match (mask, ones_z) {
                        (Some(m), Some(oz)) => {
                            let col = tape.slice(m.steps, 1, t, 1);
                            let wide = tape.matmul(col, oz);
                            tape.mul(x, wide)
                        }
                        _ => x,
                    }
                })
                .collect()
        };
        let fwd_inputs = projected_inputs(tape, p.get(names::FWD_IN));
        let bwd_inputs = projected_inputs(tape, p.get(names::BWD_IN));

        // padding masks, only for steps where some row has ended
        let step_masks: Vec<Option<Var>> = (0..t_max)
            .map(|t| {
                if lens.iter().all(|&l| t < l) {
                    None
                } else {
                    let data: Vec<f64> = lens
                        .iter()
                        .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, h))
                        .collect();
                    Some(tape.constant(Tensor::matrix(b, h, data).expect("b x h")))
                }
            })
            .collect();

        let ones_b = tape.constant(ones(b, 1));
        let fwd = lstm_pass(
            tape,
            [p.get(names::FWD_REC), p.get(names::FWD_BIAS)],
            ones_b,
            &fwd_inputs,
            &step_masks,
            (0..t_max).collect(),
            b,
            h,
        );
        let bwd = lstm_pass(
            tape,
            [p.get(names::BWD_REC), p.get(names::BWD_BIAS)],
            ones_b,
            &bwd_inputs,
            &step_masks,
            (0..t_max).rev().collect(),
            b,
            h,
        );
        let both = tape.concat(&[fwd, bwd], 1);
        let ctx = tape.matmul(both, p.get(names::READOUT_W));
        let contextual = tape.add(ctx, p.get(names::READOUT_B));

        // additive head: Σ presence · sampled coefficient
        let u = self.codes.len();
        let additive = if u == 0 {
            tape.constant(Tensor::zeros(&[b, 1]))
        } else {
            let mu = tape.gather_rows(p.get(names::ADD_MEAN), self.codes.clone());
            let ls = tape.gather_rows(p.get(names::ADD_LOG_SD), self.codes.clone());
            let mu = tape.transpose(mu);
            let sd = tape.exp(ls);
            let sd = tape.transpose(sd);
            let mu_b = tape.matmul(ones_b, mu);
            let sd_b = tape.matmul(ones_b, sd);
            let eps: Vec<f64> = group_of
                .iter()
                .flat_map(|&g| self.codes.iter().map(move |&c| (g, c)))
                .map(|k| coef_noise[&k])
                .collect();
            let eps = tape.constant(Tensor::matrix(b, u, eps).expect("b x u"));
            let jitter = tape.mul(sd_b, eps);
            let coef = tape.add(mu_b, jitter);
            let presence = match mask {
                Some(m) => m.presence,
                None => {
                    let bits: Vec<f64> = self
                        .rows
                        .iter()
                        .flat_map(|r| {
                            self.codes.iter().map(|c| {
                                if r.patient.present.binary_search(c).is_ok() {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect();
                    tape.constant(Tensor::matrix(b, u, bits).expect("b x u"))
                }
            };
            let terms = tape.mul(presence, coef);
            tape.sum_axis(terms, 1)
        };

        if !with_gp {
            return Ok(Built {
                contextual,
                additive,
                prob: None,
                kl_gp: None,
            });
        }
        let x = tape.concat(&[contextual, additive], 1);
        let noise: Vec<f64> = self.rows.iter().map(|r| r.gp_noise).collect();
        let gp = gp_layer(tape, p, arch, x, b, Tensor::column(noise));
        Ok(Built {
            contextual,
            additive,
            prob: Some(gp.prob),
            kl_gp: Some(gp.kl),
        })
    }

    pub fn latents(&self, model: &StudentModel) -> Result<Vec<LatentPair>> {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape);
        let built = self.build(&mut tape, &p, &model.arch, None, false)?;
        tape.output("contextual", built.contextual);
        tape.output("additive", built.additive);
        let out = tape.evaluate(&model.params)?;
        Ok(out["contextual"]
            .data()
            .iter()
            .zip(out["additive"].data())
            .map(|(&contextual, &additive)| LatentPair { contextual, additive })
            .collect())
    }

    pub fn probabilities(&self, model: &StudentModel) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape);
        let built = self.build(&mut tape, &p, &model.arch, None, true)?;
        tape.output("prob", built.prob.expect("gp built"));
        Ok(tape.evaluate(&model.params)?["prob"].data().to_vec())
    }
}

/// `mean[rows] + exp(log_sd[rows]) ⊙ noise`.
fn sampled_rows(tape: &mut Tape, mean: Var, log_sd: Var, rows: &[usize], noise: Vec<f64>, d: usize) -> Var {
    let m = tape.gather_rows(mean, rows.to_vec());
    let s = tape.gather_rows(log_sd, rows.to_vec());
    let s = tape.exp(s);
    let e = tape.constant(Tensor::matrix(rows.len(), d, noise).expect("rows x d"));
    let j = tape.mul(s, e);
    tape.add(m, j)
}

fn concat_rows(tape: &mut Tape, parts: Vec<Var>) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 0)
    }
}

/// One LSTM direction over `order`; returns the final hidden state `[b, h]`.
#[allow(clippy::too_many_arguments)]
fn lstm_pass(
    tape: &mut Tape,
    [w_rec, bias]: [Var; 2],
    ones_b: Var,
    inputs: &[Var],
    masks: &[Option<Var>],
    order: Vec<usize>,
    b: usize,
    h: usize,
) -> Var {
    let bias_b = tape.matmul(ones_b, bias);
    let mut state: Option<(Var, Var)> = None;
    let zeros = tape.constant(Tensor::zeros(&[b, h]));
    for t in order {
        let mut z = tape.add(inputs[t], bias_b);
        if let Some((hp, _)) = state {
            let hz = tape.matmul(hp, w_rec);
            z = tape.add(z, hz);
        }
        let i = tape.slice(z, 1, 0, h);
        let f = tape.slice(z, 1, h, h);
        let g = tape.slice(z, 1, 2 * h, h);
        let o = tape.slice(z, 1, 3 * h, h);
        let i = tape.sigmoid(i);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let ig = tape.mul(i, g);
        let c_new = match state {
            Some((_, cp)) => {
                let f = tape.sigmoid(f);
                let fc = tape.mul(f, cp);
                tape.add(fc, ig)
            }
            None => ig,
        };
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        let (h_prev, c_prev) = state.unwrap_or((zeros, zeros));
        state = Some(match masks[t] {
            None => (h_new, c_new),
            Some(m) => (blend(tape, h_prev, h_new, m), blend(tape, c_prev, c_new, m)),
        });
    }
    state.map(|(h, _)| h).unwrap_or(zeros)
}

/// `old + m ⊙ (new − old)`.
fn blend(tape: &mut Tape, old: Var, new: Var, m: Var) -> Var {
    let diff = tape.sub(new, old);
    let step = tape.mul(m, diff);
    tape.add(old, step)
}

/// RBF kernel matrix `[p, q]` between the rows of `a` and `b`.
fn rbf(tape: &mut Tape, a: Var, b: Var, p: usize, q: usize, inv_l2: Var, variance: Var) -> Var {
    let a2 = tape.square(a);
    let an = tape.sum_axis(a2, 1);
    let b2 = tape.square(b);
    let bn = tape.sum_axis(b2, 1);
    let ones_q = tape.constant(ones(1, q));
    let ones_p = tape.constant(ones(p, 1));
    let an_wide = tape.matmul(an, ones_q);
    let bn_t = tape.transpose(bn);
    let bn_wide = tape.matmul(ones_p, bn_t);
    let bt = tape.transpose(b);
    let cross = tape.matmul(a, bt);
    let cross = tape.scale(cross, -2.0);
    let d2 = tape.add(an_wide, bn_wide);
    let d2 = tape.add(d2, cross);
    let scaled = tape.mul(d2, inv_l2);
    let scaled = tape.scale(scaled, -0.5);
    let k = tape.exp(scaled);
    tape.mul(k, variance)
}

struct GpCore {
    chol: Var,
    scale: Var,
    whitened_mean: Var,
    inv_l2: Var,
    variance: Var,
}

fn gp_core(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig) -> GpCore {
    let m = arch.n_inducing;
    let z = p.get(names::GP_INDUCING);
    let log_l = p.get(names::GP_LOG_LENGTHSCALE);
    let neg2 = tape.scale(log_l, -2.0);
    let inv_l2 = tape.exp(neg2);
    let variance = tape.exp(p.get(names::GP_LOG_VARIANCE));
    let kzz = rbf(tape, z, z, m, m, inv_l2, variance);
    let jitter = tape.constant(Tensor::identity(m).map(|x| x * arch.jitter));
    let kzz = tape.add(kzz, jitter);
    let chol = tape.cholesky(kzz);

    let mut strict = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..i {
            strict[i * m + j] = 1.0;
        }
    }
    let strict = tape.constant(Tensor::matrix(m, m, strict).expect("m x m"));
    let lower = tape.mul(p.get(names::GP_SCALE_LOWER), strict);
    let diag = tape.exp(p.get(names::GP_SCALE_LOG_DIAG));
    let ones_m = tape.constant(ones(1, m));
    let diag_wide = tape.matmul(diag, ones_m);
    let eye = tape.constant(Tensor::identity(m));
    let diag_m = tape.mul(diag_wide, eye);
    let scale = tape.add(lower, diag_m);
    let whitened_mean = tape.solve_lower(chol, p.get(names::GP_MEAN));
    GpCore {
        chol,
        scale,
        whitened_mean,
        inv_l2,
        variance,
    }
}

/// `KL(q(u) ‖ p(u))` with `q = N(μ, S S^T)` and `p = N(0, K_zz)`.
pub(crate) fn gp_kl(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig) -> Var {
    let core = gp_core(tape, p, arch);
    gp_kl_from(tape, p, arch, &core)
}

fn gp_kl_from(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, core: &GpCore) -> Var {
    let m = arch.n_inducing;
    let w = tape.solve_lower(core.chol, core.scale);
    let w2 = tape.square(w);
    let trace = tape.reduce_sum(w2);
    let u2 = tape.square(core.whitened_mean);
    let maha = tape.reduce_sum(u2);
    let eye = tape.constant(Tensor::identity(m));
    let ld = tape.mul(core.chol, eye);
    let ld = tape.sum_axis(ld, 1);
    let ld = tape.log(ld);
    let logdet_k = tape.reduce_sum(ld);
    let logdet_k = tape.scale(logdet_k, 2.0);
    let ls = tape.reduce_sum(p.get(names::GP_SCALE_LOG_DIAG));
    let logdet_s = tape.scale(ls, 2.0);
    let a = tape.add(trace, maha);
    let a = tape.add(a, logdet_k);
    let a = tape.sub(a, logdet_s);
    let a = tape.shift(a, -(m as f64));
    tape.scale(a, 0.5)
}

pub(crate) struct GpOut {
    pub mean: Var,
    pub var: Var,
    pub prob: Var,
    pub kl: Var,
}

/// GP posterior at the `[b, 2]` inputs `x` and one function sample per row.
pub(crate) fn gp_layer(tape: &mut Tape, p: &ParamVars, arch: &ArchConfig, x: Var, b: usize, noise: Tensor) -> GpOut {
    let m = arch.n_inducing;
    let core = gp_core(tape, p, arch);
    let z = p.get(names::GP_INDUCING);
    let kzx = rbf(tape, z, x, m, b, core.inv_l2, core.variance);
    let a = tape.solve_lower(core.chol, kzx);
    let at = tape.transpose(a);
    let mean = tape.matmul(at, core.whitened_mean);

    let a2 = tape.square(a);
    let q = tape.sum_axis(a2, 0);
    let q = tape.transpose(q);
    let proj = tape.solve_lower_transposed(core.chol, a);
    let st = tape.transpose(core.scale);
    let sp = tape.matmul(st, proj);
    let sp2 = tape.square(sp);
    let s = tape.sum_axis(sp2, 0);
    let s = tape.transpose(s);
    let var = tape.sub(s, q);
    let var = tape.add(var, core.variance);
    let var = tape.clamp(var, MIN_VARIANCE, f64::MAX);

    let sd = tape.sqrt(var);
    let eps = tape.constant(noise);
    let jitter = tape.mul(sd, eps);
    let f = tape.add(mean, jitter);
    let prob = tape.sigmoid(f);
    let prob = tape.clamp(prob, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let kl = gp_kl_from(tape, p, arch, &core);
    GpOut { mean, var, prob, kl }
}

/// Posterior mean and variance of the latent function at fixed latent inputs.
pub(crate) fn gp_moments(model: &StudentModel, latents: &[LatentPair]) -> Result<Vec<(f64, f64)>> {
    let n = latents.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape);
    let data: Vec<f64> = latents.iter().flat_map(|l| [l.contextual, l.additive]).collect();
    let x = tape.constant(Tensor::matrix(n, 2, data).map_err(crate::Error::from)?);
    let gp = gp_layer(&mut tape, &p, &model.arch, x, n, Tensor::zeros(&[n, 1]));
    tape.output("mean", gp.mean);
    tape.output("var", gp.var);
    let out = tape.evaluate(&model.params)?;
    Ok(out["mean"]
        .data()
        .iter()
        .zip(out["var"].data())
        .map(|(&m, &v)| (m, v))
        .collect())
}
