//! Monte-Carlo objective: weighted sums of per-sample characteristic costs
//! plus the HJB penalties.

use rayon::prelude::*;

use crate::error::{LossTerm, MfgError, Result};
use crate::nn_potential::PotentialParams;
use crate::problems::ProblemSpec;
use crate::rng::substream;
use crate::trajectories::{record_integrate, IntegratorConfig, Origin, TapedModel, TrajectoryState};

/// Samples per reduction chunk. Partial sums are formed per chunk and then
/// added in chunk order, so results do not depend on the worker count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub d: usize,
    /// Row-major N × d.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Reduction order key.
    pub ids: Vec<u64>,
    pub seed: u64,
    pub purpose: Purpose,
}

impl SampleBatch {
    pub fn new(d: usize, points: Vec<f64>, weights: Vec<f64>, ids: Vec<u64>, seed: u64, purpose: Purpose) -> Result<Self> {
        let n = weights.len();
        if d == 0 || points.len() != n * d || ids.len() != n {
            return Err(MfgError::Shape(format!(
                "batch with {} weights, {} ids and {} coordinates in d={d}",
                n,
                ids.len(),
                points.len()
            )));
        }
        if n == 0 {
            return Err(MfgError::Config("batch must not be empty".into()));
        }
        Ok(SampleBatch {
            d,
            points,
            weights,
            ids,
            seed,
            purpose,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.d..(k + 1) * self.d]
    }
}

/// N i.i.d. draws from ρ₀ with weights 1/N. The batch depends only on
/// (`seed`, `purpose`).
pub fn draw_batch(prob: &ProblemSpec, n: usize, seed: u64, purpose: Purpose) -> Result<SampleBatch> {
    if n == 0 {
        return Err(MfgError::Config("batch size must be >= 1".into()));
    }
    let name = match purpose {
        Purpose::Train => "train-batch",
        Purpose::Validation => "validation",
    };
    let mut rng = substream(seed, name);
    let mut points = Vec::with_capacity(n * prob.d);
    for _ in 0..n {
        points.extend(prob.rho0.sample(&mut rng));
    }
    SampleBatch::new(
        prob.d,
        points,
        vec![1.0 / n as f64; n],
        (0..n as u64).collect(),
        seed,
        purpose,
    )
}

/// Weighted objective buckets. `g` is the weighted terminal cost including
/// λ_KL; `c1` and `c2` are the unweighted HJB penalties.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l: f64,
    pub f: f64,
    pub g: f64,
    pub c1: f64,
    pub c2: f64,
}

impl LossBreakdown {
    /// L + F + G.
    pub fn mfg(&self) -> f64 {
        self.l + self.f + self.g
    }

    /// α₁C₁ + α₂C₂.
    pub fn hjb(&self, alpha1: f64, alpha2: f64) -> f64 {
        alpha1 * self.c1 + alpha2 * self.c2
    }

    fn finish(mut self, prob: &ProblemSpec) -> Self {
        self.total = self.mfg() + self.hjb(prob.alpha1, prob.alpha2);
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct SampleTerms {
    c_l: f64,
    c_f: f64,
    c_1: f64,
    g_hat: f64,
    c_2: f64,
}

fn record_sample(
    tm: &mut TapedModel,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
    x: &[f64],
    sample: usize,
) -> Result<(SampleTerms, crate::autodiff::tape::Var)> {
    let d = prob.d;
    tm.tape.reset();
    let origin = Origin {
        sample,
        log_rho0: prob.rho0.log_pdf(x),
    };
    let y0 = tm.tape.vector(&TrajectoryState::initial(x).packed_state());
    let y = record_integrate(tm, prob, cfg, y0, origin, None)?;
    let TapedModel {
        tape,
        params,
        fields,
    } = tm;
    let z = tape.slice(y, 0, d);
    let l = tape.slice(y, d, 1);
    let c_l = tape.slice(y, d + 1, 1);
    let c_f = tape.slice(y, d + 2, 1);
    let c_1 = tape.slice(y, d + 3, 1);
    let (g_hat, g) = prob.record_terminal(tape, fields, z, l, origin.log_rho0);
    let tv = tape.constant(cfg.horizon);
    let s = tape.concat(z, tv);
    let phi = params.record_phi(tape, s);
    let c_2 = prob.record_terminal_penalty(tape, phi, g);

    let terms = SampleTerms {
        c_l: tape.scalar(c_l),
        c_f: tape.scalar(c_f),
        c_1: tape.scalar(c_1),
        g_hat: tape.scalar(g_hat),
        c_2: tape.scalar(c_2),
    };
    let checks = [
        (terms.c_l, LossTerm::TransportCost),
        (terms.c_f, LossTerm::RunningCost),
        (terms.c_1, LossTerm::HjbResidual),
        (terms.g_hat, LossTerm::TerminalCost),
        (terms.c_2, LossTerm::TerminalPenalty),
    ];
    if let Some(&(_, term)) = checks.iter().find(|(v, _)| !v.is_finite()) {
        return Err(MfgError::NonFinite { term, sample });
    }

    let a = tape.add(c_l, c_f);
    let b = tape.add(a, g_hat);
    let c = tape.axpy(b, c_1, prob.alpha1);
    let loss = tape.axpy(c, c_2, prob.alpha2);
    Ok((terms, loss))
}

struct Partial {
    sums: LossBreakdown,
    grad: Vec<f64>,
}

fn check_inputs(theta: &PotentialParams, batch: &SampleBatch, prob: &ProblemSpec) -> Result<()> {
    if batch.is_empty() {
        return Err(MfgError::Config("batch must not be empty".into()));
    }
    if batch.d != prob.d || theta.arch().d != prob.d {
        return Err(MfgError::Shape(format!(
            "batch d={}, network d={}, problem d={}",
            batch.d,
            theta.arch().d,
            prob.d
        )));
    }
    Ok(())
}

fn run(
    theta: &PotentialParams,
    batch: &SampleBatch,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_inputs(theta, batch, prob)?;
    cfg.validate()?;
    let template = TapedModel::new(theta, prob)?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&k| batch.ids[k]);
    let chunks: Vec<&[usize]> = order.chunks(CHUNK).collect();

    let partials: Vec<Result<Partial>> = chunks
        .par_iter()
        .map_init(
            || template.clone(),
            |tm, chunk| {
                if want_grad {
                    tm.tape.zero_persistent_adjoint();
                }
                let mut sums = LossBreakdown::default();
                for &k in chunk.iter() {
                    let (t, loss) = record_sample(tm, prob, cfg, batch.point(k), batch.ids[k] as usize)?;
                    let v = batch.weights[k];
                    sums.l += v * t.c_l;
                    sums.f += v * t.c_f;
                    sums.g += v * t.g_hat;
                    sums.c1 += v * t.c_1;
                    sums.c2 += v * t.c_2;
                    if want_grad {
                        tm.tape.accumulate(loss, v);
                    }
                }
                let grad = if want_grad {
                    tm.tape.persistent_adjoint().to_vec()
                } else {
                    Vec::new()
                };
                Ok(Partial { sums, grad })
            },
        )
        .collect();

    let mut total = LossBreakdown::default();
    let mut grad = if want_grad { vec![0.0; theta.len()] } else { Vec::new() };
    for p in partials {
        let p = p?;
        total.l += p.sums.l;
        total.f += p.sums.f;
        total.g += p.sums.g;
        total.c1 += p.sums.c1;
        total.c2 += p.sums.c2;
        for (a, b) in grad.iter_mut().zip(&p.grad) {
            *a += b;
        }
    }
    Ok((total.finish(prob), grad))
}

/// Weighted objective over `batch`.
pub fn evaluate(
    theta: &PotentialParams,
    batch: &SampleBatch,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<LossBreakdown> {
    run(theta, batch, prob, cfg, false).map(|(b, _)| b)
}

/// [`evaluate`] on a held-out batch.
pub fn validate(
    theta: &PotentialParams,
    val_batch: &SampleBatch,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<LossBreakdown> {
    evaluate(theta, val_batch, prob, cfg)
}

/// Objective and its gradient with respect to θ in flat layout.
pub(crate) fn evaluate_with_grad(
    theta: &PotentialParams,
    batch: &SampleBatch,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    run(theta, batch, prob, cfg, true)
}
