//! Training: sample average approximation with periodic resampling and a
//! two-level sample schedule, driving BFGS, L-BFGS or ADAM.

pub mod adam;
pub mod bfgs;
pub mod line_search;

use std::fmt;
use std::time::Instant;

use crate::autodiff::grad_loss;
use crate::error::{MfgError, Result};
use crate::nn_potential::{init_params, Architecture, InitScales, PotentialParams};
use crate::objective::{draw_batch, evaluate, LossBreakdown, Purpose, SampleBatch};
use crate::problems::{ProblemKind, ProblemSpec};
use crate::rng::{substream, substream_seed};
use crate::trajectories::IntegratorConfig;

pub use adam::{AdamParams, AdamState};
pub use bfgs::{bfgs_minimize, BfgsState, LbfgsState, StopCriteria};
pub use line_search::{armijo_search, LineSearchResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Bfgs,
    Lbfgs { memory: usize },
    Adam(AdamParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub iters_coarse: usize,
    pub iters_fine: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n_val: usize,
    pub resample_every: usize,
    pub optimizer: OptimizerKind,
    /// Stop a phase once ‖g‖ falls below this value.
    pub g_tol: f64,
    pub init: InitScales,
}

/// Training-set size per dimension for the two benchmarks.
pub fn default_n_fine(kind: ProblemKind, d: usize) -> usize {
    let rows: [(usize, usize, usize); 4] = [(2, 2304, 2304), (10, 6400, 6400), (50, 16384, 9216), (100, 36864, 12544)];
    let row = rows.iter().find(|r| d <= r.0).unwrap_or(&rows[3]);
    match kind {
        ProblemKind::OptimalTransport => row.1,
        ProblemKind::CrowdMotion => row.2,
    }
}

impl TrainSchedule {
    /// 500 + 500 BFGS iterations, resampling every 25.
    pub fn for_problem(kind: ProblemKind, d: usize) -> Self {
        let n_fine = default_n_fine(kind, d);
        TrainSchedule {
            iters_coarse: 500,
            iters_fine: 500,
            n_coarse: (n_fine / 4).max(1024),
            n_fine,
            n_val: if d <= 2 { 1024 } else { 4096 },
            resample_every: 25,
            optimizer: OptimizerKind::Bfgs,
            g_tol: 0.0,
            init: InitScales::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 || self.n_fine == 0 || self.n_val == 0 || self.resample_every == 0 {
            return Err(MfgError::Config(
                "sample sizes and resample interval must be >= 1".into(),
            ));
        }
        match self.optimizer {
            OptimizerKind::Lbfgs { memory: 0 } => Err(MfgError::Config("L-BFGS memory must be >= 1".into())),
            OptimizerKind::Adam(p) if !(p.step > 0.0 && (0.0..1.0).contains(&p.beta1) && (0.0..1.0).contains(&p.beta2) && p.eps > 0.0) => {
                Err(MfgError::Config("invalid ADAM parameters".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Coarse,
    Fine,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Coarse => "coarse",
            Phase::Fine => "fine",
        })
    }
}

/// One convergence-log row: validation buckets after iteration `iter`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: Phase,
    pub val: LossBreakdown,
    pub c_hjb: f64,
    /// Training objective at the current iterate and batch.
    pub train_j: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub wall_s: f64,
    /// Gradient evaluations so far, line-search trials included.
    pub grad_evals: usize,
    /// The accepted step satisfied the sufficient-decrease test.
    pub armijo_ok: bool,
}

impl TraceRow {
    pub const HEADER: &'static str = "iter,phase,J,J_MFG,L,F,G,C1,C2,C_HJB,train_J,grad_norm,step,wall_s";

    pub fn to_line(&self) -> String {
        let v = &self.val;
        format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.6}",
            self.iter,
            self.phase,
            v.total,
            v.mfg(),
            v.l,
            v.f,
            v.g,
            v.c1,
            v.c2,
            self.c_hjb,
            self.train_j,
            self.grad_norm,
            self.step,
            self.wall_s
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Two consecutive line-search failures ended a phase early.
    LineSearchStalled { phase: Phase, iter: usize },
    /// The objective or its gradient became non-finite at the current iterate.
    Diverged { iter: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Last iterate with a finite objective.
    pub theta: PotentialParams,
    pub trace: Vec<TraceRow>,
    pub status: TrainStatus,
}

pub enum TrainEvent<'a> {
    Row(&'a TraceRow),
    PhaseEnd { phase: Phase, theta: &'a PotentialParams },
}

enum Optimizer {
    Dense(BfgsState),
    Limited(LbfgsState),
    Adam(AdamState),
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Bfgs => Optimizer::Dense(BfgsState::new(n)),
            OptimizerKind::Lbfgs { memory } => Optimizer::Limited(LbfgsState::new(memory)),
            OptimizerKind::Adam(p) => Optimizer::Adam(AdamState::new(n, p)),
        }
    }

    fn reset(&mut self) {
        match self {
            Optimizer::Dense(s) => s.reset(),
            Optimizer::Limited(s) => s.reset(),
            Optimizer::Adam(_) => {}
        }
    }
}

/// Seed of the `k`-th training batch.
pub fn train_batch_seed(root: u64, k: usize) -> u64 {
    substream_seed(root, &format!("train-batch-{k}"))
}

pub fn validation_batch(prob: &ProblemSpec, n_val: usize, root: u64) -> Result<SampleBatch> {
    draw_batch(prob, n_val, substream_seed(root, "validation"), Purpose::Validation)
}

/// Initializes θ from the `init` substream of `seed` and trains it.
pub fn saa_train(
    prob: &ProblemSpec,
    arch: Architecture,
    cfg: &IntegratorConfig,
    schedule: &TrainSchedule,
    seed: u64,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<TrainResult> {
    schedule.validate()?;
    let theta0 = init_params(arch, schedule.init, &mut substream(seed, "init"))?;
    train_from(theta0, prob, cfg, schedule, seed, observer)
}

/// Training from a given θ.
pub fn train_from(
    theta0: PotentialParams,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
    schedule: &TrainSchedule,
    seed: u64,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<TrainResult> {
    schedule.validate()?;
    cfg.validate()?;
    if theta0.arch().d != prob.d {
        return Err(MfgError::Shape("network and problem dimensions differ".into()));
    }
    let arch = *theta0.arch();
    let start = Instant::now();
    let val_batch = validation_batch(prob, schedule.n_val, seed)?;
    let to_params = |x: &[f64]| PotentialParams::from_flat(arch, x.to_vec());

    let mut x = theta0.as_flat().to_vec();
    let mut opt = Optimizer::new(schedule.optimizer, x.len());
    let mut trace = Vec::new();
    let mut iter = 0;
    let mut grad_evals = 0;
    let mut batch_count = 0;

    let initial = evaluate(&theta0, &val_batch, prob, cfg)?;
    let row = TraceRow {
        iter: 0,
        phase: Phase::Coarse,
        val: initial,
        c_hjb: initial.hjb(prob.alpha1, prob.alpha2),
        train_j: f64::NAN,
        grad_norm: f64::NAN,
        step: 0.0,
        wall_s: start.elapsed().as_secs_f64(),
        grad_evals,
        armijo_ok: true,
    };
    observer(TrainEvent::Row(&row));
    trace.push(row);

    let phases = [
        (Phase::Coarse, schedule.n_coarse, schedule.iters_coarse),
        (Phase::Fine, schedule.n_fine, schedule.iters_fine),
    ];
    for (phase, n, iters) in phases {
        let mut batch: Option<SampleBatch> = None;
        let mut current: Option<(f64, Vec<f64>)> = None;
        let mut since_resample = 0;
        let mut failures = 0;
        let mut stalled = false;
        for _ in 0..iters {
            if batch.is_none() || since_resample >= schedule.resample_every {
                batch = Some(draw_batch(prob, n, train_batch_seed(seed, batch_count), Purpose::Train)?);
                batch_count += 1;
                since_resample = 0;
                current = None;
            }
            let b = batch.as_ref().expect("batch drawn above");
            let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let th = to_params(x)?;
                let (loss, g) = grad_loss(&th, b, prob, cfg)?;
                if !(loss.total.is_finite() && g.iter().all(|v| v.is_finite())) {
                    return Err(MfgError::Diverged { iter });
                }
                Ok((loss.total, g))
            };
            let (f, g) = match current.take() {
                Some(c) => c,
                None => {
                    grad_evals += 1;
                    match objective(&x) {
                        Ok(c) => c,
                        Err(e) => {
                            return Ok(finish(&x, arch, trace, TrainStatus::Diverged { iter, reason: e.to_string() }));
                        }
                    }
                }
            };
            let gnorm = line_search::norm(&g);
            if gnorm <= schedule.g_tol {
                break;
            }

            let mut step = 0.0;
            let mut armijo_ok = true;
            match &mut opt {
                Optimizer::Adam(state) => {
                    step = state.step(&mut x, &g);
                }
                Optimizer::Dense(_) | Optimizer::Limited(_) => {
                    let mut dir = match &opt {
                        Optimizer::Dense(s) => s.direction(&g),
                        Optimizer::Limited(s) => s.direction(&g),
                        Optimizer::Adam(_) => unreachable!(),
                    };
                    let mut cache: Option<(Vec<f64>, f64, Vec<f64>)> = None;
                    let ls = armijo_search(
                        |xt| {
                            grad_evals += 1;
                            match objective(xt) {
                                Ok((v, gt)) => {
                                    cache = Some((xt.to_vec(), v, gt));
                                    v
                                }
                                Err(_) => f64::INFINITY,
                            }
                        },
                        &x,
                        f,
                        &g,
                        &mut dir,
                    );
                    match ls {
                        Ok(ls) if ls.alpha > 0.0 => {
                            failures = 0;
                            let (xn, fnew, gn) = cache.expect("accepted step was evaluated");
                            let slope = line_search::dot(&g, &dir);
                            armijo_ok = fnew <= f + line_search::ARMIJO_C * ls.alpha * slope;
                            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                            match &mut opt {
                                Optimizer::Dense(st) => {
                                    st.update(&s, &y);
                                    st.iter += 1;
                                }
                                Optimizer::Limited(st) => {
                                    st.update(&s, &y);
                                }
                                Optimizer::Adam(_) => unreachable!(),
                            }
                            step = ls.alpha;
                            x = xn;
                            current = Some((fnew, gn));
                        }
                        Ok(_) => {
                            current = Some((f, g.clone()));
                        }
                        Err(_) => {
                            failures += 1;
                            opt.reset();
                            // force a fresh sample on the next iteration
                            since_resample = schedule.resample_every;
                            if failures >= 2 {
                                stalled = true;
                            }
                        }
                    }
                }
            }
            since_resample += 1;
            iter += 1;

            let th = to_params(&x)?;
            let val = match evaluate(&th, &val_batch, prob, cfg) {
                Ok(v) => v,
                Err(e) => {
                    return Ok(finish(&x, arch, trace, TrainStatus::Diverged { iter, reason: e.to_string() }));
                }
            };
            let row = TraceRow {
                iter,
                phase,
                val,
                c_hjb: val.hjb(prob.alpha1, prob.alpha2),
                train_j: f,
                grad_norm: gnorm,
                step,
                wall_s: start.elapsed().as_secs_f64(),
                grad_evals,
                armijo_ok,
            };
            observer(TrainEvent::Row(&row));
            trace.push(row);
            if stalled {
                break;
            }
        }
        let th = to_params(&x)?;
        observer(TrainEvent::PhaseEnd { phase, theta: &th });
        if stalled {
            return Ok(finish(&x, arch, trace, TrainStatus::LineSearchStalled { phase, iter }));
        }
    }
    Ok(finish(&x, arch, trace, TrainStatus::Completed))
}

fn finish(x: &[f64], arch: Architecture, trace: Vec<TraceRow>, status: TrainStatus) -> TrainResult {
    TrainResult {
        theta: PotentialParams::from_flat(arch, x.to_vec()).expect("iterates stay finite"),
        trace,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schedule(optimizer: OptimizerKind) -> TrainSchedule {
        TrainSchedule {
            iters_coarse: 6,
            iters_fine: 4,
            n_coarse: 64,
            n_fine: 96,
            n_val: 64,
            resample_every: 5,
            optimizer,
            g_tol: 0.0,
            init: InitScales::default(),
        }
    }

    fn setup() -> (ProblemSpec, Architecture, IntegratorConfig) {
        let prob = ProblemSpec::ot_instance(2).unwrap();
        let cfg = IntegratorConfig::for_problem(&prob, 2).unwrap();
        (prob, Architecture::new(2, 8, 1, 1.0).unwrap(), cfg)
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (prob, arch, cfg) = setup();
        let mut sched = small_schedule(OptimizerKind::Bfgs);
        sched.iters_coarse = 0;
        sched.iters_fine = 0;
        let r = saa_train(&prob, arch, &cfg, &sched, 3, &mut |_| {}).unwrap();
        let init = init_params(arch, sched.init, &mut substream(3, "init")).unwrap();
        assert_eq!(r.theta, init);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.status, TrainStatus::Completed);
    }

    #[test]
    fn bfgs_training_decreases_and_is_reproducible() {
        let (prob, arch, cfg) = setup();
        let sched = small_schedule(OptimizerKind::Bfgs);
        let mut phases = Vec::new();
        let a = saa_train(&prob, arch, &cfg, &sched, 3, &mut |e| {
            if let TrainEvent::PhaseEnd { phase, .. } = e {
                phases.push(phase)
            }
        })
        .unwrap();
        assert_eq!(phases, vec![Phase::Coarse, Phase::Fine]);
        assert_eq!(a.trace.len(), 11);
        assert!(a.trace.iter().all(|r| r.armijo_ok));
        assert!(a.trace.last().unwrap().val.total < a.trace[0].val.total);
        // training loss is non-increasing between resamples
        for w in a.trace[1..].windows(2) {
            if w[1].iter % 5 != 1 && w[1].phase == w[0].phase {
                assert!(w[1].train_j <= w[0].train_j, "{} -> {}", w[0].train_j, w[1].train_j);
            }
        }
        let b = saa_train(&prob, arch, &cfg, &sched, 3, &mut |_| {}).unwrap();
        let strip = |t: &[TraceRow]| t.iter().map(|r| (r.val, r.train_j.to_bits(), r.step)).collect::<Vec<_>>();
        assert_eq!(strip(&a.trace), strip(&b.trace));
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn lbfgs_and_adam_run() {
        let (prob, arch, cfg) = setup();
        for opt in [OptimizerKind::Lbfgs { memory: 5 }, OptimizerKind::Adam(AdamParams::default())] {
            let r = saa_train(&prob, arch, &cfg, &small_schedule(opt), 3, &mut |_| {}).unwrap();
            assert_eq!(r.status, TrainStatus::Completed);
            assert_eq!(r.trace.len(), 11);
        }
    }

    #[test]
    fn paper_defaults() {
        let s = TrainSchedule::for_problem(ProblemKind::OptimalTransport, 2);
        assert_eq!((s.iters_coarse, s.iters_fine, s.n_fine, s.n_val, s.resample_every), (500, 500, 2304, 1024, 25));
        assert_eq!(default_n_fine(ProblemKind::CrowdMotion, 50), 9216);
        assert_eq!(default_n_fine(ProblemKind::OptimalTransport, 100), 36864);
        assert_eq!(TrainSchedule::for_problem(ProblemKind::OptimalTransport, 10).n_val, 4096);
    }

    #[test]
    fn trace_line_format() {
        let row = TraceRow {
            iter: 3,
            phase: Phase::Fine,
            val: LossBreakdown {
                total: 1.5,
                l: 1.0,
                f: 0.0,
                g: 0.5,
                c1: 0.0,
                c2: 0.0,
            },
            c_hjb: 0.0,
            train_j: 1.25,
            grad_norm: 2.0,
            step: 0.5,
            wall_s: 0.1,
            grad_evals: 4,
            armijo_ok: true,
        };
        let line = row.to_line();
        assert!(line.starts_with("3,fine,1.5000000000000000e0,1.5000000000000000e0,"));
        assert_eq!(line.split(',').count(), TraceRow::HEADER.split(',').count());
    }
}
