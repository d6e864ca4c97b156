//! Experiment runner: configuration, output files and the four subcommands.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MfgError, Result};
use crate::fv_check::{fv_check, write_density, FvConfig, FvScheme, Grid};
use crate::nn_potential::{Architecture, InitScales, PotentialParams};
use crate::objective::{evaluate, LossBreakdown};
use crate::optim::{
    default_n_fine, saa_train, validation_batch, AdamParams, OptimizerKind, TrainEvent, TrainSchedule, TrainStatus,
    TraceRow,
};
use crate::problems::{ProblemKind, ProblemSpec};
use crate::rng::substream;
use crate::trajectories::{
    integrate_backward_path, integrate_path, straightness_defect, write_paths, IntegratorConfig, TapedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemName {
    Ot,
    Crowd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Bfgs,
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Upwind,
    Muscl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub width: usize,
    pub depth: usize,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_t: usize,
    pub horizon: f64,
    pub lambda_l: f64,
    pub lambda_kl: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub n_val: usize,
    pub iters_coarse: usize,
    pub iters_fine: usize,
    pub resample_every: usize,
    pub optimizer: OptimizerName,
    pub lbfgs_memory: usize,
    pub adam_step: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub g_tol: f64,
    pub init_k_var: f64,
    pub init_bias_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvSection {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub n_time: usize,
    pub scheme: SchemeName,
    pub cfl: f64,
    pub max_substeps: usize,
    /// Density snapshots written besides t=0 and t=T.
    pub snapshots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub n_samples: usize,
    /// Integration steps for plotted paths; 0 means 4·n_t.
    pub n_t_plot: usize,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemName,
    pub d: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub network: NetworkSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub fv: FvSection,
    pub trajectories: TrajectorySection,
}

impl RunConfig {
    /// Defaults for a problem and dimension.
    pub fn defaults(problem: ProblemName, d: usize) -> Result<Self> {
        let base = match problem {
            ProblemName::Ot => ProblemSpec::ot_instance(d)?,
            ProblemName::Crowd => ProblemSpec::crowd_instance(d)?,
        };
        let n_t = match problem {
            ProblemName::Ot => 2,
            ProblemName::Crowd => 4,
        };
        let sched = TrainSchedule::for_problem(base.kind, d);
        let adam = AdamParams::default();
        let fv = FvConfig::default();
        Ok(RunConfig {
            problem,
            d,
            seed: 0,
            out: PathBuf::from("out"),
            network: NetworkSection {
                width: 16,
                depth: 1,
                h: 1.0,
            },
            model: ModelSection {
                n_t,
                horizon: base.horizon,
                lambda_l: base.lambda_l,
                lambda_kl: base.lambda_kl,
                lambda_e: base.lambda_e,
                lambda_p: base.lambda_p,
                alpha1: base.alpha1,
                alpha2: base.alpha2,
            },
            train: TrainSection {
                n_coarse: sched.n_coarse,
                n_fine: sched.n_fine,
                n_val: sched.n_val,
                iters_coarse: sched.iters_coarse,
                iters_fine: sched.iters_fine,
                resample_every: sched.resample_every,
                optimizer: OptimizerName::Bfgs,
                lbfgs_memory: 20,
                adam_step: adam.step,
                adam_beta1: adam.beta1,
                adam_beta2: adam.beta2,
                adam_eps: adam.eps,
                g_tol: sched.g_tol,
                init_k_var: sched.init.k_var,
                init_bias_var: sched.init.bias_var,
            },
            fv: FvSection {
                n: fv.grid.n,
                lo: fv.grid.lo,
                hi: fv.grid.hi,
                n_time: fv.n_time,
                scheme: match fv.scheme {
                    FvScheme::Upwind => SchemeName::Upwind,
                    FvScheme::Muscl => SchemeName::Muscl,
                },
                cfl: fv.cfl,
                max_substeps: fv.max_substeps,
                snapshots: 3,
            },
            trajectories: TrajectorySection {
                n_samples: 64,
                n_t_plot: 0,
            },
        })
    }

    /// Parses a TOML config. Keys left out take the defaults of the chosen
    /// problem and dimension; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| MfgError::Config(e.to_string()))?;
        let problem = match user.get("problem") {
            None => return Err(MfgError::Config("missing required field `problem`".into())),
            Some(v) => v
                .clone()
                .try_into::<ProblemName>()
                .map_err(|_| MfgError::Config(format!("field `problem`: expected \"ot\" or \"crowd\", got {v}")))?,
        };
        let d = match user.get("d") {
            None => 2,
            Some(v) => v
                .as_integer()
                .filter(|&d| d >= 2)
                .ok_or_else(|| MfgError::Config(format!("field `d`: expected an integer >= 2, got {v}")))?
                as usize,
        };
        let defaults = Self::defaults(problem, d)?;
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| MfgError::Config(e.to_string()))?;
        for (key, value) in user {
            match (merged.get_mut(&key), value) {
                (Some(toml::Value::Table(base)), toml::Value::Table(over)) => {
                    for (k, v) in over {
                        if !base.contains_key(&k) {
                            return Err(MfgError::Config(format!("unknown field `{key}.{k}`")));
                        }
                        base.insert(k, v);
                    }
                }
                (None, _) => return Err(MfgError::Config(format!("unknown field `{key}`"))),
                (Some(slot), v) => *slot = v,
            }
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| MfgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MfgError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            MfgError::Config(msg) => MfgError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.problem_spec()?;
        self.architecture()?;
        self.integrator()?;
        self.schedule()?.validate()?;
        self.fv_config()?.validate()?;
        Ok(())
    }

    /// Resolved config as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the echoed config.
    pub fn hash(&self) -> String {
        Sha256::digest(self.echo().as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Header line carried by every output file.
    pub fn header(&self) -> String {
        format!("seed={} config_hash={}", self.seed, self.hash())
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let mut p = match self.problem {
            ProblemName::Ot => ProblemSpec::ot_instance(self.d)?,
            ProblemName::Crowd => ProblemSpec::crowd_instance(self.d)?,
        };
        let m = &self.model;
        p.horizon = m.horizon;
        p.lambda_l = m.lambda_l;
        p.lambda_kl = m.lambda_kl;
        p.lambda_e = m.lambda_e;
        p.lambda_p = m.lambda_p;
        p.alpha1 = m.alpha1;
        p.alpha2 = m.alpha2;
        p.validate()?;
        Ok(p)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.d, self.network.width, self.network.depth, self.network.h)
    }

    pub fn integrator(&self) -> Result<IntegratorConfig> {
        IntegratorConfig::new(self.model.n_t, self.model.horizon, self.model.lambda_l)
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        let t = &self.train;
        let optimizer = match t.optimizer {
            OptimizerName::Bfgs => OptimizerKind::Bfgs,
            OptimizerName::Lbfgs => OptimizerKind::Lbfgs { memory: t.lbfgs_memory },
            OptimizerName::Adam => OptimizerKind::Adam(AdamParams {
                step: t.adam_step,
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
            }),
        };
        let kind = match self.problem {
            ProblemName::Ot => ProblemKind::OptimalTransport,
            ProblemName::Crowd => ProblemKind::CrowdMotion,
        };
        let mut s = TrainSchedule::for_problem(kind, self.d);
        s.n_coarse = t.n_coarse;
        s.n_fine = t.n_fine;
        s.n_val = t.n_val;
        s.iters_coarse = t.iters_coarse;
        s.iters_fine = t.iters_fine;
        s.resample_every = t.resample_every;
        s.optimizer = optimizer;
        s.g_tol = t.g_tol;
        s.init = InitScales {
            k_var: t.init_k_var,
            bias_var: t.init_bias_var,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn fv_config(&self) -> Result<FvConfig> {
        let f = &self.fv;
        let cfg = FvConfig {
            grid: Grid::new(f.n, f.lo, f.hi)?,
            n_time: f.n_time,
            scheme: match f.scheme {
                SchemeName::Upwind => FvScheme::Upwind,
                SchemeName::Muscl => FvScheme::Muscl,
            },
            cfl: f.cfl,
            max_substeps: f.max_substeps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_t_plot(&self) -> usize {
        if self.trajectories.n_t_plot == 0 {
            4 * self.model.n_t
        } else {
            self.trajectories.n_t_plot
        }
    }

    pub fn default_n_fine(&self) -> usize {
        match self.problem {
            ProblemName::Ot => default_n_fine(ProblemKind::OptimalTransport, self.d),
            ProblemName::Crowd => default_n_fine(ProblemKind::CrowdMotion, self.d),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| MfgError::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MfgError::io(path, e))
}

/// Appends a block to `summary.txt` in `dir`, starting the file with the
/// header line when it does not exist yet.
pub fn append_summary(cfg: &RunConfig, dir: &Path, block: &str) -> Result<()> {
    let path = dir.join("summary.txt");
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| MfgError::io(&path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&format!("# {}\n", cfg.header()));
    }
    text.push_str(block);
    if !block.ends_with('\n') {
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| MfgError::io(&path, e))
}

pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<PotentialParams> {
    let text = fs::read_to_string(path).map_err(|e| MfgError::io(path, e))?;
    let theta = PotentialParams::from_text(&text)?;
    if theta.arch().d != cfg.d {
        return Err(MfgError::Shape(format!(
            "checkpoint {} has d={}, config asks for d={}",
            path.display(),
            theta.arch().d,
            cfg.d
        )));
    }
    Ok(theta)
}

fn breakdown_block(title: &str, b: &LossBreakdown, prob: &ProblemSpec) -> String {
    format!(
        "[{title}]\nJ = {:.10e}\nJ_MFG = {:.10e}\nL = {:.10e}\nF = {:.10e}\nG = {:.10e}\nC1 = {:.10e}\nC2 = {:.10e}\nC_HJB = {:.10e}\n",
        b.total,
        b.mfg(),
        b.l,
        b.f,
        b.g,
        b.c1,
        b.c2,
        b.hjb(prob.alpha1, prob.alpha2)
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: PotentialParams,
    pub status: TrainStatus,
    pub final_row: TraceRow,
}

/// Trains and writes config echo, convergence log, checkpoints and summary
/// into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = &cfg.out;
    fs::create_dir_all(dir).map_err(|e| MfgError::io(dir, e))?;
    let header = cfg.header();
    write_file(&dir.join("config.toml"), &format!("# {header}\n{}", cfg.echo()))?;
    let prob = cfg.problem_spec()?;
    let integ = cfg.integrator()?;
    let sched = cfg.schedule()?;
    let log_path = dir.join("convergence.csv");
    let mut log = create(&log_path)?;
    writeln!(log, "# {header}\n{}", TraceRow::HEADER).map_err(|e| MfgError::io(&log_path, e))?;
    let mut io_err = None;
    let result = saa_train(&prob, cfg.architecture()?, &integ, &sched, cfg.seed, &mut |ev| {
        let r = match ev {
            TrainEvent::Row(row) => writeln!(log, "{}", row.to_line()).and_then(|_| log.flush()).map_err(|e| MfgError::io(&log_path, e)),
            TrainEvent::PhaseEnd { phase, theta } => {
                write_file(&dir.join(format!("theta_{phase}.txt")), &theta.to_text(&header))
            }
        };
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    write_file(&dir.join("theta.txt"), &result.theta.to_text(&header))?;
    let last = result.trace.last().cloned().expect("trace has the initial row");
    let per_iter = if last.iter > 0 {
        last.wall_s / last.iter as f64
    } else {
        0.0
    };
    let mut block = format!(
        "[train]\nstatus = {:?}\niterations = {}\ngradient_evaluations = {}\nwall_s = {:.3}\nwall_s_per_iter = {:.4}\n",
        result.status, last.iter, last.grad_evals, last.wall_s, per_iter
    );
    block.push_str(&breakdown_block("validation", &last.val, &prob));
    append_summary(cfg, dir, &block)?;
    Ok(TrainOutcome {
        theta: result.theta,
        status: result.status,
        final_row: last,
    })
}

/// Objective of `theta` on the validation batch.
pub fn cmd_evaluate(cfg: &RunConfig, theta: &PotentialParams) -> Result<LossBreakdown> {
    let prob = cfg.problem_spec()?;
    let batch = validation_batch(&prob, cfg.train.n_val, cfg.seed)?;
    evaluate(theta, &batch, &prob, &cfg.integrator()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    pub n_samples: usize,
    pub n_t_plot: usize,
    pub roundtrip_median: f64,
    pub roundtrip_max: f64,
    pub straightness_median: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Forward paths from fresh ρ₀ samples, backward paths from their endpoints.
pub fn trajectory_study(
    theta: &PotentialParams,
    prob: &ProblemSpec,
    n_samples: usize,
    n_t_plot: usize,
    seed: u64,
) -> Result<(TrajectoryStats, Vec<(usize, Vec<crate::trajectories::TrajectoryState>)>, Vec<Vec<Vec<f64>>>)> {
    if theta.arch().d != prob.d {
        return Err(MfgError::Shape("checkpoint and problem dimensions differ".into()));
    }
    let cfg = IntegratorConfig::for_problem(prob, n_t_plot)?;
    let mut rng = substream(seed, "trajectories");
    let mut tm = TapedModel::new(theta, prob)?;
    let mut forward = Vec::with_capacity(n_samples);
    let mut backward = Vec::with_capacity(n_samples);
    let mut errors = Vec::with_capacity(n_samples);
    let mut defects = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let x = prob.rho0.sample(&mut rng);
        let path = integrate_path(&mut tm, &x, k, prob, &cfg)?;
        let z_t = path.last().expect("non-empty path").z.clone();
        let back = integrate_backward_path(&mut tm, &z_t, k, prob, &cfg)?;
        let origin = back.last().expect("non-empty path");
        errors.push(origin.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        let positions: Vec<Vec<f64>> = path.iter().map(|s| s.z.clone()).collect();
        defects.push(straightness_defect(&positions));
        forward.push((k, path));
        backward.push(back);
    }
    let roundtrip_max = errors.iter().cloned().fold(0.0, f64::max);
    let stats = TrajectoryStats {
        n_samples,
        n_t_plot,
        roundtrip_median: median(&mut errors),
        roundtrip_max,
        straightness_median: median(&mut defects),
    };
    Ok((stats, forward, backward))
}

pub fn cmd_trajectories(cfg: &RunConfig, theta: &PotentialParams) -> Result<TrajectoryStats> {
    let dir = &cfg.out;
    fs::create_dir_all(dir).map_err(|e| MfgError::io(dir, e))?;
    let prob = cfg.problem_spec()?;
    let (stats, forward, backward) = trajectory_study(theta, &prob, cfg.trajectories.n_samples, cfg.n_t_plot(), cfg.seed)?;
    let header = cfg.header();

    let path = dir.join("forward.csv");
    let mut f = create(&path)?;
    writeln!(f, "# {header}")
        .and_then(|_| write_paths(&mut f, &forward))
        .and_then(|_| f.flush())
        .map_err(|e| MfgError::io(&path, e))?;

    let path = dir.join("backward.csv");
    let mut f = create(&path)?;
    let h = cfg.model.horizon / stats.n_t_plot as f64;
    let write_back = |f: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(f, "# {header}")?;
        let mut cols = String::from("sample_id,t");
        for i in 1..=cfg.d {
            cols.push_str(&format!(",z_{i}"));
        }
        writeln!(f, "{cols}")?;
        for (k, path) in backward.iter().enumerate() {
            for (j, z) in path.iter().enumerate() {
                write!(f, "{k},{:e}", cfg.model.horizon - j as f64 * h)?;
                for v in z {
                    write!(f, ",{v:e}")?;
                }
                writeln!(f)?;
            }
        }
        f.flush()
    };
    write_back(&mut f).map_err(|e| MfgError::io(&path, e))?;

    append_summary(
        cfg,
        dir,
        &format!(
            "[trajectories]\nn_samples = {}\nn_t_plot = {}\nroundtrip_median = {:.6e}\nroundtrip_max = {:.6e}\nstraightness_median = {:.6e}\n",
            stats.n_samples, stats.n_t_plot, stats.roundtrip_median, stats.roundtrip_max, stats.straightness_median
        ),
    )?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvComparison {
    pub grid: LossBreakdown,
    pub lagrangian: LossBreakdown,
    pub mass0: f64,
    pub mass_drift: f64,
    pub min_density: f64,
    pub escaped: f64,
}

impl FvComparison {
    /// Grid J over Lagrangian J_MFG.
    pub fn ratio(&self) -> f64 {
        self.grid.mfg() / self.lagrangian.mfg()
    }
}

/// g/l, or `n/a` when l is zero.
pub fn ratio_text(g: f64, l: f64) -> String {
    if l == 0.0 {
        "n/a".into()
    } else {
        format!("{:.6}", g / l)
    }
}

pub fn cmd_fv_check(cfg: &RunConfig, theta: &PotentialParams) -> Result<FvComparison> {
    let dir = &cfg.out;
    fs::create_dir_all(dir).map_err(|e| MfgError::io(dir, e))?;
    let prob = cfg.problem_spec()?;
    let fv_cfg = cfg.fv_config()?;
    let (rep, hist) = fv_check(theta, &prob, &fv_cfg)?;
    let lagrangian = cmd_evaluate(cfg, theta)?;
    let header = cfg.header();

    let n_time = hist.rho.len() - 1;
    let mut picks: Vec<usize> = (0..=cfg.fv.snapshots + 1).map(|k| k * n_time / (cfg.fv.snapshots + 1)).collect();
    picks.dedup();
    for k in picks {
        let path = dir.join(format!("density_{k:05}.txt"));
        let mut f = create(&path)?;
        writeln!(f, "# {header}")
            .and_then(|_| write_density(&mut f, &hist.grid, &hist.rho[k], hist.times[k]))
            .and_then(|_| f.flush())
            .map_err(|e| MfgError::io(&path, e))?;
    }

    let cmp = FvComparison {
        grid: rep.grid,
        lagrangian,
        mass0: rep.mass0,
        mass_drift: rep.mass_drift,
        min_density: rep.min_density,
        escaped: rep.escaped,
    };
    let mut block = String::from("[fv_check]\nterm,grid,lagrangian,ratio\n");
    for (name, g, l) in [
        ("J", cmp.grid.mfg(), cmp.lagrangian.mfg()),
        ("L", cmp.grid.l, cmp.lagrangian.l),
        ("F", cmp.grid.f, cmp.lagrangian.f),
        ("G", cmp.grid.g, cmp.lagrangian.g),
    ] {
        block.push_str(&format!("{name},{g:.10e},{l:.10e},{}\n", ratio_text(g, l)));
    }
    block.push_str(&format!(
        "mass0 = {:.12e}\nmass_drift = {:.3e}\nmin_density = {:.3e}\nescaped = {:.3e}\nsubsteps = {}\n",
        cmp.mass0, cmp.mass_drift, cmp.min_density, cmp.escaped, rep.substeps
    ));
    append_summary(cfg, dir, &block)?;
    Ok(cmp)
}
