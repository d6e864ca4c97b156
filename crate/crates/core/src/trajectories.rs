//! Characteristics of the potential flow with RK4: position z, log-determinant
//! l, and the accumulated costs c_L, c_F, c_1.
//!
//! Every integration is recorded on a [`Tape`], so training, validation and
//! diagnostics all evaluate θ through the same code. The state is packed as
//! one vector `y = (z, l, c_L, c_F, c_1)`.

use std::io::Write;

use crate::autodiff::potential::ParamVars;
use crate::autodiff::tape::{Tape, Unary, Var};
use crate::error::{MfgError, Result};
use crate::nn_potential::PotentialParams;
use crate::problems::{ProblemSpec, ProblemVars};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub z: Vec<f64>,
    pub l: f64,
    pub c_l: f64,
    pub c_f: f64,
    pub c_1: f64,
    pub t: f64,
}

impl TrajectoryState {
    pub fn initial(x: &[f64]) -> Self {
        TrajectoryState {
            z: x.to_vec(),
            l: 0.0,
            c_l: 0.0,
            c_f: 0.0,
            c_1: 0.0,
            t: 0.0,
        }
    }

    fn from_packed(y: &[f64], t: f64) -> Self {
        let d = y.len() - 4;
        TrajectoryState {
            z: y[..d].to_vec(),
            l: y[d],
            c_l: y[d + 1],
            c_f: y[d + 2],
            c_1: y[d + 3],
            t,
        }
    }

    pub(crate) fn packed_state(&self) -> Vec<f64> {
        let mut y = self.z.clone();
        y.extend_from_slice(&[self.l, self.c_l, self.c_f, self.c_1]);
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub n_t: usize,
    pub horizon: f64,
    pub lambda_l: f64,
}

impl IntegratorConfig {
    pub fn new(n_t: usize, horizon: f64, lambda_l: f64) -> Result<Self> {
        let cfg = IntegratorConfig {
            n_t,
            horizon,
            lambda_l,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Horizon and λ_L taken from the problem.
    pub fn for_problem(prob: &ProblemSpec, n_t: usize) -> Result<Self> {
        IntegratorConfig::new(n_t, prob.horizon, prob.lambda_l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(MfgError::Config("n_t must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(MfgError::Config("horizon T must be > 0".into()));
        }
        if !(self.lambda_l > 0.0 && self.lambda_l.is_finite()) {
            return Err(MfgError::Config("lambda_l must be > 0".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_t as f64
    }
}

/// A tape with θ and the problem's fields registered in its persistent prefix.
#[derive(Debug, Clone)]
pub struct TapedModel {
    pub tape: Tape,
    pub params: ParamVars,
    pub fields: ProblemVars,
}

impl TapedModel {
    pub fn new(theta: &PotentialParams, prob: &ProblemSpec) -> Result<Self> {
        if theta.arch().d != prob.d {
            return Err(MfgError::Shape(format!(
                "network dimension {} differs from problem dimension {}",
                theta.arch().d,
                prob.d
            )));
        }
        let mut tape = Tape::new();
        let params = ParamVars::register(&mut tape, theta);
        let fields = prob.register(&mut tape);
        tape.freeze();
        Ok(TapedModel {
            tape,
            params,
            fields,
        })
    }

    pub fn load(&mut self, theta: &PotentialParams) {
        self.params.load(&mut self.tape, theta);
    }
}

/// Per-sample quantities needed while recording a characteristic.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Origin {
    pub sample: usize,
    pub log_rho0: f64,
}

fn check_finite(tape: &Tape, vars: &[Var], origin: Origin, t: f64) -> Result<()> {
    for &v in vars {
        if tape.value(v).iter().any(|x| !x.is_finite()) {
            return Err(MfgError::Integration {
                sample: origin.sample,
                t,
                reason: "non-finite potential derivatives".into(),
            });
        }
    }
    Ok(())
}

/// Records dy/dt at (y, t).
pub(crate) fn record_rhs(
    tm: &mut TapedModel,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
    y: Var,
    t: f64,
    origin: Origin,
) -> Result<Var> {
    let d = prob.d;
    let inv = 1.0 / cfg.lambda_l;
    let TapedModel {
        tape,
        params,
        fields,
    } = tm;
    let z = tape.slice(y, 0, d);
    let l = tape.slice(y, d, 1);
    let tv = tape.constant(t);
    let s = tape.concat(z, tv);
    let pot = params.record(tape, s);
    check_finite(tape, &[pot.grad_x, pot.dt, pot.laplacian], origin, t)?;

    let zdot = tape.scale(pot.grad_x, -inv);
    let ldot = tape.scale(pot.laplacian, -inv);
    let sq = tape.dot(pot.grad_x, pot.grad_x);
    let ham = tape.scale(sq, 0.5 * inv);
    let f_hat = prob.record_running_cost(tape, fields, z, l, origin.log_rho0);
    let cfdot = match f_hat {
        Some(v) => v,
        None => tape.constant(0.0),
    };
    // HJB residual ∂ₜΦ − H + F, with F = F̂ + λ_E
    let mut resid = tape.sub(pot.dt, ham);
    if let Some(f) = f_hat {
        let coupling = tape.affine(f, 1.0, prob.lambda_e);
        resid = tape.add(resid, coupling);
    }
    let c1dot = tape.map(resid, Unary::Abs);

    let a = tape.concat(zdot, ldot);
    let b = tape.concat(a, ham);
    let c = tape.concat(b, cfdot);
    Ok(tape.concat(c, c1dot))
}

/// Records n_t RK4 steps from `y0` at t=0; returns y(T). When `path` is
/// given, the state after every step (and the initial one) is appended.
pub(crate) fn record_integrate(
    tm: &mut TapedModel,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
    y0: Var,
    origin: Origin,
    mut path: Option<&mut Vec<TrajectoryState>>,
) -> Result<Var> {
    let dt = cfg.step();
    let mut y = y0;
    if let Some(p) = path.as_deref_mut() {
        p.push(TrajectoryState::from_packed(tm.tape.value(y), 0.0));
    }
    for k in 0..cfg.n_t {
        let t = k as f64 * dt;
        let k1 = record_rhs(tm, prob, cfg, y, t, origin)?;
        let y1 = tm.tape.axpy(y, k1, 0.5 * dt);
        let k2 = record_rhs(tm, prob, cfg, y1, t + 0.5 * dt, origin)?;
        let y2 = tm.tape.axpy(y, k2, 0.5 * dt);
        let k3 = record_rhs(tm, prob, cfg, y2, t + 0.5 * dt, origin)?;
        let y3 = tm.tape.axpy(y, k3, dt);
        let k4 = record_rhs(tm, prob, cfg, y3, t + dt, origin)?;
        let tape = &mut tm.tape;
        let k23 = tape.add(k2, k3);
        let s = tape.axpy(k1, k23, 2.0);
        let s = tape.add(s, k4);
        let y_prev = y;
        y = tape.axpy(y, s, dt / 6.0);
        let t_next = if k + 1 == cfg.n_t { cfg.horizon } else { (k + 1) as f64 * dt };
        if let Some(p) = path.as_deref_mut() {
            p.push(TrajectoryState::from_packed(tape.value(y), t_next));
        }
        debug_assert!({
            let (d, prev, next) = (prob.d, tape.value(y_prev), tape.value(y));
            next[d + 1] >= prev[d + 1] && next[d + 3] >= prev[d + 3]
        });
    }
    Ok(y)
}

/// dy/dt at `state` for a sample starting at `x_origin`.
pub fn rhs(
    state: &TrajectoryState,
    x_origin: &[f64],
    theta: &PotentialParams,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<TrajectoryState> {
    let mut tm = TapedModel::new(theta, prob)?;
    let origin = Origin {
        sample: 0,
        log_rho0: prob.rho0.log_pdf(x_origin),
    };
    let y = tm.tape.vector(&state.packed_state());
    let dy = record_rhs(&mut tm, prob, cfg, y, state.t, origin)?;
    Ok(TrajectoryState::from_packed(tm.tape.value(dy), state.t))
}

fn check_dim(x: &[f64], prob: &ProblemSpec) -> Result<()> {
    if x.len() != prob.d {
        return Err(MfgError::Shape(format!("point has dimension {}, expected {}", x.len(), prob.d)));
    }
    Ok(())
}

/// State at t=T of the characteristic starting at `x`.
pub fn integrate(
    x: &[f64],
    theta: &PotentialParams,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<TrajectoryState> {
    let mut tm = TapedModel::new(theta, prob)?;
    integrate_with(&mut tm, x, 0, prob, cfg)
}

/// [`integrate`] on an existing taped model.
pub fn integrate_with(
    tm: &mut TapedModel,
    x: &[f64],
    sample: usize,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<TrajectoryState> {
    check_dim(x, prob)?;
    cfg.validate()?;
    tm.tape.reset();
    let origin = Origin {
        sample,
        log_rho0: prob.rho0.log_pdf(x),
    };
    let y0 = tm.tape.vector(&TrajectoryState::initial(x).packed_state());
    let y = record_integrate(tm, prob, cfg, y0, origin, None)?;
    Ok(TrajectoryState::from_packed(tm.tape.value(y), cfg.horizon))
}

/// The n_t + 1 states of the characteristic starting at `x`.
pub fn integrate_path(
    tm: &mut TapedModel,
    x: &[f64],
    sample: usize,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<Vec<TrajectoryState>> {
    check_dim(x, prob)?;
    cfg.validate()?;
    tm.tape.reset();
    let origin = Origin {
        sample,
        log_rho0: prob.rho0.log_pdf(x),
    };
    let y0 = tm.tape.vector(&TrajectoryState::initial(x).packed_state());
    let mut path = Vec::with_capacity(cfg.n_t + 1);
    record_integrate(tm, prob, cfg, y0, origin, Some(&mut path))?;
    Ok(path)
}

/// −∇ₓΦ(z, t)/λ_L.
fn velocity(tm: &mut TapedModel, z: &[f64], t: f64, cfg: &IntegratorConfig, sample: usize) -> Result<Vec<f64>> {
    let tape = &mut tm.tape;
    tape.reset();
    let mut s = z.to_vec();
    s.push(t);
    let sv = tape.vector(&s);
    let pot = tm.params.record(tape, sv);
    let g = tape.value(pot.grad_x);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MfgError::Integration {
            sample,
            t,
            reason: "non-finite potential gradient".into(),
        });
    }
    Ok(g.iter().map(|v| -v / cfg.lambda_l).collect())
}

/// Positions along the characteristic integrated backward in time from
/// `z_t` at t=T; the first entry is z_t, the last the origin estimate.
pub fn integrate_backward_path(
    tm: &mut TapedModel,
    z_t: &[f64],
    sample: usize,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>> {
    check_dim(z_t, prob)?;
    cfg.validate()?;
    let h = -cfg.step();
    let mut z = z_t.to_vec();
    let mut path = vec![z.clone()];
    let shifted = |z: &[f64], k: &[f64], a: f64| -> Vec<f64> { z.iter().zip(k).map(|(p, q)| p + a * q).collect() };
    for k in 0..cfg.n_t {
        let t = cfg.horizon - k as f64 * cfg.step();
        let k1 = velocity(tm, &z, t, cfg, sample)?;
        let k2 = velocity(tm, &shifted(&z, &k1, 0.5 * h), t + 0.5 * h, cfg, sample)?;
        let k3 = velocity(tm, &shifted(&z, &k2, 0.5 * h), t + 0.5 * h, cfg, sample)?;
        let k4 = velocity(tm, &shifted(&z, &k3, h), t + h, cfg, sample)?;
        for i in 0..z.len() {
            z[i] += h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
        path.push(z.clone());
    }
    Ok(path)
}

/// Origin estimate from integrating ż = −∇ₓΦ/λ_L from T back to 0.
pub fn integrate_backward(
    z_t: &[f64],
    theta: &PotentialParams,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let mut tm = TapedModel::new(theta, prob)?;
    let mut path = integrate_backward_path(&mut tm, z_t, 0, prob, cfg)?;
    Ok(path.pop().expect("path has at least one point"))
}

/// Determinant by LU with partial pivoting of a row-major n×n matrix.
pub fn determinant(mut a: Vec<f64>, n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("nonempty");
        if a[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for i in col + 1..n {
            let f = a[i * n + col] / p;
            for j in col..n {
                a[i * n + j] -= f * a[col * n + j];
            }
        }
    }
    det
}

/// Integrated l(x, T) next to log det ∇z(x, T) from a central-difference
/// Jacobian of the endpoint map.
pub fn log_det_check(
    x: &[f64],
    theta: &PotentialParams,
    prob: &ProblemSpec,
    cfg: &IntegratorConfig,
) -> Result<(f64, f64)> {
    let d = prob.d;
    if d > 4 {
        return Err(MfgError::Unsupported("log_det_check is limited to d <= 4".into()));
    }
    let mut tm = TapedModel::new(theta, prob)?;
    let l = integrate_with(&mut tm, x, 0, prob, cfg)?.l;
    let eps = 1e-5;
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += eps;
        xm[j] -= eps;
        let zp = integrate_with(&mut tm, &xp, 0, prob, cfg)?.z;
        let zm = integrate_with(&mut tm, &xm, 0, prob, cfg)?.z;
        for i in 0..d {
            jac[i * d + j] = (zp[i] - zm[i]) / (2.0 * eps);
        }
    }
    let det = determinant(jac, d);
    if !(det > 0.0) {
        return Err(MfgError::NonInvertible { det });
    }
    Ok((l, det.ln()))
}

/// Writes one row per state: sample_id, t, z_1..z_d, l, c_L, c_F, c_1.
pub fn write_paths<W: Write>(out: &mut W, paths: &[(usize, Vec<TrajectoryState>)]) -> std::io::Result<()> {
    let d = paths.first().and_then(|(_, p)| p.first()).map_or(0, |s| s.z.len());
    let mut header = String::from("sample_id,t");
    for i in 1..=d {
        header.push_str(&format!(",z_{i}"));
    }
    header.push_str(",l,c_L,c_F,c_1");
    writeln!(out, "{header}")?;
    for (id, path) in paths {
        for s in path {
            write!(out, "{id},{:e}", s.t)?;
            for v in &s.z {
                write!(out, ",{v:e}")?;
            }
            writeln!(out, ",{:e},{:e},{:e},{:e}", s.l, s.c_l, s.c_f, s.c_1)?;
        }
    }
    Ok(())
}

/// Largest interior distance of a path from its endpoint chord, divided by the
/// chord length; zero for paths with coincident endpoints.
pub fn straightness_defect(path: &[Vec<f64>]) -> f64 {
    let (first, last) = match (path.first(), path.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return 0.0,
    };
    let chord: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    let len2: f64 = chord.iter().map(|c| c * c).sum();
    if len2 == 0.0 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for p in &path[1..path.len().saturating_sub(1)] {
        let rel: Vec<f64> = p.iter().zip(first).map(|(p, a)| p - a).collect();
        let proj = rel.iter().zip(&chord).map(|(r, c)| r * c).sum::<f64>() / len2;
        let dist2: f64 = rel.iter().zip(&chord).map(|(r, c)| (r - proj * c).powi(2)).sum();
        worst = worst.max(dist2.sqrt());
    }
    worst / len2.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_potential::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_params(d: usize) -> PotentialParams {
        PotentialParams::zeros(Architecture::new(d, 8, 1, 1.0).unwrap()).unwrap()
    }

    /// Φ = cᵀs with spatial part p and time part c_t.
    fn linear_params(p: &[f64], ct: f64) -> PotentialParams {
        let mut th = zero_params(p.len());
        th.c_mut()[..p.len()].copy_from_slice(p);
        th.c_mut()[p.len()] = ct;
        th
    }

    /// Φ = ½‖x‖².
    fn quadratic_params(d: usize) -> PotentialParams {
        let mut th = zero_params(d);
        let n = d + 1;
        for i in 0..d {
            th.a_mut()[i * n + i] = 0.5;
        }
        th
    }

    fn random_params(d: usize, seed: u64, scale: f64) -> PotentialParams {
        let arch = Architecture::new(d, 8, 1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..arch.param_count()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        PotentialParams::from_flat(arch, data).unwrap()
    }

    fn ot(d: usize) -> ProblemSpec {
        ProblemSpec::ot_instance(d).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let prob = ot(2);
        let cfg = IntegratorConfig::new(2, 1.0, 2.0).unwrap();
        let st = TrajectoryState::initial(&[0.7, -1.1]);
        let r = rhs(&st, &[0.7, -1.1], &zero_params(2), &prob, &cfg).unwrap();
        assert_eq!(r.z, vec![0.0, 0.0]);
        assert_eq!((r.l, r.c_l, r.c_f, r.c_1), (0.0, 0.0, 0.0, 0.0));

        let r = rhs(&st, &[0.7, -1.1], &linear_params(&[2.0, 0.0], 1.0), &prob, &cfg).unwrap();
        assert_eq!(r.z, vec![-1.0, 0.0]);
        assert_eq!((r.l, r.c_l, r.c_1), (0.0, 1.0, 0.0));

        let st = TrajectoryState::initial(&[1.0, 0.0]);
        let r = rhs(&st, &[1.0, 0.0], &quadratic_params(2), &prob, &cfg).unwrap();
        assert!((r.z[0] + 0.5).abs() < 1e-15 && r.z[1].abs() < 1e-15);
        assert!((r.l + 1.0).abs() < 1e-15);
        assert!((r.c_l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn integrate_trivial_potentials() {
        let prob = ot(2);
        let cfg = IntegratorConfig::new(2, 1.0, 2.0).unwrap();
        let x = [0.3, 2.0];
        let end = integrate(&x, &zero_params(2), &prob, &cfg).unwrap();
        assert_eq!(end.z, x.to_vec());
        assert_eq!((end.l, end.c_l, end.c_f, end.c_1), (0.0, 0.0, 0.0, 0.0));

        let lin = linear_params(&[2.0, 0.0], 1.0);
        let end = integrate(&x, &lin, &prob, &cfg).unwrap();
        assert!((end.z[0] - (x[0] - 1.0)).abs() < 1e-15 && end.z[1] == x[1]);
        assert_eq!((end.l, end.c_l, end.c_1), (0.0, 1.0, 0.0));

        assert_eq!(integrate_backward(&x, &zero_params(2), &prob, &cfg).unwrap(), x.to_vec());
        let back = integrate_backward(&end.z, &lin, &prob, &cfg).unwrap();
        assert!((back[0] - x[0]).abs() < 1e-15 && back[1] == x[1]);
    }

    fn quadratic_error(n_t: usize) -> f64 {
        let prob = ot(2);
        let cfg = IntegratorConfig::new(n_t, 1.0, 2.0).unwrap();
        let end = integrate(&[1.0, 0.0], &quadratic_params(2), &prob, &cfg).unwrap();
        let z = (-0.5f64).exp();
        let cl = (1.0 - (-1.0f64).exp()) / 4.0;
        (end.z[0] - z).abs().max(end.z[1].abs()).max((end.l + 1.0).abs()).max((end.c_l - cl).abs())
    }

    #[test]
    fn quadratic_closed_form() {
        assert!(quadratic_error(16) <= 1e-5);
        let errs: Vec<f64> = [1, 2, 4, 8].iter().map(|&n| quadratic_error(n)).collect();
        for w in errs.windows(2) {
            assert!(w[0] / w[1] >= 11.0, "{errs:?}");
        }
    }

    #[test]
    fn accumulators_are_monotone_along_paths() {
        let prob = ProblemSpec::crowd_instance(2).unwrap();
        let theta = random_params(2, 4, 0.5);
        let cfg = IntegratorConfig::new(8, 1.0, 1.0).unwrap();
        let mut tm = TapedModel::new(&theta, &prob).unwrap();
        let path = integrate_path(&mut tm, &[0.2, 3.1], 0, &prob, &cfg).unwrap();
        assert_eq!(path.len(), 9);
        assert_eq!(path[8].t, 1.0);
        for w in path.windows(2) {
            assert!(w[1].c_l >= w[0].c_l && w[1].c_1 >= w[0].c_1);
        }
    }

    #[test]
    fn round_trip_error_shrinks_with_steps() {
        let prob = ot(2);
        let theta = random_params(2, 11, 0.6);
        let x = [1.5, -0.5];
        let errs: Vec<f64> = [2, 4, 8, 16]
            .iter()
            .map(|&n| {
                let cfg = IntegratorConfig::new(n, 1.0, 2.0).unwrap();
                let end = integrate(&x, &theta, &prob, &cfg).unwrap();
                let back = integrate_backward(&end.z, &theta, &prob, &cfg).unwrap();
                back.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }

    #[test]
    fn log_det_matches_fd_jacobian() {
        let prob = ot(2);
        let cfg = IntegratorConfig::new(8, 1.0, 2.0).unwrap();
        let (l, fd) = log_det_check(&[0.4, 0.1], &zero_params(2), &prob, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(fd.abs() < 1e-9);
        let (l, fd) = log_det_check(&[1.0, 0.0], &quadratic_params(2), &prob, &cfg).unwrap();
        assert!((l + 1.0).abs() < 1e-3 && (fd + 1.0).abs() < 1e-3);
        for seed in 0..5 {
            let theta = random_params(2, 100 + seed, 0.5);
            let (l, fd) = log_det_check(&[0.5, -1.0], &theta, &prob, &cfg).unwrap();
            assert!((l - fd).abs() <= 1e-3, "seed {seed}: {l} vs {fd}");
        }
    }

    #[test]
    fn determinant_small_matrices() {
        assert_eq!(determinant(vec![2.0], 1), 2.0);
        assert!((determinant(vec![0.0, 1.0, 1.0, 0.0], 2) + 1.0).abs() < 1e-15);
        let m = vec![2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0];
        assert!((determinant(m, 3) - 4.0).abs() < 1e-13);
    }

    #[test]
    fn straightness_of_lines_and_bends() {
        let line = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(straightness_defect(&line) < 1e-15);
        let bend = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        assert!((straightness_defect(&bend) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn path_dump_has_header_and_rows() {
        let prob = ot(2);
        let cfg = IntegratorConfig::new(2, 1.0, 2.0).unwrap();
        let mut tm = TapedModel::new(&zero_params(2), &prob).unwrap();
        let p = integrate_path(&mut tm, &[1.0, 2.0], 7, &prob, &cfg).unwrap();
        let mut buf = Vec::new();
        write_paths(&mut buf, &[(7, p)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,t,z_1,z_2,l,c_L,c_F,c_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("7,1e0,1e0,2e0"));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(IntegratorConfig::new(0, 1.0, 2.0).is_err());
        assert!(IntegratorConfig::new(2, 0.0, 2.0).is_err());
        assert!(IntegratorConfig::new(2, 1.0, -1.0).is_err());
        let prob = ot(2);
        let cfg = IntegratorConfig::new(2, 1.0, 2.0).unwrap();
        assert!(integrate(&[1.0, 2.0, 3.0], &zero_params(2), &prob, &cfg).is_err());
        assert!(integrate(&[1.0, 2.0], &zero_params(3), &prob, &cfg).is_err());
    }
}
