//! Eulerian re-evaluation of a trained d=2 model: sample the velocity
//! −∇ₓΦ/λ_L on a space-time grid, transport ρ₀ with a conservative
//! finite-volume scheme and recompute L, F and G on the grid.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::nn_potential::{gradient, EvalWorkspace, PotentialParams};
use crate::objective::LossBreakdown;
use crate::problems::ProblemSpec;

/// Uniform cell-centred grid on the square [lo, hi]².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Grid {
    pub fn new(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 3 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(MfgError::Config(format!("invalid grid: n={n}, box [{lo}, {hi}]")));
        }
        Ok(Grid { n, lo, hi })
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.dx()
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// Index of cell (i along x₁, j along x₂), row-major in j.
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    /// Point values of `f` at the cell centres.
    pub fn sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<f64> {
        let mut out = vec![0.0; self.cells()];
        for j in 0..self.n {
            for i in 0..self.n {
                out[self.idx(i, j)] = f(&[self.center(i), self.center(j)]);
            }
        }
        out
    }

    pub fn mass(&self, rho: &[f64]) -> f64 {
        rho.iter().sum::<f64>() * self.dx() * self.dx()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FvScheme {
    /// First-order donor cell.
    Upwind,
    /// Minmod-limited linear reconstruction with two-stage SSP Runge-Kutta.
    Muscl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FvConfig {
    pub grid: Grid,
    /// Velocity time slices on [0, T] (slices = n_time + 1).
    pub n_time: usize,
    pub scheme: FvScheme,
    /// Bound on Δt(|v₁| + |v₂|)/Δx.
    pub cfl: f64,
    /// Upper bound on substeps per slice interval.
    pub max_substeps: usize,
}

impl Default for FvConfig {
    fn default() -> Self {
        FvConfig {
            grid: Grid {
                n: 128,
                lo: -6.0,
                hi: 6.0,
            },
            n_time: 256,
            scheme: FvScheme::Muscl,
            cfl: 0.5,
            max_substeps: 4096,
        }
    }
}

impl FvConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.grid.n, self.grid.lo, self.grid.hi)?;
        if self.n_time == 0 || self.max_substeps == 0 {
            return Err(MfgError::Config("fv time steps must be >= 1".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(MfgError::Config("fv CFL number must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Cell-centre velocities at equally spaced times; linear in time between.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub grid: Grid,
    pub horizon: f64,
    pub vx: Vec<Vec<f64>>,
    pub vy: Vec<Vec<f64>>,
}

impl VelocityField {
    /// The same velocity at every time.
    pub fn stationary(grid: Grid, horizon: f64, n_time: usize, vx: Vec<f64>, vy: Vec<f64>) -> Self {
        VelocityField {
            grid,
            horizon,
            vx: vec![vx; n_time + 1],
            vy: vec![vy; n_time + 1],
        }
    }

    pub fn n_time(&self) -> usize {
        self.vx.len() - 1
    }

    pub fn slice_dt(&self) -> f64 {
        self.horizon / self.n_time() as f64
    }

    /// Velocities at time t into the output buffers.
    fn at(&self, t: f64, vx: &mut [f64], vy: &mut [f64]) {
        let s = (t / self.slice_dt()).clamp(0.0, self.n_time() as f64);
        let k = (s.floor() as usize).min(self.n_time() - 1);
        let w = s - k as f64;
        for c in 0..vx.len() {
            vx[c] = (1.0 - w) * self.vx[k][c] + w * self.vx[k + 1][c];
            vy[c] = (1.0 - w) * self.vy[k][c] + w * self.vy[k + 1][c];
        }
    }
}

/// v = −∇ₓΦ/λ_L at every cell centre and time slice.
pub fn sample_velocity(
    theta: &PotentialParams,
    grid: Grid,
    n_time: usize,
    horizon: f64,
    lambda_l: f64,
) -> Result<VelocityField> {
    if theta.arch().d != 2 {
        return Err(MfgError::Unsupported(format!(
            "finite-volume check needs d=2, network has d={}",
            theta.arch().d
        )));
    }
    if n_time == 0 {
        return Err(MfgError::Config("n_time must be >= 1".into()));
    }
    let slices: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..=n_time)
        .into_par_iter()
        .map_init(
            || EvalWorkspace::new(theta.arch()),
            |ws, k| {
                let t = horizon * k as f64 / n_time as f64;
                let mut vx = vec![0.0; grid.cells()];
                let mut vy = vec![0.0; grid.cells()];
                for j in 0..grid.n {
                    for i in 0..grid.n {
                        let g = gradient(&[grid.center(i), grid.center(j), t], theta, ws)?;
                        vx[grid.idx(i, j)] = -g[0] / lambda_l;
                        vy[grid.idx(i, j)] = -g[1] / lambda_l;
                    }
                }
                Ok((vx, vy))
            },
        )
        .collect();
    let mut vx = Vec::with_capacity(n_time + 1);
    let mut vy = Vec::with_capacity(n_time + 1);
    for s in slices {
        let (a, b) = s?;
        vx.push(a);
        vy.push(b);
    }
    Ok(VelocityField {
        grid,
        horizon,
        vx,
        vy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistory {
    pub grid: Grid,
    /// Densities at the velocity slice times.
    pub rho: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    /// Largest |mass in box + escaped − initial mass| / initial mass.
    pub mass_drift: f64,
    /// Smallest density seen after any substep.
    pub min_density: f64,
    /// Mass that left through the boundary.
    pub escaped: f64,
    pub substeps: usize,
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Net outflow rate per cell, −∂ₜρ·Δx, for one direction. `get(k)` reads
/// density k along the line, `vel(k)` the velocity; faces use the average of
/// the two adjacent cell velocities. Returns the boundary outflow rate.
fn line_fluxes(n: usize, rho: &dyn Fn(usize) -> f64, vel: &dyn Fn(usize) -> f64, scheme: FvScheme, out: &mut dyn FnMut(usize, f64)) -> f64 {
    let slope = |k: usize| -> f64 {
        match scheme {
            FvScheme::Upwind => 0.0,
            FvScheme::Muscl => {
                let left = if k == 0 { 0.0 } else { rho(k - 1) };
                let right = if k + 1 == n { 0.0 } else { rho(k + 1) };
                minmod(rho(k) - left, right - rho(k))
            }
        }
    };
    let mut boundary = 0.0;
    // left boundary face: outflow only
    let u0 = vel(0);
    if u0 < 0.0 {
        let f = u0 * (rho(0) - 0.5 * slope(0));
        out(0, -f);
        boundary -= f;
    }
    for k in 0..n - 1 {
        let u = 0.5 * (vel(k) + vel(k + 1));
        let f = if u >= 0.0 {
            u * (rho(k) + 0.5 * slope(k))
        } else {
            u * (rho(k + 1) - 0.5 * slope(k + 1))
        };
        out(k, f);
        out(k + 1, -f);
    }
    let un = vel(n - 1);
    if un > 0.0 {
        let f = un * (rho(n - 1) + 0.5 * slope(n - 1));
        out(n - 1, f);
        boundary += f;
    }
    boundary
}

/// dρ/dt into `rate`; returns the boundary outflow rate (mass per time).
fn rate(grid: &Grid, rho: &[f64], vx: &[f64], vy: &[f64], scheme: FvScheme, rate: &mut [f64]) -> f64 {
    let n = grid.n;
    let dx = grid.dx();
    rate.fill(0.0);
    let mut outflow = 0.0;
    for j in 0..n {
        let row = j * n;
        outflow += line_fluxes(
            n,
            &|k| rho[row + k],
            &|k| vx[row + k],
            scheme,
            &mut |k, f| rate[row + k] -= f / dx,
        );
    }
    for i in 0..n {
        outflow += line_fluxes(
            n,
            &|k| rho[k * n + i],
            &|k| vy[k * n + i],
            scheme,
            &mut |k, f| rate[k * n + i] -= f / dx,
        );
    }
    outflow * dx
}

/// Transports `rho0` through `vel` from t=0 to T.
pub fn advance_density(rho0: &[f64], vel: &VelocityField, scheme: FvScheme, cfl: f64, max_substeps: usize) -> Result<DensityHistory> {
    let grid = vel.grid;
    if rho0.len() != grid.cells() {
        return Err(MfgError::Shape("initial density does not match the grid".into()));
    }
    let dx = grid.dx();
    let cells = grid.cells();
    let mass0 = grid.mass(rho0);
    let mut rho = rho0.to_vec();
    let mut hist = vec![rho.clone()];
    let mut times = vec![0.0];
    let mut escaped = 0.0;
    let mut drift: f64 = 0.0;
    let mut min_density = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut total_substeps = 0;
    let (mut vx, mut vy) = (vec![0.0; cells], vec![0.0; cells]);
    let (mut k1, mut k2) = (vec![0.0; cells], vec![0.0; cells]);
    let mut stage = vec![0.0; cells];
    let h = vel.slice_dt();

    for k in 0..vel.n_time() {
        // face speeds are averages of cell speeds, so the cell maximum bounds them
        let vmax = (0..cells)
            .map(|c| {
                vel.vx[k][c].abs().max(vel.vx[k + 1][c].abs()) + vel.vy[k][c].abs().max(vel.vy[k + 1][c].abs())
            })
            .fold(0.0, f64::max);
        let sub = ((h * vmax / (dx * cfl)).ceil() as usize).max(1);
        if sub > max_substeps {
            return Err(MfgError::Cfl(format!(
                "slice {k} needs {sub} substeps (max speed {vmax:.3e}), limit is {max_substeps}"
            )));
        }
        let dt = h / sub as f64;
        for s in 0..sub {
            let t = k as f64 * h + s as f64 * dt;
            vel.at(t, &mut vx, &mut vy);
            let out1 = rate(&grid, &rho, &vx, &vy, scheme, &mut k1);
            match scheme {
                FvScheme::Upwind => {
                    for c in 0..cells {
                        rho[c] += dt * k1[c];
                    }
                    escaped += dt * out1;
                }
                FvScheme::Muscl => {
                    for c in 0..cells {
                        stage[c] = rho[c] + dt * k1[c];
                    }
                    vel.at(t + dt, &mut vx, &mut vy);
                    let out2 = rate(&grid, &stage, &vx, &vy, scheme, &mut k2);
                    for c in 0..cells {
                        rho[c] = 0.5 * rho[c] + 0.5 * (stage[c] + dt * k2[c]);
                    }
                    escaped += 0.5 * dt * (out1 + out2);
                }
            }
            min_density = rho.iter().cloned().fold(min_density, f64::min);
            drift = drift.max(((grid.mass(&rho) + escaped) - mass0).abs() / mass0.max(f64::MIN_POSITIVE));
            total_substeps += 1;
        }
        hist.push(rho.clone());
        times.push(if k + 1 == vel.n_time() { vel.horizon } else { (k + 1) as f64 * h });
    }
    Ok(DensityHistory {
        grid,
        rho: hist,
        times,
        mass_drift: drift,
        min_density,
        escaped,
        substeps: total_substeps,
    })
}

/// Tolerance on negative densities from rounding.
pub const NEGATIVE_TOL: f64 = -1e-12;

/// L, F and G of the grid solution with trapezoidal time quadrature.
pub fn grid_objective(hist: &DensityHistory, vel: &VelocityField, prob: &ProblemSpec) -> Result<LossBreakdown> {
    if hist.min_density < NEGATIVE_TOL {
        return Err(MfgError::Domain(format!(
            "finite-volume density went negative ({:e})",
            hist.min_density
        )));
    }
    let grid = hist.grid;
    let area = grid.dx() * grid.dx();
    let q = grid.sample(|x| prob.preference_value(x));
    let log_rho1 = grid.sample(|x| prob.rho1.log_pdf(x));
    let nt = vel.n_time();
    let h = vel.slice_dt();
    let (mut l, mut f) = (0.0, 0.0);
    for k in 0..=nt {
        let w = if k == 0 || k == nt { 0.5 * h } else { h };
        let rho = &hist.rho[k];
        let mut lk = 0.0;
        let mut fk = 0.0;
        for c in 0..grid.cells() {
            let r = rho[c].max(0.0);
            let v2 = vel.vx[k][c].powi(2) + vel.vy[k][c].powi(2);
            lk += 0.5 * prob.lambda_l * v2 * r;
            if r > 0.0 {
                fk += prob.lambda_e * r * r.ln() + prob.lambda_p * q[c] * r;
            }
        }
        l += w * area * lk;
        f += w * area * fk;
    }
    let rho_t = &hist.rho[nt];
    let mut g = 0.0;
    for c in 0..grid.cells() {
        let r = rho_t[c];
        if r > 0.0 {
            g += r * (r.ln() - log_rho1[c]);
        }
    }
    g *= prob.lambda_kl * area;
    Ok(LossBreakdown {
        total: l + f + g,
        l,
        f,
        g,
        c1: 0.0,
        c2: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvReport {
    pub grid: LossBreakdown,
    pub mass0: f64,
    pub mass_drift: f64,
    pub min_density: f64,
    pub escaped: f64,
    pub substeps: usize,
}

/// End-to-end check: velocity sampling, transport and grid objective.
pub fn fv_check(theta: &PotentialParams, prob: &ProblemSpec, cfg: &FvConfig) -> Result<(FvReport, DensityHistory)> {
    cfg.validate()?;
    if prob.d != 2 {
        return Err(MfgError::Unsupported("finite-volume check needs d=2".into()));
    }
    let vel = sample_velocity(theta, cfg.grid, cfg.n_time, prob.horizon, prob.lambda_l)?;
    let rho0 = cfg.grid.sample(|x| prob.rho0.pdf(x));
    let hist = advance_density(&rho0, &vel, cfg.scheme, cfg.cfl, cfg.max_substeps)?;
    let loss = grid_objective(&hist, &vel, prob)?;
    Ok((
        FvReport {
            grid: loss,
            mass0: cfg.grid.mass(&rho0),
            mass_drift: hist.mass_drift,
            min_density: hist.min_density,
            escaped: hist.escaped,
            substeps: hist.substeps,
        },
        hist,
    ))
}

/// Header `nx ny a b t`, then one line of densities per grid row.
pub fn write_density<W: Write>(out: &mut W, grid: &Grid, rho: &[f64], t: f64) -> std::io::Result<()> {
    writeln!(out, "{} {} {:e} {:e} {:e}", grid.n, grid.n, grid.lo, grid.hi, t)?;
    for j in 0..grid.n {
        let row: Vec<String> = (0..grid.n).map(|i| format!("{:e}", rho[grid.idx(i, j)])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_potential::Architecture;
    use crate::problems::GaussianMixture;

    fn grid() -> Grid {
        Grid::new(64, -6.0, 6.0).unwrap()
    }

    fn blob(g: &Grid) -> Vec<f64> {
        let m = GaussianMixture::isotropic(vec![0.0, 0.0], 0.3).unwrap();
        g.sample(|x| m.pdf(x))
    }

    fn zero_params() -> PotentialParams {
        PotentialParams::zeros(Architecture::new(2, 4, 1, 1.0).unwrap()).unwrap()
    }

    fn center_of_mass(g: &Grid, rho: &[f64]) -> [f64; 2] {
        let m: f64 = rho.iter().sum();
        let mut c = [0.0; 2];
        for j in 0..g.n {
            for i in 0..g.n {
                let r = rho[g.idx(i, j)];
                c[0] += r * g.center(i);
                c[1] += r * g.center(j);
            }
        }
        [c[0] / m, c[1] / m]
    }

    #[test]
    fn sampled_velocities() {
        let g = grid();
        let v = sample_velocity(&zero_params(), g, 4, 1.0, 2.0).unwrap();
        assert!(v.vx.iter().chain(&v.vy).all(|s| s.iter().all(|&x| x == 0.0)));

        let mut lin = zero_params();
        lin.c_mut().copy_from_slice(&[2.0, 0.0, 0.0]);
        let v = sample_velocity(&lin, g, 4, 1.0, 2.0).unwrap();
        assert!(v.vx.iter().all(|s| s.iter().all(|&x| x == -1.0)));
        assert!(v.vy.iter().all(|s| s.iter().all(|&x| x == 0.0)));

        let mut quad = zero_params();
        quad.a_mut()[0] = 0.5;
        quad.a_mut()[4] = 0.5;
        let v = sample_velocity(&quad, g, 2, 1.0, 2.0).unwrap();
        for j in 0..g.n {
            for i in 0..g.n {
                let c = g.idx(i, j);
                assert!((v.vx[1][c] + 0.5 * g.center(i)).abs() < 1e-14);
                assert!((v.vy[1][c] + 0.5 * g.center(j)).abs() < 1e-14);
            }
        }

        let three = PotentialParams::zeros(Architecture::new(3, 4, 1, 1.0).unwrap()).unwrap();
        assert!(matches!(sample_velocity(&three, g, 2, 1.0, 2.0), Err(MfgError::Unsupported(_))));
    }

    #[test]
    fn zero_velocity_is_a_fixed_point() {
        let g = grid();
        let rho0 = blob(&g);
        let v = VelocityField::stationary(g, 1.0, 8, vec![0.0; g.cells()], vec![0.0; g.cells()]);
        for scheme in [FvScheme::Upwind, FvScheme::Muscl] {
            let h = advance_density(&rho0, &v, scheme, 0.5, 100).unwrap();
            assert!(h.rho.iter().all(|r| r == &rho0));
        }
    }

    #[test]
    fn uniform_translation() {
        let g = grid();
        let rho0 = blob(&g);
        let v = VelocityField::stationary(g, 1.0, 32, vec![-1.0; g.cells()], vec![0.0; g.cells()]);
        for scheme in [FvScheme::Upwind, FvScheme::Muscl] {
            let h = advance_density(&rho0, &v, scheme, 0.5, 100).unwrap();
            let c = center_of_mass(&g, h.rho.last().unwrap());
            assert!((c[0] + 1.0).abs() <= 2.0 * g.dx(), "{scheme:?}: {c:?}");
            assert!(c[1].abs() <= 2.0 * g.dx());
            assert!(h.mass_drift <= 1e-10);
            assert!(h.min_density >= NEGATIVE_TOL);
        }
    }

    #[test]
    fn uniform_velocity_transport_cost() {
        let g = grid();
        let prob = crate::problems::ProblemSpec::ot_instance(2).unwrap();
        let rho0 = blob(&g);
        let v = VelocityField::stationary(g, 1.0, 32, vec![-1.0; g.cells()], vec![0.5; g.cells()]);
        let h = advance_density(&rho0, &v, FvScheme::Muscl, 0.5, 100).unwrap();
        let loss = grid_objective(&h, &v, &prob).unwrap();
        let expect = 0.5 * prob.lambda_l * 1.25 * g.mass(&rho0);
        assert!((loss.l - expect).abs() <= 0.01 * expect, "{} vs {expect}", loss.l);
    }

    #[test]
    fn mass_and_positivity_under_rotation() {
        // rotating, shearing field with outflow through the boundary
        let g = grid();
        let rho0 = {
            let m = GaussianMixture::isotropic(vec![2.0, 1.0], 0.3).unwrap();
            g.sample(|x| m.pdf(x))
        };
        let vx = g.sample(|x| -2.0 * x[1] + 0.5 * x[0]);
        let vy = g.sample(|x| 2.0 * x[0]);
        let v = VelocityField::stationary(g, 1.0, 16, vx, vy);
        for scheme in [FvScheme::Upwind, FvScheme::Muscl] {
            let h = advance_density(&rho0, &v, scheme, 0.5, 1000).unwrap();
            assert!(h.mass_drift <= 1e-10, "{scheme:?}: {}", h.mass_drift);
            assert!(h.min_density >= NEGATIVE_TOL, "{scheme:?}: {}", h.min_density);
            assert!(h.escaped > 0.0);
        }
    }

    #[test]
    fn cfl_limit_is_enforced() {
        let g = grid();
        let v = VelocityField::stationary(g, 1.0, 1, vec![1e6; g.cells()], vec![0.0; g.cells()]);
        let r = advance_density(&blob(&g), &v, FvScheme::Upwind, 0.5, 10);
        assert!(matches!(r, Err(MfgError::Cfl(_))));
    }

    #[test]
    fn self_transport_with_zero_potential_costs_nothing() {
        let mut prob = crate::problems::ProblemSpec::ot_instance(2).unwrap();
        prob.rho1 = prob.rho0.clone();
        let cfg = FvConfig {
            grid: grid(),
            n_time: 8,
            ..FvConfig::default()
        };
        let (rep, _) = fv_check(&zero_params(), &prob, &cfg).unwrap();
        assert_eq!(rep.grid.l, 0.0);
        assert!(rep.grid.g.abs() < 1e-12);
        assert!((rep.mass0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn density_dump_layout() {
        let g = Grid::new(3, -1.0, 1.0).unwrap();
        let mut buf = Vec::new();
        write_density(&mut buf, &g, &[1.0; 9], 0.5).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "3 3 -1e0 1e0 5e-1");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(' ').count(), 3);
    }
}
