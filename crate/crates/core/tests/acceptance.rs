//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mfgnet::autodiff::grad_loss;
use mfgnet::cli::trajectory_study;
use mfgnet::fv_check::{advance_density, fv_check, FvConfig, FvScheme, Grid, VelocityField, NEGATIVE_TOL};
use mfgnet::nn_potential::{gradient, init_params, laplacian, Architecture, EvalWorkspace, InitScales, PotentialParams};
use mfgnet::objective::{draw_batch, evaluate, LossBreakdown, Purpose};
use mfgnet::optim::bfgs::is_spd;
use mfgnet::optim::{
    bfgs_minimize, saa_train, AdamParams, BfgsState, OptimizerKind, Phase, StopCriteria, TrainResult, TrainSchedule,
};
use mfgnet::problems::{GaussianMixture, ProblemSpec};
use mfgnet::trajectories::{integrate, log_det_check, IntegratorConfig};

const SEED: u64 = 1;

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn report(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stdout().flush();
        self.results.push((name.to_string(), pass));
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn random_theta(arch: Architecture, rng: &mut ChaCha8Rng) -> PotentialParams {
    let scales = InitScales {
        k_var: 0.25,
        bias_var: 0.25,
    };
    let mut p = init_params(arch, scales, rng).unwrap();
    let n = Normal::new(0.0, 0.3).unwrap();
    for v in p.w_mut() {
        *v += n.sample(rng);
    }
    for v in p.a_mut() {
        *v = 0.2 * n.sample(rng);
    }
    for v in p.c_mut() {
        *v = n.sample(rng);
    }
    p.set_b(n.sample(rng));
    p
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_correctness(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for crowd in [false, true] {
        for d in [2, 3] {
            for n_t in [1, 2, 4] {
                for _ in 0..2 {
                    let prob = if crowd {
                        ProblemSpec::crowd_instance(d).unwrap()
                    } else {
                        ProblemSpec::ot_instance(d).unwrap()
                    };
                    let cfg = IntegratorConfig::for_problem(&prob, n_t).unwrap();
                    let width = [4, 8][rng.random_range(0..2)];
                    let theta = random_theta(Architecture::new(d, width, 1, 1.0).unwrap(), &mut rng);
                    let batch = draw_batch(&prob, 12, rng.random(), Purpose::Train).unwrap();
                    let (_, g) = grad_loss(&theta, &batch, &prob, &cfg).unwrap();
                    let f = |p: &PotentialParams| evaluate(p, &batch, &prob, &cfg).unwrap().total;
                    let h = 1e-5;
                    let fd: Vec<f64> = (0..theta.len())
                        .map(|k| {
                            let mut p = theta.clone();
                            p.as_flat_mut()[k] += h;
                            let mut m = theta.clone();
                            m.as_flat_mut()[k] -= h;
                            (f(&p) - f(&m)) / (2.0 * h)
                        })
                        .collect();
                    let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
                    worst = worst.max(norm(&diff) / norm(&fd));
                    configs += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    s.report(
        "gradient correctness",
        configs >= 20 && worst <= 1e-5 && secs < 60.0,
        format!("{configs} configurations, worst relative error {worst:.2e} (tol 1e-5), {secs:.1} s"),
    );
}

fn exact_laplacian(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for draw in 0..50 {
        let d = 1 + draw % 5;
        let depth = 1 + draw % 3;
        let arch = Architecture::new(d, 8, depth, 0.5).unwrap();
        let theta = random_theta(arch, &mut rng);
        let mut ws = EvalWorkspace::new(&arch);
        let x: Vec<f64> = (0..=d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lap = laplacian(&x, &theta, &mut ws).unwrap();
        let h = 1e-4;
        let mut trace = 0.0;
        for i in 0..d {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            trace += (gradient(&p, &theta, &mut ws).unwrap()[i] - gradient(&m, &theta, &mut ws).unwrap()[i]) / (2.0 * h);
        }
        worst = worst.max((lap - trace).abs() / trace.abs());
    }
    s.report(
        "exact Laplacian",
        worst <= 1e-5,
        format!("50 draws, d <= 5, worst relative error {worst:.2e} (tol 1e-5)"),
    );
}

/// Smooth random θ: training initialization plus a random quadratic part.
fn smooth_theta(rng: &mut ChaCha8Rng) -> PotentialParams {
    let mut p = init_params(Architecture::new(2, 16, 1, 1.0).unwrap(), InitScales::default(), rng).unwrap();
    let n = Normal::new(0.0, 0.3).unwrap();
    for v in p.a_mut() {
        *v = 0.2 * n.sample(rng);
    }
    for v in p.c_mut() {
        *v = n.sample(rng);
    }
    p
}

fn worst_log_det_gap(theta: &PotentialParams, prob: &ProblemSpec, cfg: &IntegratorConfig, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = prob.rho0.sample(rng);
        let (l, logdet) = log_det_check(&x, theta, prob, cfg).map_err(|e| e.to_string())?;
        worst = worst.max((l - logdet).abs());
    }
    Ok(worst)
}

fn log_det_consistency(s: &mut Suite, trained: &PotentialParams) {
    let prob = ProblemSpec::ot_instance(2).unwrap();
    let cfg = IntegratorConfig::for_problem(&prob, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let theta = smooth_theta(&mut rng);
        match worst_log_det_gap(&theta, &prob, &cfg, &mut rng) {
            Ok(w) => worst = worst.max(w),
            Err(e) => {
                s.report("log-det consistency", false, e);
                return;
            }
        }
    }
    // trained fields are sharper; reported for reference, not gated
    let trained_gap = match worst_log_det_gap(trained, &prob, &cfg, &mut rng) {
        Ok(w) => format!("{w:.2e}"),
        Err(e) => e,
    };
    s.report(
        "log-det consistency",
        worst <= 1e-3,
        format!(
            "3 random smooth models, 20 points each, n_t=8, worst |l - log det| {worst:.2e} (tol 1e-3); trained d=2 OT model (not gated): {trained_gap}"
        ),
    );
}

fn rk4_order(s: &mut Suite) {
    let prob = ProblemSpec::ot_instance(2).unwrap();
    let lambda = prob.lambda_l;
    let t = prob.horizon;
    let mut theta = PotentialParams::zeros(Architecture::new(2, 4, 1, 1.0).unwrap()).unwrap();
    theta.a_mut()[0] = 0.5;
    theta.a_mut()[4] = 0.5;
    let x = [1.5, -2.0];
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let decay = (-t / lambda).exp();
    let exact_cl = r2 * (1.0 - (-2.0 * t / lambda).exp()) / 4.0;
    let mut errors = Vec::new();
    for n_t in [1, 2, 4, 8] {
        let cfg = IntegratorConfig::for_problem(&prob, n_t).unwrap();
        let st = integrate(&x, &theta, &prob, &cfg).unwrap();
        let ez = st.z.iter().zip(&x).map(|(z, x)| (z - x * decay).abs()).fold(0.0, f64::max);
        let el = (st.l + 2.0 * t / lambda).abs();
        errors.push(ez.max(el).max((st.c_l - exact_cl).abs()));
    }
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let observed = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    s.report(
        "RK4 order",
        observed >= 3.5,
        format!("errors [{}] at n_t = 1, 2, 4, 8; smallest observed order {observed:.2} (need >= 3.5)", shown.join(", ")),
    );
}

fn train(prob: &ProblemSpec, n_t: usize, sched: &TrainSchedule, label: &str) -> TrainResult {
    let start = Instant::now();
    let cfg = IntegratorConfig::for_problem(prob, n_t).unwrap();
    let arch = Architecture::new(prob.d, 16, 1, 1.0).unwrap();
    let r = saa_train(prob, arch, &cfg, sched, SEED, &mut |_| {}).unwrap();
    eprintln!("  trained {label} in {:.0} s ({:?})", start.elapsed().as_secs_f64(), r.status);
    r
}

fn final_val(r: &TrainResult) -> LossBreakdown {
    r.trace.last().unwrap().val
}

fn ot_reproduction(s: &mut Suite, r: &TrainResult) {
    let v = final_val(r);
    let (j, l, g) = (v.l + v.g, v.l, v.g);
    s.report(
        "d=2 OT reproduction",
        within(j, 10.72, 0.10) && within(l, 9.665, 0.10) && within(g, 1.059, 0.25),
        format!(
            "J = {j:.4} (10.72 +-10%), L = {l:.4} (9.665 +-10%), G = {g:.4} (1.059 +-25%), status {:?}",
            r.status
        ),
    );
}

fn crowd_reproduction(s: &mut Suite, r: &TrainResult) {
    let v = final_val(r);
    s.report(
        "d=2 crowd reproduction",
        within(v.mfg(), 18.78, 0.10) && within(v.f, 2.275, 0.15),
        format!(
            "J = {:.4} (18.78 +-10%), F = {:.4} (2.275 +-15%), L = {:.4}, G = {:.4}, status {:?}",
            v.mfg(),
            v.f,
            v.l,
            v.g,
            r.status
        ),
    );
}

fn ot10_reduced(s: &mut Suite) {
    let prob = ProblemSpec::ot_instance(10).unwrap();
    let mut sched = TrainSchedule::for_problem(prob.kind, 10);
    sched.iters_coarse = 250;
    sched.iters_fine = 250;
    let r = train(&prob, 2, &sched, "OT d=10");
    let v = final_val(&r);
    let j = v.l + v.g;
    s.report(
        "d=10 OT reduced budget",
        sched.n_fine == 6400 && within(j, 10.9, 0.20),
        format!("J = {j:.4} (10.9 +-20%), L = {:.4}, G = {:.4}, N = {}, status {:?}", v.l, v.g, sched.n_fine, r.status),
    );
}

fn fv_default() -> FvConfig {
    FvConfig::default()
}

fn ablation_and_inverse(s: &mut Suite, prob: &ProblemSpec, penalized: &TrainResult, ot_grid_j: f64) {
    let mut free = prob.clone();
    free.alpha1 = 0.0;
    free.alpha2 = 0.0;
    let sched = TrainSchedule::for_problem(prob.kind, 2);
    let r = train(&free, 2, &sched, "OT d=2 without HJB penalty");
    let (on, _, _) = trajectory_study(&penalized.theta, prob, 256, 8, SEED).unwrap();
    let (off, _, _) = trajectory_study(&r.theta, prob, 256, 8, SEED).unwrap();
    let off_grid = fv_check(&r.theta, prob, &fv_default()).map(|(rep, _)| rep.grid.mfg());
    let detail = format!(
        "median straightness defect {:.3e} with penalty (<= 0.05), {:.3e} without; grid J {:.4} with, {}",
        on.straightness_median,
        off.straightness_median,
        ot_grid_j,
        match &off_grid {
            Ok(j) => format!("{j:.4} without"),
            Err(e) => format!("without: {e}"),
        }
    );
    let pass = on.straightness_median <= 0.05
        && off.straightness_median > on.straightness_median
        && off_grid.map_or(false, |j| j > ot_grid_j);
    s.report("HJB-penalty ablation", pass, detail);
    s.report(
        "invertibility",
        on.roundtrip_median <= 0.05,
        format!(
            "256 paths with 8 steps: round-trip median {:.3e} (<= 0.05), max {:.3e}",
            on.roundtrip_median, on.roundtrip_max
        ),
    );
}

/// Grid and Lagrangian J for a trained d=2 model, plus FV diagnostics.
fn eulerian(prob: &ProblemSpec, r: &TrainResult) -> (f64, f64, f64, f64) {
    let (rep, _) = fv_check(&r.theta, prob, &fv_default()).unwrap();
    (rep.grid.mfg(), final_val(r).mfg(), rep.mass_drift, rep.min_density)
}

fn fv_properties(s: &mut Suite, trained: &[(f64, f64)]) {
    let g = Grid::new(64, -6.0, 6.0).unwrap();
    let blob = GaussianMixture::isotropic(vec![0.0, 0.0], 0.3).unwrap();
    let rho0 = g.sample(|x| blob.pdf(x));
    let v = VelocityField::stationary(g, 1.0, 32, vec![-1.0; g.cells()], vec![0.0; g.cells()]);
    let h = advance_density(&rho0, &v, FvScheme::Upwind, 0.5, 1000).unwrap();
    let rho = h.rho.last().unwrap();
    let m: f64 = rho.iter().sum();
    let cx = (0..g.n)
        .flat_map(|j| (0..g.n).map(move |i| (i, j)))
        .map(|(i, j)| rho[g.idx(i, j)] * g.center(i))
        .sum::<f64>()
        / m;
    let shift_err = (cx + 1.0).abs();

    let off = GaussianMixture::isotropic(vec![2.0, 1.0], 0.3).unwrap();
    let rho_r = g.sample(|x| off.pdf(x));
    let vx = g.sample(|x| -2.0 * x[1] + 0.5 * x[0]);
    let vy = g.sample(|x| 2.0 * x[0]);
    let rot = VelocityField::stationary(g, 1.0, 16, vx, vy);
    let mut drift = h.mass_drift;
    let mut min_rho = h.min_density;
    for scheme in [FvScheme::Upwind, FvScheme::Muscl] {
        let hr = advance_density(&rho_r, &rot, scheme, 0.5, 1000).unwrap();
        drift = drift.max(hr.mass_drift);
        min_rho = min_rho.min(hr.min_density);
    }
    for &(dr, mn) in trained {
        drift = drift.max(dr);
        min_rho = min_rho.min(mn);
    }
    s.report(
        "FV solver properties",
        drift <= 1e-10 && min_rho >= NEGATIVE_TOL && shift_err <= 2.0 * g.dx(),
        format!(
            "max relative mass drift {drift:.2e} (<= 1e-10), min density {min_rho:.2e} (>= -1e-12), translation error {shift_err:.3e} (<= 2dx = {:.3e})",
            2.0 * g.dx()
        ),
    );
}

fn optimizer_suite(s: &mut Suite) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            q[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    let xs: Vec<f64> = (0..n).map(|i| i as f64 - 3.5).collect();
    let quad = |x: &[f64]| {
        let e: Vec<f64> = x.iter().zip(&xs).map(|(a, b)| a - b).collect();
        let qe: Vec<f64> = (0..n).map(|i| dot(&q[i * n..(i + 1) * n], &e)).collect();
        (0.5 * dot(&e, &qe), qe)
    };
    let (xq, tq) = bfgs_minimize(
        quad,
        &vec![0.0; n],
        StopCriteria {
            max_iter: 3 * n,
            g_tol: 1e-8,
        },
    )
    .unwrap();
    let gq = norm(&quad(&xq).1);

    let rosen = |x: &[f64]| {
        let (a, b) = (x[0], x[1]);
        (
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2),
            vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)],
        )
    };
    let (xr, tr) = bfgs_minimize(
        rosen,
        &[-1.2, 1.0],
        StopCriteria {
            max_iter: 200,
            g_tol: 1e-10,
        },
    )
    .unwrap();
    let fr = rosen(&xr).0;
    let armijo = tq.iter().chain(&tr).all(|r| r.armijo_ok);

    // SPD preservation along a Rosenbrock-like run with the update applied by hand
    let mut st = BfgsState::new(2);
    let mut x = vec![-1.2, 1.0];
    let mut spd = true;
    for _ in 0..60 {
        let (f0, g0) = rosen(&x);
        let dir = st.direction(&g0);
        let mut alpha = 1.0;
        let mut xn: Vec<f64>;
        loop {
            xn = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            if rosen(&xn).0 <= f0 + 1e-4 * alpha * dot(&g0, &dir) || alpha < 1e-12 {
                break;
            }
            alpha *= 0.5;
        }
        let sv: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = rosen(&xn).1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        st.update(&sv, &yv);
        spd &= is_spd(st.h(), 2);
        x = xn;
    }

    s.report(
        "optimizer suite",
        gq <= 1e-8 && tq.len() <= 3 * n && fr <= 1e-8 && tr.len() <= 200 && spd && armijo,
        format!(
            "quadratic n={n}: |g| {gq:.1e} after {} iterations (<= {}); Rosenbrock f {fr:.1e} after {} iterations; H SPD {spd}; Armijo on every step {armijo}",
            tq.len(),
            3 * n,
            tr.len()
        ),
    );
}

fn adam_vs_bfgs(s: &mut Suite, prob: &ProblemSpec, bfgs: &TrainResult) {
    let coarse_evals = bfgs
        .trace
        .iter()
        .filter(|r| r.phase == Phase::Coarse)
        .map(|r| r.grad_evals)
        .max()
        .unwrap_or(0);
    let total_evals = bfgs.trace.last().unwrap().grad_evals;
    let mut sched = TrainSchedule::for_problem(prob.kind, 2);
    sched.optimizer = OptimizerKind::Adam(AdamParams::default());
    sched.iters_coarse = coarse_evals;
    sched.iters_fine = total_evals - coarse_evals;
    let adam = train(prob, 2, &sched, "OT d=2 with ADAM");
    let a = adam.trace.last().unwrap().c_hjb;
    let b = bfgs.trace.last().unwrap().c_hjb;
    s.report(
        "ADAM vs BFGS",
        a >= 0.9 * b,
        format!("final C_HJB: ADAM {a:.4e}, BFGS {b:.4e} after {total_evals} gradient evaluations each (ADAM >= 0.9 BFGS)"),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut s = Suite { results: Vec::new() };
    gradient_correctness(&mut s);
    exact_laplacian(&mut s);
    rk4_order(&mut s);
    optimizer_suite(&mut s);

    let ot = ProblemSpec::ot_instance(2).unwrap();
    let ot_run = train(&ot, 2, &TrainSchedule::for_problem(ot.kind, 2), "OT d=2");
    ot_reproduction(&mut s, &ot_run);
    log_det_consistency(&mut s, &ot_run.theta);
    let crowd = ProblemSpec::crowd_instance(2).unwrap();
    let crowd_run = train(&crowd, 4, &TrainSchedule::for_problem(crowd.kind, 2), "crowd d=2");
    crowd_reproduction(&mut s, &crowd_run);

    let (ot_grid, ot_lag, ot_drift, ot_min) = eulerian(&ot, &ot_run);
    let (cr_grid, cr_lag, cr_drift, cr_min) = eulerian(&crowd, &crowd_run);
    s.report(
        "Eulerian cross-check",
        within(ot_grid, ot_lag, 0.10) && within(cr_grid, cr_lag, 0.10),
        format!(
            "OT grid J {ot_grid:.4} vs {ot_lag:.4} (ratio {:.4}); crowd grid J {cr_grid:.4} vs {cr_lag:.4} (ratio {:.4}); tol 10%",
            ot_grid / ot_lag,
            cr_grid / cr_lag
        ),
    );
    fv_properties(&mut s, &[(ot_drift, ot_min), (cr_drift, cr_min)]);
    ablation_and_inverse(&mut s, &ot, &ot_run, ot_grid);
    adam_vs_bfgs(&mut s, &ot, &ot_run);
    ot10_reduced(&mut s);

    let failed: Vec<&str> = s.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s",
        s.results.len() - failed.len(),
        s.results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
