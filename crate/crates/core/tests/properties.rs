use std::time::Instant;

use proptest::prelude::*;

use mfgnet::fv_check::{advance_density, FvScheme, Grid, VelocityField, NEGATIVE_TOL};
use mfgnet::nn_potential::{evaluate, forward, gradient, laplacian, Architecture, EvalWorkspace, PotentialParams};
use mfgnet::objective::{draw_batch, evaluate as loss, Purpose, SampleBatch};
use mfgnet::problems::{GaussianComponent, GaussianMixture, ProblemSpec};
use mfgnet::trajectories::IntegratorConfig;

fn params_from(arch: Architecture, values: &[f64]) -> PotentialParams {
    let n = arch.param_count();
    let data: Vec<f64> = (0..n).map(|k| values[k % values.len()] * (1.0 + (k % 7) as f64 * 0.1)).collect();
    PotentialParams::from_flat(arch, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_text_round_trip(d in 1usize..5, width in 1usize..6, depth in 0usize..3,
                                  values in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let arch = Architecture::new(d, width, depth, 0.7).unwrap();
        let p = params_from(arch, &values);
        let back = PotentialParams::from_text(&p.to_text("seed=1")).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn without_network_output_the_potential_is_quadratic(d in 1usize..5,
                                                         values in prop::collection::vec(-2.0f64..2.0, 1..30),
                                                         s in prop::collection::vec(-3.0f64..3.0, 6)) {
        let arch = Architecture::new(d, 4, 1, 1.0).unwrap();
        let mut p = params_from(arch, &values);
        p.w_mut().fill(0.0);
        let s = &s[..=d];
        let n = d + 1;
        let a = p.a();
        let quad: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| s[i] * a[i * n + j] * s[j]).sum();
        let lin: f64 = p.c().iter().zip(s).map(|(c, x)| c * x).sum();
        let mut ws = EvalWorkspace::new(&arch);
        let phi = forward(s, &p, &mut ws).unwrap();
        let expect = quad + lin + p.b();
        prop_assert!((phi - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_differences(d in 1usize..4, depth in 0usize..3,
                                    values in prop::collection::vec(-0.8f64..0.8, 5..40),
                                    s in prop::collection::vec(-2.0f64..2.0, 4)) {
        let arch = Architecture::new(d, 5, depth, 0.5).unwrap();
        let p = params_from(arch, &values);
        let s = &s[..=d];
        let mut ws = EvalWorkspace::new(&arch);
        let g = gradient(s, &p, &mut ws).unwrap();
        let h = 1e-6;
        for i in 0..=d {
            let mut a = s.to_vec();
            a[i] += h;
            let mut b = s.to_vec();
            b[i] -= h;
            let fd = (forward(&a, &p, &mut ws).unwrap() - forward(&b, &p, &mut ws).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0), "component {}: {} vs {}", i, fd, g[i]);
        }
        let all = evaluate(s, &p, &mut ws).unwrap();
        prop_assert_eq!(all.laplacian, laplacian(s, &p, &mut ws).unwrap());
    }

    #[test]
    fn mixture_log_pdf_is_log_of_pdf(x in prop::collection::vec(-4.0f64..4.0, 2),
                                     m in prop::collection::vec(-3.0f64..3.0, 4),
                                     w in 0.05f64..0.95) {
        let mix = GaussianMixture::new(vec![
            GaussianComponent { weight: w, mean: m[..2].to_vec(), var: vec![0.3, 0.7] },
            GaussianComponent { weight: 1.0 - w, mean: m[2..].to_vec(), var: vec![1.1, 0.4] },
        ]).unwrap();
        let lp = mix.log_pdf(&x);
        prop_assert!((lp.exp() - mix.pdf(&x)).abs() <= 1e-12 * mix.pdf(&x).max(1e-300));
    }

    #[test]
    fn fv_mass_and_positivity(ax in -2.0f64..2.0, bx in -2.0f64..2.0, ay in -2.0f64..2.0, by in -2.0f64..2.0,
                              cx in -2.0f64..2.0, cy in -2.0f64..2.0, muscl in any::<bool>()) {
        let g = Grid::new(32, -4.0, 4.0).unwrap();
        let blob = GaussianMixture::isotropic(vec![cx, cy], 0.4).unwrap();
        let rho0 = g.sample(|x| blob.pdf(x));
        let vx = g.sample(|x| ax * x[1] + bx);
        let vy = g.sample(|x| ay * x[0] + by);
        let v = VelocityField::stationary(g, 1.0, 8, vx, vy);
        let scheme = if muscl { FvScheme::Muscl } else { FvScheme::Upwind };
        let h = advance_density(&rho0, &v, scheme, 0.5, 1000).unwrap();
        prop_assert!(h.mass_drift <= 1e-10);
        prop_assert!(h.min_density >= NEGATIVE_TOL);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn objective_ignores_sample_order(seed in 0u64..1000, rot in 1usize..15) {
        let prob = ProblemSpec::crowd_instance(2).unwrap();
        let cfg = IntegratorConfig::for_problem(&prob, 2).unwrap();
        let arch = Architecture::new(2, 4, 1, 1.0).unwrap();
        let theta = params_from(arch, &[0.3, -0.2, 0.1, 0.05]);
        let batch = draw_batch(&prob, 16, seed, Purpose::Train).unwrap();
        let n = batch.len();
        let order: Vec<usize> = (0..n).map(|k| (k + rot) % n).collect();
        let points: Vec<f64> = order.iter().flat_map(|&k| batch.point(k).to_vec()).collect();
        let weights = order.iter().map(|&k| batch.weights[k]).collect();
        let ids = order.iter().map(|&k| batch.ids[k]).collect();
        let shuffled = SampleBatch::new(2, points, weights, ids, batch.seed, batch.purpose).unwrap();
        let a = loss(&theta, &batch, &prob, &cfg).unwrap();
        let b = loss(&theta, &shuffled, &prob, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Evaluation cost grows at most linearly in d for fixed width and depth.
#[test]
fn evaluation_cost_is_near_linear_in_d() {
    let time = |d: usize| {
        let arch = Architecture::new(d, 16, 1, 1.0).unwrap();
        let p = params_from(arch, &[0.1, -0.05, 0.2]);
        let mut ws = EvalWorkspace::new(&arch);
        let s: Vec<f64> = (0..=d).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let t = Instant::now();
            for _ in 0..200 {
                std::hint::black_box(evaluate(&s, &p, &mut ws).unwrap());
            }
            best = best.min(t.elapsed().as_secs_f64());
        }
        best
    };
    let ratio = time(64) / time(8);
    assert!(ratio < 12.0, "d=64 vs d=8 cost ratio {ratio:.2}");
}
