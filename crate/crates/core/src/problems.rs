//! Benchmark potential mean field games: dynamical optimal transport and
//! crowd motion. Densities are Gaussian mixtures with analytic log-pdfs so
//! that log ρ never goes through `ln(pdf)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::tape::{ScalarField, Tape, Unary, Var};
use crate::error::{MfgError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    /// log(weight) − ½ Σ log(2π var) per component.
    log_norm: Vec<f64>,
    cumulative: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(MfgError::Config("mixture needs at least one component".into()));
        }
        let d = components[0].mean.len();
        if d == 0 {
            return Err(MfgError::Config("mixture dimension must be >= 1".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &components {
            if c.mean.len() != d || c.var.len() != d {
                return Err(MfgError::Shape("mixture components differ in dimension".into()));
            }
            if !(c.weight >= 0.0) || c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(MfgError::Config("mixture weights must be >= 0 and variances > 0".into()));
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(MfgError::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        let log_norm = components
            .iter()
            .map(|c| c.weight.ln() - 0.5 * c.var.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>())
            .collect();
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        Ok(GaussianMixture {
            components,
            log_norm,
            cumulative,
        })
    }

    /// Single isotropic Gaussian N(mean, var·I).
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        GaussianMixture::new(vec![GaussianComponent {
            weight: 1.0,
            mean,
            var: vec![var; d],
        }])
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    fn component_log(&self, j: usize, x: &[f64]) -> f64 {
        let c = &self.components[j];
        let q: f64 = x
            .iter()
            .zip(&c.mean)
            .zip(&c.var)
            .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
            .sum();
        self.log_norm[j] - 0.5 * q
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        if self.components.len() == 1 {
            return self.component_log(0, x);
        }
        let logs: Vec<f64> = (0..self.components.len()).map(|j| self.component_log(j, x)).collect();
        log_sum_exp(&logs)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    /// ∇ log ρ(x) into `grad`; returns log ρ(x).
    pub fn log_pdf_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let logs: Vec<f64> = (0..self.components.len()).map(|j| self.component_log(j, x)).collect();
        let lse = log_sum_exp(&logs);
        grad.fill(0.0);
        for (j, c) in self.components.iter().enumerate() {
            let r = (logs[j] - lse).exp();
            if r == 0.0 {
                continue;
            }
            for ((g, (xi, mi)), vi) in grad.iter_mut().zip(x.iter().zip(&c.mean)).zip(&c.var) {
                *g -= r * (xi - mi) / vi;
            }
        }
        lse
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = Uniform::new(0.0, 1.0).expect("unit interval").sample(rng);
        let j = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.components.len() - 1);
        let c = &self.components[j];
        c.mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

struct LogDensity(GaussianMixture);

impl ScalarField for LogDensity {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.log_pdf(x)
    }
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.0.log_pdf_grad(x, grad)
    }
}

/// Preference field Q(x) = scale · ρ_G((x₁, x₂), mean, diag(var)); constant
/// in every coordinate past the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preference {
    pub scale: f64,
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl Preference {
    pub fn value(&self, x: &[f64]) -> f64 {
        let q = (0..2)
            .map(|i| (x[i] - self.mean[i]).powi(2) / self.var[i])
            .sum::<f64>();
        self.scale * (-0.5 * q).exp() / (2.0 * PI * (self.var[0] * self.var[1]).sqrt())
    }
}

impl ScalarField for Preference {
    fn value(&self, x: &[f64]) -> f64 {
        Preference::value(self, x)
    }
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let q = Preference::value(self, x);
        grad.fill(0.0);
        for i in 0..2 {
            grad[i] = -q * (x[i] - self.mean[i]) / self.var[i];
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    OptimalTransport,
    CrowdMotion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub d: usize,
    pub rho0: GaussianMixture,
    pub rho1: GaussianMixture,
    /// Transport-cost weight λ_L in L(v) = λ_L/2 ‖v‖².
    pub lambda_l: f64,
    pub lambda_kl: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub horizon: f64,
    pub preference: Option<Preference>,
}

impl ProblemSpec {
    /// Optimal transport from eight Gaussians on a circle of radius 4 in the
    /// (x₁, x₂) plane to N(0, 0.3 I).
    pub fn ot_instance(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(MfgError::Config("optimal transport instance needs d >= 2".into()));
        }
        let components = (1..=8)
            .map(|j| {
                let ang = 2.0 * PI * j as f64 / 8.0;
                let mut mean = vec![0.0; d];
                mean[0] = 4.0 * ang.cos();
                mean[1] = 4.0 * ang.sin();
                GaussianComponent {
                    weight: 1.0 / 8.0,
                    mean,
                    var: vec![0.3; d],
                }
            })
            .collect();
        let spec = ProblemSpec {
            kind: ProblemKind::OptimalTransport,
            d,
            rho0: GaussianMixture::new(components)?,
            rho1: GaussianMixture::isotropic(vec![0.0; d], 0.3)?,
            lambda_l: 2.0,
            lambda_kl: 5.0,
            lambda_e: 0.0,
            lambda_p: 0.0,
            alpha1: 3.0,
            alpha2: 3.0,
            horizon: 1.0,
            preference: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Crowd motion from N(3e₂, 0.3 I) to N(−3e₂, 0.3 I) around a preference
    /// bump Q(x) = 50 ρ_G((x₁,x₂), 0, diag(1, 0.5)).
    pub fn crowd_instance(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(MfgError::Config("crowd motion instance needs d >= 2".into()));
        }
        let mut m0 = vec![0.0; d];
        m0[1] = 3.0;
        let mut m1 = vec![0.0; d];
        m1[1] = -3.0;
        let spec = ProblemSpec {
            kind: ProblemKind::CrowdMotion,
            d,
            rho0: GaussianMixture::isotropic(m0, 0.3)?,
            rho1: GaussianMixture::isotropic(m1, 0.3)?,
            lambda_l: 1.0,
            lambda_kl: 5.0,
            lambda_e: 0.01,
            lambda_p: 1.0,
            alpha1: 10.0,
            alpha2: 1.0,
            horizon: 1.0,
            preference: Some(Preference {
                scale: 50.0,
                mean: [0.0, 0.0],
                var: [1.0, 0.5],
            }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho0.dim() != self.d || self.rho1.dim() != self.d {
            return Err(MfgError::Shape("density dimension differs from d".into()));
        }
        let coeffs = [
            ("lambda_kl", self.lambda_kl),
            ("lambda_e", self.lambda_e),
            ("lambda_p", self.lambda_p),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MfgError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda_l > 0.0 && self.lambda_l.is_finite()) {
            return Err(MfgError::Config("lambda_l must be > 0".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(MfgError::Config("horizon T must be > 0".into()));
        }
        if self.preference.is_some() && self.d < 2 {
            return Err(MfgError::Config("preference field needs d >= 2".into()));
        }
        if self.kind == ProblemKind::OptimalTransport && (self.lambda_e != 0.0 || self.lambda_p != 0.0) {
            return Err(MfgError::Config("optimal transport has no running cost".into()));
        }
        Ok(())
    }

    pub fn preference_value(&self, z: &[f64]) -> f64 {
        self.preference.map_or(0.0, |q| q.value(z))
    }

    /// Lagrangian running-cost integrand
    /// F̂ = λ_E (log ρ₀(x) − l) + λ_P Q(z).
    pub fn running_cost_f_hat(&self, z: &[f64], l: f64, x_origin: &[f64]) -> f64 {
        if self.lambda_e == 0.0 && self.lambda_p == 0.0 {
            return 0.0;
        }
        self.lambda_e * (self.rho0.log_pdf(x_origin) - l) + self.lambda_p * self.preference_value(z)
    }

    /// Mean-field coupling F(z, ρ) = λ_E (log ρ + 1) + λ_P Q(z).
    pub fn coupling_f(&self, z: &[f64], rho: f64) -> Result<f64> {
        if !(rho > 0.0) {
            return Err(MfgError::Domain(format!("density must be positive, got {rho}")));
        }
        Ok(self.lambda_e * (rho.ln() + 1.0) + self.lambda_p * self.preference_value(z))
    }

    /// Ĝ = λ_KL (log ρ₀(x) − l(x,T) − log ρ₁(z(x,T))).
    pub fn terminal_cost_g_hat(&self, x_origin: &[f64], z_t: &[f64], l_t: f64) -> f64 {
        self.lambda_kl * (self.rho0.log_pdf(x_origin) - l_t - self.rho1.log_pdf(z_t))
    }

    /// Terminal coupling G(z, ρ) = λ_KL (1 + log ρ − log ρ₁(z)).
    pub fn terminal_coupling_g(&self, z_t: &[f64], rho_at_t: f64) -> Result<f64> {
        if !(rho_at_t > 0.0) {
            return Err(MfgError::Domain(format!("density must be positive, got {rho_at_t}")));
        }
        Ok(self.lambda_kl * (1.0 + rho_at_t.ln() - self.rho1.log_pdf(z_t)))
    }

    /// Terminal HJB penalty C₂ = |Φ(z, T) − G(z, ρ)|.
    pub fn terminal_penalty(&self, phi_t: f64, z_t: &[f64], rho_at_t: f64) -> Result<f64> {
        Ok((phi_t - self.terminal_coupling_g(z_t, rho_at_t)?).abs())
    }

    /// Registers the fields the recorded cost terms need on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ProblemVars {
        let rho1 = tape.register_field(Arc::new(LogDensity(self.rho1.clone())));
        let preference = self
            .preference
            .filter(|_| self.lambda_p != 0.0)
            .map(|q| tape.register_field(Arc::new(q)));
        ProblemVars { rho1, preference }
    }

    fn record_coupling_core(
        &self,
        tape: &mut Tape,
        pv: &ProblemVars,
        z: Var,
        l: Var,
        log_rho0_x: f64,
        shift: f64,
    ) -> Option<Var> {
        if self.lambda_e == 0.0 && self.lambda_p == 0.0 {
            return None;
        }
        // λ_E (log ρ₀(x) − l + shift)
        let entropy = tape.affine(l, -self.lambda_e, self.lambda_e * (log_rho0_x + shift));
        Some(match pv.preference {
            Some(q) => {
                let qz = tape.field(z, q);
                tape.axpy(entropy, qz, self.lambda_p)
            }
            None => entropy,
        })
    }

    /// F̂ on the tape; `None` when it vanishes identically.
    pub fn record_running_cost(
        &self,
        tape: &mut Tape,
        pv: &ProblemVars,
        z: Var,
        l: Var,
        log_rho0_x: f64,
    ) -> Option<Var> {
        self.record_coupling_core(tape, pv, z, l, log_rho0_x, 0.0)
    }

    /// F(z, ρ₀(x)e^{−l}) on the tape; `None` when it vanishes identically.
    pub fn record_coupling(
        &self,
        tape: &mut Tape,
        pv: &ProblemVars,
        z: Var,
        l: Var,
        log_rho0_x: f64,
    ) -> Option<Var> {
        self.record_coupling_core(tape, pv, z, l, log_rho0_x, 1.0)
    }

    /// Returns (Ĝ, G) at the endpoint, sharing log ρ₁(z_T).
    pub fn record_terminal(
        &self,
        tape: &mut Tape,
        pv: &ProblemVars,
        z_t: Var,
        l_t: Var,
        log_rho0_x: f64,
    ) -> (Var, Var) {
        let log_rho1 = tape.field(z_t, pv.rho1);
        // log ρ₀(x) − l − log ρ₁(z)
        let neg = tape.add(l_t, log_rho1);
        let g_hat = tape.affine(neg, -self.lambda_kl, self.lambda_kl * log_rho0_x);
        let g = tape.affine(neg, -self.lambda_kl, self.lambda_kl * (log_rho0_x + 1.0));
        (g_hat, g)
    }

    /// C₂ = |Φ(z_T, T) − G| on the tape.
    pub fn record_terminal_penalty(&self, tape: &mut Tape, phi_t: Var, g: Var) -> Var {
        let r = tape.sub(phi_t, g);
        tape.map(r, Unary::Abs)
    }
}

/// Field handles registered on a tape by [`ProblemSpec::register`].
#[derive(Debug, Clone, Copy)]
pub struct ProblemVars {
    pub rho1: u32,
    pub preference: Option<u32>,
}
