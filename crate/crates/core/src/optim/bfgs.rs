use std::collections::VecDeque;

use super::line_search::{armijo_search, dot, norm};
use crate::error::{MfgError, Result};

/// Updates with sᵀy ≤ CURVATURE_FLOOR·‖s‖‖y‖ are skipped.
pub const CURVATURE_FLOOR: f64 = 1e-10;

/// Dense inverse-Hessian approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct BfgsState {
    n: usize,
    /// Row-major n×n.
    h: Vec<f64>,
    /// Accepted updates since the last reset.
    pub updates: usize,
    pub skipped: usize,
    pub iter: usize,
}

impl BfgsState {
    pub fn new(n: usize) -> Self {
        let mut s = BfgsState {
            n,
            h: vec![0.0; n * n],
            updates: 0,
            skipped: 0,
            iter: 0,
        };
        s.reset();
        s
    }

    /// H ← I.
    pub fn reset(&mut self) {
        self.h.fill(0.0);
        for i in 0..self.n {
            self.h[i * self.n + i] = 1.0;
        }
        self.updates = 0;
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// −H g.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        self.h
            .chunks_exact(self.n)
            .map(|row| -dot(row, g))
            .collect()
    }

    /// Inverse BFGS update with s = x⁺ − x and y = g⁺ − g. Before the first
    /// update since a reset, H is rescaled to (sᵀy / yᵀy)·I. Returns whether
    /// the update was applied.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let sy = dot(s, y);
        if !(sy > CURVATURE_FLOOR * norm(s) * norm(y)) {
            self.skipped += 1;
            return false;
        }
        let n = self.n;
        if self.updates == 0 {
            let gamma = sy / dot(y, y);
            for v in self.h.iter_mut() {
                *v *= gamma;
            }
        }
        let rho = 1.0 / sy;
        let hy = self.direction(y).into_iter().map(|v| -v).collect::<Vec<_>>();
        let coef = rho * (1.0 + rho * dot(y, &hy));
        for i in 0..n {
            let row = &mut self.h[i * n..(i + 1) * n];
            let (si, hyi) = (s[i], hy[i]);
            for j in 0..n {
                row[j] += coef * si * s[j] - rho * (si * hy[j] + hyi * s[j]);
            }
        }
        // keep exact symmetry
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self.h[i * n + j] + self.h[j * n + i]);
                self.h[i * n + j] = v;
                self.h[j * n + i] = v;
            }
        }
        self.updates += 1;
        true
    }
}

/// Limited-memory variant keeping the last `m` curvature pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState {
    m: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    pub skipped: usize,
}

impl LbfgsState {
    pub fn new(m: usize) -> Self {
        LbfgsState {
            m: m.max(1),
            pairs: VecDeque::new(),
            skipped: 0,
        }
    }

    pub fn reset(&mut self) {
        self.pairs.clear();
    }

    /// −H g by the two-loop recursion.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    pub fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let sy = dot(s, y);
        if !(sy > CURVATURE_FLOOR * norm(s) * norm(y)) {
            self.skipped += 1;
            return false;
        }
        if self.pairs.len() == self.m {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s.to_vec(), y.to_vec(), 1.0 / sy));
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriteria {
    pub max_iter: usize,
    pub g_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsTraceRow {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
    /// f(x⁺) ≤ f(x) + c·α·gᵀd held for the accepted step.
    pub armijo_ok: bool,
    pub updated: bool,
}

/// Dense BFGS with Armijo backtracking on a deterministic function.
pub fn bfgs_minimize<F>(mut loss_and_grad: F, x0: &[f64], stop: StopCriteria) -> Result<(Vec<f64>, Vec<BfgsTraceRow>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = loss_and_grad(&x);
    if !f.is_finite() {
        return Err(MfgError::Diverged { iter: 0 });
    }
    let mut state = BfgsState::new(x.len());
    let mut trace = Vec::new();
    for iter in 0..stop.max_iter {
        if norm(&g) <= stop.g_tol {
            break;
        }
        let mut dir = state.direction(&g);
        let slope = dot(&g, &dir);
        let mut cache: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let ls = armijo_search(
            |xt| {
                let (v, gt) = loss_and_grad(xt);
                cache = Some((xt.to_vec(), v, gt));
                v
            },
            &x,
            f,
            &g,
            &mut dir,
        )?;
        let slope = if ls.reset_direction { -dot(&g, &g) } else { slope };
        let (xn, fn_, gn) = cache.expect("line search evaluated a trial point");
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let updated = state.update(&s, &y);
        state.iter += 1;
        trace.push(BfgsTraceRow {
            iter,
            value: fn_,
            grad_norm: norm(&gn),
            step: ls.alpha,
            armijo_ok: fn_ <= f + super::line_search::ARMIJO_C * ls.alpha * slope,
            updated,
        });
        x = xn;
        f = fn_;
        g = gn;
    }
    Ok((x, trace))
}

/// Cholesky factorization succeeds (test helper for SPD checks).
pub fn is_spd(h: &[f64], n: usize) -> bool {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = h[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}
