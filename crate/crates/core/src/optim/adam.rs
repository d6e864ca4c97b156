#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            step: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(n: usize, params: AdamParams) -> Self {
        AdamState {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Applies one step to `x` in place; returns the step length ‖Δx‖.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) -> f64 {
        let AdamParams {
            step,
            beta1,
            beta2,
            eps,
        } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut moved = 0.0;
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let delta = step * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
            x[i] -= delta;
            moved += delta * delta;
        }
        moved.sqrt()
    }
}
