//! Residual-network potential Φ(s, θ) with s = (x, t).
//!
//! ```text
//! Φ(s) = wᵀ N(s) + ½ sᵀ(A + Aᵀ)s + cᵀs + b
//! u₀ = σ(K₀ s + b₀),  uᵢ = uᵢ₋₁ + h σ(Kᵢ uᵢ₋₁ + bᵢ),  N(s) = u_M
//! ```
//!
//! The gradient is obtained by back-propagating `w` through the layers and
//! the spatial Laplacian by the layer-wise trace recurrence
//! `Δ(wᵀN) = t₀ + h Σ tᵢ` with `tᵢ = (σ''(Kᵢuᵢ₋₁+bᵢ) ⊙ zᵢ₊₁)ᵀ((KᵢJᵢ₋₁)⊙(KᵢJᵢ₋₁))𝟏`,
//! where `Jᵢ₋₁` is the spatial Jacobian of `uᵢ₋₁`. Cost is O(m²·d·M).
//!
//! All trainable weights live in one flat vector, laid out as
//! `K₀ (m×(d+1)), K₁..K_M (m×m), b₀..b_M (m), w (m), A ((d+1)×(d+1)), c (d+1), b`,
//! matrices row-major. Optimizers work on this vector directly.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MfgError, Result};

/// σ(x) = log(eˣ + e⁻ˣ), evaluated as |x| + log1p(e^{-2|x|}).
pub fn activation(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p()
}

pub fn activation_d1(x: f64) -> f64 {
    x.tanh()
}

pub fn activation_d2(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

pub fn activation_d3(x: f64) -> f64 {
    let t = x.tanh();
    -2.0 * t * (1.0 - t * t)
}

/// Shape of the potential network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    /// Spatial dimension.
    pub d: usize,
    /// Hidden width m.
    pub width: usize,
    /// Number of residual layers M (0 keeps only the opening layer).
    pub depth: usize,
    /// Residual step size.
    pub h: f64,
}

impl Architecture {
    pub fn new(d: usize, width: usize, depth: usize, h: f64) -> Result<Self> {
        let arch = Architecture { d, width, depth, h };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(MfgError::Config("spatial dimension d must be >= 1".into()));
        }
        if self.width < 1 {
            return Err(MfgError::Config("network width m must be >= 1".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(MfgError::Config(format!("ResNet step h must be positive, got {}", self.h)));
        }
        Ok(())
    }

    /// Input dimension d + 1.
    pub fn input_dim(&self) -> usize {
        self.d + 1
    }

    pub fn param_count(&self) -> usize {
        let (m, n, depth) = (self.width, self.input_dim(), self.depth);
        m * n + depth * m * m + (depth + 1) * m + m + n * n + n + 1
    }

    pub fn layout(&self) -> Layout {
        let (m, n, depth) = (self.width, self.input_dim(), self.depth);
        let mut off = 0;
        let mut k = Vec::with_capacity(depth + 1);
        for i in 0..=depth {
            k.push(off);
            off += if i == 0 { m * n } else { m * m };
        }
        let mut bias = Vec::with_capacity(depth + 1);
        for _ in 0..=depth {
            bias.push(off);
            off += m;
        }
        let w = off;
        off += m;
        let a = off;
        off += n * n;
        let c = off;
        off += n;
        let b = off;
        off += 1;
        debug_assert_eq!(off, self.param_count());
        Layout { k, bias, w, a, c, b }
    }
}

/// Offsets of each named block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub k: Vec<usize>,
    pub bias: Vec<usize>,
    pub w: usize,
    pub a: usize,
    pub c: usize,
    pub b: usize,
}

/// Variances used by [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScales {
    pub k_var: f64,
    pub bias_var: f64,
}

impl Default for InitScales {
    fn default() -> Self {
        InitScales {
            k_var: 0.01,
            bias_var: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialParams {
    arch: Architecture,
    layout: Layout,
    data: Vec<f64>,
}

impl PotentialParams {
    /// All weights zero: Φ ≡ 0.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(PotentialParams {
            layout: arch.layout(),
            data: vec![0.0; arch.param_count()],
            arch,
        })
    }

    pub fn from_flat(arch: Architecture, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(MfgError::Shape(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MfgError::Domain("parameters must be finite".into()));
        }
        Ok(PotentialParams {
            layout: arch.layout(),
            data,
            arch,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Opening-layer (i = 0) or residual-layer weight matrix.
    pub fn k(&self, i: usize) -> &[f64] {
        let n = if i == 0 { self.arch.input_dim() } else { self.arch.width };
        let o = self.layout.k[i];
        &self.data[o..o + self.arch.width * n]
    }

    pub fn k_mut(&mut self, i: usize) -> &mut [f64] {
        let n = if i == 0 { self.arch.input_dim() } else { self.arch.width };
        let o = self.layout.k[i];
        &mut self.data[o..o + self.arch.width * n]
    }

    pub fn bias(&self, i: usize) -> &[f64] {
        let o = self.layout.bias[i];
        &self.data[o..o + self.arch.width]
    }

    pub fn bias_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.layout.bias[i];
        &mut self.data[o..o + self.arch.width]
    }

    pub fn w(&self) -> &[f64] {
        &self.data[self.layout.w..self.layout.w + self.arch.width]
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        let o = self.layout.w;
        &mut self.data[o..o + self.arch.width]
    }

    /// Quadratic-term matrix A, (d+1)×(d+1) row-major, not symmetrized.
    pub fn a(&self) -> &[f64] {
        let n = self.arch.input_dim();
        &self.data[self.layout.a..self.layout.a + n * n]
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        let n = self.arch.input_dim();
        let o = self.layout.a;
        &mut self.data[o..o + n * n]
    }

    pub fn c(&self) -> &[f64] {
        let n = self.arch.input_dim();
        &self.data[self.layout.c..self.layout.c + n]
    }

    pub fn c_mut(&mut self) -> &mut [f64] {
        let n = self.arch.input_dim();
        let o = self.layout.c;
        &mut self.data[o..o + n]
    }

    pub fn b(&self) -> f64 {
        self.data[self.layout.b]
    }

    pub fn set_b(&mut self, b: f64) {
        let o = self.layout.b;
        self.data[o] = b;
    }

    /// Plain-text checkpoint: one line per named block,
    /// `name dims... = v v v ...`, every value with 17 significant digits.
    pub fn to_text(&self, header: &str) -> String {
        let a = &self.arch;
        let n = a.input_dim();
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "d = {}", a.d);
        let _ = writeln!(out, "width = {}", a.width);
        let _ = writeln!(out, "depth = {}", a.depth);
        let _ = writeln!(out, "h = {:.16e}", a.h);
        let mut block = |name: String, dims: &[usize], vals: &[f64]| {
            let _ = write!(out, "{name}");
            for d in dims {
                let _ = write!(out, " {d}");
            }
            out.push_str(" =");
            for v in vals {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
        };
        for i in 0..=a.depth {
            let cols = if i == 0 { n } else { a.width };
            block(format!("K{i}"), &[a.width, cols], self.k(i));
        }
        for i in 0..=a.depth {
            block(format!("b{i}"), &[a.width], self.bias(i));
        }
        block("w".into(), &[a.width], self.w());
        block("A".into(), &[n, n], self.a());
        block("c".into(), &[n], self.c());
        block("b".into(), &[1], &[self.b()]);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| MfgError::Config(format!("checkpoint: {reason}"));
        let mut d = None;
        let mut width = None;
        let mut depth = None;
        let mut h = None;
        let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: missing '='", lineno + 1)))?;
            let mut head = lhs.split_whitespace();
            let name = head.next().ok_or_else(|| bad(format!("line {}: empty key", lineno + 1)))?;
            let dims: Vec<usize> = head
                .map(|t| t.parse().map_err(|_| bad(format!("line {}: bad dimension {t}", lineno + 1))))
                .collect::<Result<_>>()?;
            let parse_usize = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| bad(format!("line {}: bad integer", lineno + 1)))
            };
            match name {
                "d" => d = Some(parse_usize(rhs)?),
                "width" => width = Some(parse_usize(rhs)?),
                "depth" => depth = Some(parse_usize(rhs)?),
                "h" => {
                    h = Some(
                        rhs.trim()
                            .parse::<f64>()
                            .map_err(|_| bad(format!("line {}: bad float", lineno + 1)))?,
                    )
                }
                _ => {
                    let vals: Vec<f64> = rhs
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| bad(format!("line {}: bad value {t}", lineno + 1))))
                        .collect::<Result<_>>()?;
                    blocks.push((name.to_string(), dims, vals));
                }
            }
        }
        let arch = Architecture::new(
            d.ok_or_else(|| bad("missing d".into()))?,
            width.ok_or_else(|| bad("missing width".into()))?,
            depth.ok_or_else(|| bad("missing depth".into()))?,
            h.ok_or_else(|| bad("missing h".into()))?,
        )?;
        let mut params = PotentialParams::zeros(arch)?;
        let n = arch.input_dim();
        let mut expected: Vec<(String, Vec<usize>, usize)> = Vec::new();
        for i in 0..=arch.depth {
            let cols = if i == 0 { n } else { arch.width };
            expected.push((format!("K{i}"), vec![arch.width, cols], params.layout.k[i]));
        }
        for i in 0..=arch.depth {
            expected.push((format!("b{i}"), vec![arch.width], params.layout.bias[i]));
        }
        expected.push(("w".into(), vec![arch.width], params.layout.w));
        expected.push(("A".into(), vec![n, n], params.layout.a));
        expected.push(("c".into(), vec![n], params.layout.c));
        expected.push(("b".into(), vec![1], params.layout.b));
        if blocks.len() != expected.len() {
            return Err(bad(format!("expected {} blocks, found {}", expected.len(), blocks.len())));
        }
        for (name, dims, off) in expected {
            let (_, got_dims, vals) = blocks
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| bad(format!("missing block {name}")))?;
            if *got_dims != dims || vals.len() != dims.iter().product::<usize>() {
                return Err(bad(format!("block {name} has wrong shape")));
            }
            params.data[off..off + vals.len()].copy_from_slice(vals);
        }
        if params.data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        Ok(params)
    }
}

/// Random initialization: K entries ~ N(0, k_var), biases ~ N(0, bias_var),
/// w = 1, A = 0, c = 0, b = 0.
pub fn init_params<R: Rng + ?Sized>(
    arch: Architecture,
    scales: InitScales,
    rng: &mut R,
) -> Result<PotentialParams> {
    if !(scales.k_var >= 0.0 && scales.bias_var >= 0.0) {
        return Err(MfgError::Config("initialization scales must be nonnegative".into()));
    }
    let mut p = PotentialParams::zeros(arch)?;
    let kd = Normal::new(0.0, scales.k_var.sqrt()).map_err(|e| MfgError::Config(e.to_string()))?;
    let bd = Normal::new(0.0, scales.bias_var.sqrt()).map_err(|e| MfgError::Config(e.to_string()))?;
    for i in 0..=arch.depth {
        for v in p.k_mut(i) {
            *v = kd.sample(rng);
        }
    }
    for i in 0..=arch.depth {
        for v in p.bias_mut(i) {
            *v = bd.sample(rng);
        }
    }
    p.w_mut().fill(1.0);
    Ok(p)
}

/// Reusable buffers for one evaluation; contents describe only the most
/// recent call.
#[derive(Debug, Clone, Default)]
pub struct EvalWorkspace {
    /// Pre-activations Kᵢuᵢ₋₁ + bᵢ, one per layer.
    pre: Vec<Vec<f64>>,
    /// Hidden features u₀..u_M.
    u: Vec<Vec<f64>>,
    /// Back-propagated vectors z₀..z_{M+1} (z_{M+1} = w, z₀ has d+1 entries).
    z: Vec<Vec<f64>>,
    /// Spatial Jacobian of the current hidden feature, m×d row-major.
    jac: Vec<f64>,
    /// Kᵢ Jᵢ₋₁ scratch, m×d.
    kj: Vec<f64>,
    tmp: Vec<f64>,
}

impl EvalWorkspace {
    pub fn new(arch: &Architecture) -> Self {
        let m = arch.width;
        let layers = arch.depth + 1;
        EvalWorkspace {
            pre: vec![vec![0.0; m]; layers],
            u: vec![vec![0.0; m]; layers],
            z: (0..=layers).map(|i| vec![0.0; if i == 0 { arch.input_dim() } else { m }]).collect(),
            jac: vec![0.0; m * arch.d],
            kj: vec![0.0; m * arch.d],
            tmp: vec![0.0; m],
        }
    }

    fn fits(&self, arch: &Architecture) -> bool {
        self.pre.len() == arch.depth + 1
            && self.pre[0].len() == arch.width
            && self.z[0].len() == arch.input_dim()
            && self.jac.len() == arch.width * arch.d
    }
}

/// Φ, ∇ₛΦ and ΔₓΦ at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEval {
    pub phi: f64,
    /// d spatial components followed by ∂ₜΦ.
    pub grad: Vec<f64>,
    pub laplacian: f64,
}

fn check_input(s: &[f64], theta: &PotentialParams) -> Result<()> {
    if s.len() != theta.arch.input_dim() {
        return Err(MfgError::Shape(format!(
            "input has {} entries, network expects {}",
            s.len(),
            theta.arch.input_dim()
        )));
    }
    Ok(())
}

fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let c = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i * c..(i + 1) * c].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

/// out = aᵀ x for a (r × c), x (r).
fn mat_t_vec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let c = out.len();
    out.fill(0.0);
    for (i, xi) in x.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(&a[i * c..(i + 1) * c]) {
            *o += p * xi;
        }
    }
}

fn run_forward(s: &[f64], theta: &PotentialParams, ws: &mut EvalWorkspace) -> f64 {
    let arch = theta.arch;
    let h = arch.h;
    matvec(theta.k(0), s, &mut ws.pre[0]);
    for (p, b) in ws.pre[0].iter_mut().zip(theta.bias(0)) {
        *p += b;
    }
    for (u, p) in ws.u[0].iter_mut().zip(&ws.pre[0]) {
        *u = activation(*p);
    }
    for i in 1..=arch.depth {
        let (done, rest) = ws.u.split_at_mut(i);
        let prev = &done[i - 1];
        matvec(theta.k(i), prev, &mut ws.pre[i]);
        for (p, b) in ws.pre[i].iter_mut().zip(theta.bias(i)) {
            *p += b;
        }
        for ((u, p), q) in rest[0].iter_mut().zip(prev).zip(&ws.pre[i]) {
            *u = p + h * activation(*q);
        }
    }
    let n = arch.input_dim();
    let a = theta.a();
    let mut quad = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| a[i * n + j] * s[j]).sum();
        quad += s[i] * row;
    }
    let nw: f64 = theta.w().iter().zip(&ws.u[arch.depth]).map(|(p, q)| p * q).sum();
    let lin: f64 = theta.c().iter().zip(s).map(|(p, q)| p * q).sum();
    nw + quad + lin + theta.b()
}

/// Back-propagation of w; leaves z₀ = ∇ₛ(wᵀN) in `ws.z[0]`.
fn run_backprop(theta: &PotentialParams, ws: &mut EvalWorkspace) {
    let arch = theta.arch;
    let depth = arch.depth;
    ws.z[depth + 1].copy_from_slice(theta.w());
    for i in (1..=depth).rev() {
        let (lo, hi) = ws.z.split_at_mut(i + 1);
        let next = &hi[0];
        for ((t, p), zn) in ws.tmp.iter_mut().zip(&ws.pre[i]).zip(next) {
            *t = activation_d1(*p) * zn;
        }
        mat_t_vec(theta.k(i), &ws.tmp, &mut lo[i]);
        for (z, zn) in lo[i].iter_mut().zip(next) {
            *z = zn + arch.h * *z;
        }
    }
    let (lo, hi) = ws.z.split_at_mut(1);
    for ((t, p), zn) in ws.tmp.iter_mut().zip(&ws.pre[0]).zip(&hi[0]) {
        *t = activation_d1(*p) * zn;
    }
    mat_t_vec(theta.k(0), &ws.tmp, &mut lo[0]);
}

fn quadratic_gradient(s: &[f64], theta: &PotentialParams, grad: &mut [f64]) {
    let n = theta.arch.input_dim();
    let a = theta.a();
    for i in 0..n {
        let mut acc = theta.c()[i];
        for j in 0..n {
            acc += (a[i * n + j] + a[j * n + i]) * s[j];
        }
        grad[i] += acc;
    }
}

/// Trace recurrence; requires forward and backprop for the same input.
fn run_trace(theta: &PotentialParams, ws: &mut EvalWorkspace) -> f64 {
    let arch = theta.arch;
    let (m, d, n) = (arch.width, arch.d, arch.input_dim());
    let k0 = theta.k(0);
    // t₀ and J₀ = diag(σ'(pre₀)) K₀E
    let mut lap = 0.0;
    for r in 0..m {
        let row = &k0[r * n..r * n + d];
        let sq: f64 = row.iter().map(|v| v * v).sum();
        lap += activation_d2(ws.pre[0][r]) * ws.z[1][r] * sq;
        let g = activation_d1(ws.pre[0][r]);
        for (j, v) in row.iter().enumerate() {
            ws.jac[r * d + j] = g * v;
        }
    }
    for i in 1..=arch.depth {
        let k = theta.k(i);
        ws.kj.fill(0.0);
        for r in 0..m {
            let out = &mut ws.kj[r * d..(r + 1) * d];
            for p in 0..m {
                let krp = k[r * m + p];
                for (o, jv) in out.iter_mut().zip(&ws.jac[p * d..(p + 1) * d]) {
                    *o += krp * jv;
                }
            }
        }
        let mut ti = 0.0;
        for r in 0..m {
            let sq: f64 = ws.kj[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
            ti += activation_d2(ws.pre[i][r]) * ws.z[i + 1][r] * sq;
        }
        lap += arch.h * ti;
        if i < arch.depth {
            for r in 0..m {
                let g = arch.h * activation_d1(ws.pre[i][r]);
                for j in 0..d {
                    ws.jac[r * d + j] += g * ws.kj[r * d + j];
                }
            }
        }
    }
    let a = theta.a();
    lap + 2.0 * (0..d).map(|i| a[i * n + i]).sum::<f64>()
}

fn ensure_workspace(theta: &PotentialParams, ws: &mut EvalWorkspace) {
    if !ws.fits(&theta.arch) {
        *ws = EvalWorkspace::new(&theta.arch);
    }
}

pub fn forward(s: &[f64], theta: &PotentialParams, ws: &mut EvalWorkspace) -> Result<f64> {
    check_input(s, theta)?;
    ensure_workspace(theta, ws);
    Ok(run_forward(s, theta, ws))
}

/// Full gradient ∇ₛΦ: spatial components first, ∂ₜΦ last.
pub fn gradient(s: &[f64], theta: &PotentialParams, ws: &mut EvalWorkspace) -> Result<Vec<f64>> {
    check_input(s, theta)?;
    ensure_workspace(theta, ws);
    run_forward(s, theta, ws);
    run_backprop(theta, ws);
    let mut g = ws.z[0].clone();
    quadratic_gradient(s, theta, &mut g);
    Ok(g)
}

/// Exact spatial Laplacian ΔₓΦ.
pub fn laplacian(s: &[f64], theta: &PotentialParams, ws: &mut EvalWorkspace) -> Result<f64> {
    check_input(s, theta)?;
    ensure_workspace(theta, ws);
    run_forward(s, theta, ws);
    run_backprop(theta, ws);
    Ok(run_trace(theta, ws))
}

/// Φ, its gradient and Laplacian from a single forward/backward pass.
pub fn evaluate(s: &[f64], theta: &PotentialParams, ws: &mut EvalWorkspace) -> Result<PotentialEval> {
    check_input(s, theta)?;
    ensure_workspace(theta, ws);
    let phi = run_forward(s, theta, ws);
    run_backprop(theta, ws);
    let mut grad = ws.z[0].clone();
    quadratic_gradient(s, theta, &mut grad);
    let laplacian = run_trace(theta, ws);
    Ok(PotentialEval { phi, grad, laplacian })
}
