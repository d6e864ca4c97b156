//! Vector-granular reverse-mode tape.
//!
//! Every node owns a contiguous slice of one flat value buffer, shaped as a
//! row-major `rows × cols` block (vectors are `n × 1`, scalars `1 × 1`).
//! Leaves recorded before [`Tape::freeze`] form the persistent prefix; their
//! adjoints survive [`Tape::reset`] so that per-sample sweeps can accumulate
//! a gradient over a batch while the per-sample part of the tape is reused.

use std::sync::Arc;

use crate::nn_potential::{
    activation as sigma, activation_d1 as sigma_d1, activation_d2 as sigma_d2,
    activation_d3 as sigma_d3,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Smooth scalar function of a vector with an analytic gradient, usable as a
/// single tape primitive (log-densities, preference fields).
pub trait ScalarField: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    /// Writes ∇f(x) into `grad` and returns f(x).
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigma,
    SigmaD1,
    SigmaD2,
    Abs,
    Log,
    Exp,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatTVec(Var, Var),
    MatMat(Var, Var),
    LeadingCols(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// a + alpha * b
    Axpy(Var, Var, f64),
    /// alpha * a (+ a constant)
    Affine(Var, f64),
    Mul(Var, Var),
    RowScale(Var, Var),
    RowSum(Var),
    Dot(Var, Var),
    Sum(Var),
    DiagSum(Var, u32),
    Map(Var, Unary),
    Slice(Var, u32),
    Concat(Var, Var),
    Field(Var, u32),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: usize,
    rows: u32,
    cols: u32,
}

impl Node {
    fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

#[derive(Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    fields: Vec<Arc<dyn ScalarField>>,
    frozen_nodes: usize,
    frozen_len: usize,
    scratch: Vec<f64>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("values", &self.vals.len())
            .field("frozen_nodes", &self.frozen_nodes)
            .finish()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigma => sigma(x),
            Unary::SigmaD1 => sigma_d1(x),
            Unary::SigmaD2 => sigma_d2(x),
            Unary::Abs => x.abs(),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigma => sigma_d1(x),
            Unary::SigmaD1 => sigma_d2(x),
            Unary::SigmaD2 => sigma_d3(x),
            Unary::Abs => sign(x),
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a field for use with [`Tape::field`]; returns its index.
    pub fn register_field(&mut self, field: Arc<dyn ScalarField>) -> u32 {
        self.fields.push(field);
        (self.fields.len() - 1) as u32
    }

    /// Marks all nodes recorded so far as persistent.
    pub fn freeze(&mut self) {
        self.frozen_nodes = self.nodes.len();
        self.frozen_len = self.vals.len();
        self.adj.clear();
        self.adj.resize(self.frozen_len, 0.0);
    }

    /// Drops every node recorded after [`Tape::freeze`].
    pub fn reset(&mut self) {
        self.nodes.truncate(self.frozen_nodes);
        self.vals.truncate(self.frozen_len);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Overwrites the values of a persistent leaf in place.
    pub fn set_leaf(&mut self, v: Var, values: &[f64]) {
        let n = self.nodes[v.idx()];
        assert!(matches!(n.op, Op::Leaf), "set_leaf on a non-leaf");
        assert_eq!(n.len(), values.len());
        self.vals[n.off..n.off + n.len()].copy_from_slice(values);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.idx()];
        &self.vals[n.off..n.off + n.len()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.idx()];
        debug_assert_eq!(n.len(), 1);
        self.vals[n.off]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx()];
        (n.rows as usize, n.cols as usize)
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.idx()].len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        self.nodes.push(Node {
            op,
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        (Var((self.nodes.len() - 1) as u32), off)
    }

    /// Splits the value buffer into (everything before `off`, the output slice).
    fn out_split(&mut self, off: usize) -> (&[f64], &mut [f64]) {
        let (lo, hi) = self.vals.split_at_mut(off);
        (lo, hi)
    }

    fn range(&self, v: Var) -> std::ops::Range<usize> {
        let n = &self.nodes[v.idx()];
        n.off..n.off + n.len()
    }

    pub fn leaf(&mut self, values: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(values.len(), rows * cols, "leaf shape");
        let (v, off) = self.push(Op::Leaf, rows, cols);
        self.vals[off..off + values.len()].copy_from_slice(values);
        v
    }

    pub fn vector(&mut self, values: &[f64]) -> Var {
        self.leaf(values, values.len(), 1)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(&[value], 1, 1)
    }

    /// `a · x` for a matrix `a` (r × c) and vector `x` (c).
    pub fn matvec(&mut self, a: Var, x: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.numel(x), c, "matvec shape");
        let (ra, rx) = (self.range(a), self.range(x));
        let (v, off) = self.push(Op::MatVec(a, x), r, 1);
        let (lo, out) = self.out_split(off);
        let (am, xv) = (&lo[ra], &lo[rx]);
        for i in 0..r {
            let row = &am[i * c..(i + 1) * c];
            out[i] = row.iter().zip(xv).map(|(p, q)| p * q).sum();
        }
        v
    }

    /// `aᵀ · x` for a matrix `a` (r × c) and vector `x` (r).
    pub fn mat_t_vec(&mut self, a: Var, x: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.numel(x), r, "mat_t_vec shape");
        let (ra, rx) = (self.range(a), self.range(x));
        let (v, off) = self.push(Op::MatTVec(a, x), c, 1);
        let (lo, out) = self.out_split(off);
        let (am, xv) = (&lo[ra], &lo[rx]);
        let out = &mut out[..c];
        out.fill(0.0);
        for i in 0..r {
            let xi = xv[i];
            for (o, p) in out.iter_mut().zip(&am[i * c..(i + 1) * c]) {
                *o += p * xi;
            }
        }
        v
    }

    pub fn matmat(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (kb, c) = self.shape(b);
        assert_eq!(k, kb, "matmat shape");
        let (ra, rb) = (self.range(a), self.range(b));
        let (v, off) = self.push(Op::MatMat(a, b), r, c);
        let (lo, out) = self.out_split(off);
        let (am, bm) = (&lo[ra], &lo[rb]);
        let out = &mut out[..r * c];
        out.fill(0.0);
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let aip = am[i * k + p];
                for (o, q) in orow.iter_mut().zip(&bm[p * c..(p + 1) * c]) {
                    *o += aip * q;
                }
            }
        }
        v
    }

    /// First `ncols` columns of a matrix.
    pub fn leading_cols(&mut self, a: Var, ncols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(ncols <= c);
        let ra = self.range(a);
        let (v, off) = self.push(Op::LeadingCols(a), r, ncols);
        let (lo, out) = self.out_split(off);
        let am = &lo[ra];
        for i in 0..r {
            out[i * ncols..(i + 1) * ncols].copy_from_slice(&am[i * c..i * c + ncols]);
        }
        v
    }

    fn binary_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.numel(b), r * c, "elementwise shape");
        let (ra, rb) = (self.range(a), self.range(b));
        let (v, off) = self.push(op, r, c);
        let (lo, out) = self.out_split(off);
        for ((o, p), q) in out.iter_mut().zip(&lo[ra]).zip(&lo[rb]) {
            *o = f(*p, *q);
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    /// `a + alpha * b`.
    pub fn axpy(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        self.binary_same(a, b, Op::Axpy(a, b, alpha), |p, q| p + alpha * q)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// `alpha * a + beta` elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let (r, c) = self.shape(a);
        let ra = self.range(a);
        let (v, off) = self.push(Op::Affine(a, alpha), r, c);
        let (lo, out) = self.out_split(off);
        for (o, p) in out.iter_mut().zip(&lo[ra]) {
            *o = alpha * p + beta;
        }
        v
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    /// `diag(s) · a` for a vector `s` (r) and matrix `a` (r × c).
    pub fn row_scale(&mut self, s: Var, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.numel(s), r, "row_scale shape");
        let (rs, ra) = (self.range(s), self.range(a));
        let (v, off) = self.push(Op::RowScale(s, a), r, c);
        let (lo, out) = self.out_split(off);
        let (sv, am) = (&lo[rs], &lo[ra]);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = sv[i] * am[i * c + j];
            }
        }
        v
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let ra = self.range(a);
        let (v, off) = self.push(Op::RowSum(a), r, 1);
        let (lo, out) = self.out_split(off);
        let am = &lo[ra];
        for i in 0..r {
            out[i] = am[i * c..(i + 1) * c].iter().sum();
        }
        v
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.numel(a), self.numel(b), "dot shape");
        let (ra, rb) = (self.range(a), self.range(b));
        let (v, off) = self.push(Op::Dot(a, b), 1, 1);
        let (lo, out) = self.out_split(off);
        out[0] = lo[ra].iter().zip(&lo[rb]).map(|(p, q)| p * q).sum();
        v
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ra = self.range(a);
        let (v, off) = self.push(Op::Sum(a), 1, 1);
        let (lo, out) = self.out_split(off);
        out[0] = lo[ra].iter().sum();
        v
    }

    /// Sum of the first `count` diagonal entries of a square matrix.
    pub fn diag_sum(&mut self, a: Var, count: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(r == c && count <= r, "diag_sum shape");
        let ra = self.range(a);
        let (v, off) = self.push(Op::DiagSum(a, count as u32), 1, 1);
        let (lo, out) = self.out_split(off);
        let am = &lo[ra];
        out[0] = (0..count).map(|i| am[i * c + i]).sum();
        v
    }

    pub fn map(&mut self, a: Var, f: Unary) -> Var {
        let (r, c) = self.shape(a);
        let ra = self.range(a);
        let (v, off) = self.push(Op::Map(a, f), r, c);
        let (lo, out) = self.out_split(off);
        for (o, p) in out.iter_mut().zip(&lo[ra]) {
            *o = f.apply(*p);
        }
        v
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.numel(a), "slice range");
        let ra = self.range(a);
        let (v, off) = self.push(Op::Slice(a, start as u32), len, 1);
        let (lo, out) = self.out_split(off);
        out[..len].copy_from_slice(&lo[ra][start..start + len]);
        v
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ra, rb) = (self.range(a), self.range(b));
        let (la, lb) = (ra.len(), rb.len());
        let (v, off) = self.push(Op::Concat(a, b), la + lb, 1);
        let (lo, out) = self.out_split(off);
        out[..la].copy_from_slice(&lo[ra]);
        out[la..la + lb].copy_from_slice(&lo[rb]);
        v
    }

    pub fn field(&mut self, x: Var, field: u32) -> Var {
        let rx = self.range(x);
        let f = Arc::clone(&self.fields[field as usize]);
        let (v, off) = self.push(Op::Field(x, field), 1, 1);
        let (lo, out) = self.out_split(off);
        out[0] = f.value(&lo[rx]);
        v
    }

    /// Gradient of scalar `root` with respect to every node, starting from
    /// zero adjoints everywhere. Repeated calls give identical results.
    pub fn backward(&mut self, root: Var) {
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        self.sweep(root, 1.0);
    }

    /// Adds `seed · ∂root/∂leaf` into the persistent adjoints, leaving the
    /// adjoints of earlier sweeps in place.
    pub fn accumulate(&mut self, root: Var, seed: f64) {
        self.adj.truncate(self.frozen_len);
        self.adj.resize(self.vals.len(), 0.0);
        self.sweep(root, seed);
    }

    /// Adjoint of the persistent prefix, in recording order.
    pub fn persistent_adjoint(&self) -> &[f64] {
        &self.adj[..self.frozen_len]
    }

    pub fn zero_persistent_adjoint(&mut self) {
        self.adj[..self.frozen_len].fill(0.0);
    }

    pub fn adjoint(&self, v: Var) -> &[f64] {
        &self.adj[self.range(v)]
    }

    fn sweep(&mut self, root: Var, seed: f64) {
        assert_eq!(self.numel(root), 1, "backward root must be scalar");
        let root_off = self.nodes[root.idx()].off;
        self.adj[root_off] += seed;
        let mut scratch = std::mem::take(&mut self.scratch);
        let Tape {
            nodes,
            vals,
            adj,
            fields,
            ..
        } = self;
        for idx in (0..=root.idx()).rev() {
            let node = nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let len = node.len();
            let (lo, hi) = adj.split_at_mut(node.off);
            let gy = &hi[..len];
            let y = &vals[node.off..node.off + len];
            let r = |v: Var| {
                let n = &nodes[v.idx()];
                n.off..n.off + n.len()
            };
            match node.op {
                Op::Leaf => {}
                Op::MatVec(a, x) => {
                    let (ra, rx) = (r(a), r(x));
                    let c = nodes[a.idx()].cols as usize;
                    let rows = len;
                    for i in 0..rows {
                        let g = gy[i];
                        if g == 0.0 {
                            continue;
                        }
                        let arow = ra.start + i * c;
                        for j in 0..c {
                            lo[arow + j] += g * vals[rx.start + j];
                        }
                        for j in 0..c {
                            lo[rx.start + j] += g * vals[arow + j];
                        }
                    }
                }
                Op::MatTVec(a, x) => {
                    let (ra, rx) = (r(a), r(x));
                    let rows = nodes[a.idx()].rows as usize;
                    let c = len;
                    for i in 0..rows {
                        let xi = vals[rx.start + i];
                        let arow = ra.start + i * c;
                        let mut acc = 0.0;
                        for j in 0..c {
                            lo[arow + j] += xi * gy[j];
                            acc += vals[arow + j] * gy[j];
                        }
                        lo[rx.start + i] += acc;
                    }
                }
                Op::MatMat(a, b) => {
                    let (ra, rb) = (r(a), r(b));
                    let rows = node.rows as usize;
                    let c = node.cols as usize;
                    let k = nodes[a.idx()].cols as usize;
                    for i in 0..rows {
                        let grow = &gy[i * c..(i + 1) * c];
                        for p in 0..k {
                            let brow = rb.start + p * c;
                            let aip = vals[ra.start + i * k + p];
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += grow[j] * vals[brow + j];
                                lo[brow + j] += aip * grow[j];
                            }
                            lo[ra.start + i * k + p] += acc;
                        }
                    }
                }
                Op::LeadingCols(a) => {
                    let ra = r(a);
                    let c_full = nodes[a.idx()].cols as usize;
                    let c = node.cols as usize;
                    for i in 0..node.rows as usize {
                        for j in 0..c {
                            lo[ra.start + i * c_full + j] += gy[i * c + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (ra, rb) = (r(a), r(b));
                    for k in 0..len {
                        lo[ra.start + k] += gy[k];
                    }
                    for k in 0..len {
                        lo[rb.start + k] += gy[k];
                    }
                }
                Op::Sub(a, b) => {
                    let (ra, rb) = (r(a), r(b));
                    for k in 0..len {
                        lo[ra.start + k] += gy[k];
                    }
                    for k in 0..len {
                        lo[rb.start + k] -= gy[k];
                    }
                }
                Op::Axpy(a, b, alpha) => {
                    let (ra, rb) = (r(a), r(b));
                    for k in 0..len {
                        lo[ra.start + k] += gy[k];
                    }
                    for k in 0..len {
                        lo[rb.start + k] += alpha * gy[k];
                    }
                }
                Op::Affine(a, alpha) => {
                    let ra = r(a);
                    for k in 0..len {
                        lo[ra.start + k] += alpha * gy[k];
                    }
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (r(a), r(b));
                    for k in 0..len {
                        lo[ra.start + k] += gy[k] * vals[rb.start + k];
                    }
                    for k in 0..len {
                        lo[rb.start + k] += gy[k] * vals[ra.start + k];
                    }
                }
                Op::RowScale(s, a) => {
                    let (rs, ra) = (r(s), r(a));
                    let c = node.cols as usize;
                    for i in 0..node.rows as usize {
                        let si = vals[rs.start + i];
                        let mut acc = 0.0;
                        for j in 0..c {
                            let g = gy[i * c + j];
                            acc += g * vals[ra.start + i * c + j];
                            lo[ra.start + i * c + j] += si * g;
                        }
                        lo[rs.start + i] += acc;
                    }
                }
                Op::RowSum(a) => {
                    let ra = r(a);
                    let c = nodes[a.idx()].cols as usize;
                    for i in 0..len {
                        for j in 0..c {
                            lo[ra.start + i * c + j] += gy[i];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let (ra, rb) = (r(a), r(b));
                    let g = gy[0];
                    let n = ra.len();
                    for k in 0..n {
                        lo[ra.start + k] += g * vals[rb.start + k];
                    }
                    for k in 0..n {
                        lo[rb.start + k] += g * vals[ra.start + k];
                    }
                }
                Op::Sum(a) => {
                    let g = gy[0];
                    for k in r(a) {
                        lo[k] += g;
                    }
                }
                Op::DiagSum(a, count) => {
                    let ra = r(a);
                    let c = nodes[a.idx()].cols as usize;
                    for i in 0..count as usize {
                        lo[ra.start + i * c + i] += gy[0];
                    }
                }
                Op::Map(a, f) => {
                    let ra = r(a);
                    for k in 0..len {
                        lo[ra.start + k] += gy[k] * f.deriv(vals[ra.start + k], y[k]);
                    }
                }
                Op::Slice(a, start) => {
                    let base = r(a).start + start as usize;
                    for k in 0..len {
                        lo[base + k] += gy[k];
                    }
                }
                Op::Concat(a, b) => {
                    let (ra, rb) = (r(a), r(b));
                    let la = ra.len();
                    for k in 0..la {
                        lo[ra.start + k] += gy[k];
                    }
                    for k in 0..rb.len() {
                        lo[rb.start + k] += gy[la + k];
                    }
                }
                Op::Field(x, f) => {
                    let rx = r(x);
                    scratch.clear();
                    scratch.resize(rx.len(), 0.0);
                    fields[f as usize].value_grad(&vals[rx.clone()], &mut scratch);
                    let g = gy[0];
                    for (k, s) in scratch.iter().enumerate() {
                        lo[rx.start + k] += g * s;
                    }
                }
            }
        }
        self.scratch = scratch;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;

    impl ScalarField for SumSquares {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().map(|v| v * v).sum()
        }
        fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = 2.0 * v;
            }
            self.value(x)
        }
    }

    /// Builds a scalar function touching every primitive.
    fn build(t: &mut Tape, a_vals: &[f64], x_vals: &[f64]) -> (Var, Var, Var) {
        let a = t.leaf(a_vals, 3, 2);
        let x = t.vector(x_vals);
        let ax = t.matvec(a, x);
        let atax = t.mat_t_vec(a, ax);
        let s = t.map(atax, Unary::Sigma);
        let d1 = t.map(ax, Unary::SigmaD1);
        let d2 = t.map(ax, Unary::SigmaD2);
        let m = t.mul(d1, d2);
        let j = t.leading_cols(a, 1);
        let rs = t.row_scale(m, j);
        let am = t.leaf(&[0.3, -0.2, 0.1, 0.4], 2, 2);
        let aa = t.matmat(a, am);
        let sq = t.mul(aa, aa);
        let rsum = t.row_sum(sq);
        let p1 = t.dot(rsum, m);
        let p2 = t.sum(rs);
        let sx = t.concat(s, x);
        let sl = t.slice(sx, 1, 3);
        let f = t.register_field(Arc::new(SumSquares));
        let fv = t.field(sl, f);
        let q = t.diag_sum(am, 2);
        let e = t.affine(p1, 0.5, 0.1);
        let e = t.map(e, Unary::Exp);
        let l = t.map(fv, Unary::Log);
        let ab = t.map(p2, Unary::Abs);
        let sqr = t.map(q, Unary::Square);
        let s1 = t.add(e, l);
        let s2 = t.sub(s1, ab);
        let s3 = t.axpy(s2, sqr, 0.7);
        (s3, a, x)
    }

    #[test]
    fn backward_matches_central_differences() {
        let a_vals = [0.5, -0.3, 0.2, 0.8, -0.6, 0.1];
        let x_vals = [0.7, -1.1];
        let mut t = Tape::new();
        let (root, a, x) = build(&mut t, &a_vals, &x_vals);
        t.backward(root);
        let ga = t.adjoint(a).to_vec();
        let gx = t.adjoint(x).to_vec();

        let eval = |av: &[f64], xv: &[f64]| {
            let mut t = Tape::new();
            let (r, _, _) = build(&mut t, av, xv);
            t.scalar(r)
        };
        let eps = 1e-6;
        for k in 0..a_vals.len() {
            let mut p = a_vals;
            let mut m = a_vals;
            p[k] += eps;
            m[k] -= eps;
            let fd = (eval(&p, &x_vals) - eval(&m, &x_vals)) / (2.0 * eps);
            assert!((fd - ga[k]).abs() <= 1e-7 * (1.0 + fd.abs()), "a[{k}]: {fd} vs {}", ga[k]);
        }
        for k in 0..x_vals.len() {
            let mut p = x_vals;
            let mut m = x_vals;
            p[k] += eps;
            m[k] -= eps;
            let fd = (eval(&a_vals, &p) - eval(&a_vals, &m)) / (2.0 * eps);
            assert!((fd - gx[k]).abs() <= 1e-7 * (1.0 + fd.abs()), "x[{k}]: {fd} vs {}", gx[k]);
        }
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let mut t = Tape::new();
        let (root, a, _) = build(&mut t, &[0.5, -0.3, 0.2, 0.8, -0.6, 0.1], &[0.7, -1.1]);
        t.backward(root);
        let first = t.adjoint(a).to_vec();
        t.backward(root);
        assert_eq!(first, t.adjoint(a));
    }

    #[test]
    fn persistent_adjoint_accumulates_across_resets() {
        let mut t = Tape::new();
        let w = t.vector(&[1.0, 2.0]);
        t.freeze();
        for x in [[1.0, 0.0], [0.0, 3.0]] {
            t.reset();
            let xv = t.vector(&x);
            let y = t.dot(w, xv);
            t.accumulate(y, 2.0);
        }
        assert_eq!(t.persistent_adjoint(), &[2.0, 6.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(0.0);
        let y = t.map(x, Unary::Abs);
        t.backward(y);
        assert_eq!(t.adjoint(x), &[0.0]);
    }
}
