//! The potential network recorded on a [`Tape`]: the same forward, backprop
//! and trace recurrences as [`crate::nn_potential`], expressed as tape
//! primitives so the whole characteristic integration can be differentiated
//! with respect to θ.

use super::tape::{Tape, Unary, Var};
use crate::nn_potential::{Architecture, PotentialParams};

/// Tape leaves holding θ, recorded in flat-layout order so the persistent
/// adjoint of the tape is the gradient in [`PotentialParams`] layout.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub arch: Architecture,
    pub k: Vec<Var>,
    pub bias: Vec<Var>,
    pub w: Var,
    pub a: Var,
    pub c: Var,
    pub b: Var,
}

/// Φ together with its input derivatives, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct PotentialVars {
    pub phi: Var,
    /// ∇ₓΦ (d entries).
    pub grad_x: Var,
    /// ∂ₜΦ (scalar).
    pub dt: Var,
    /// ΔₓΦ (scalar).
    pub laplacian: Var,
}

impl ParamVars {
    /// Records θ as the first leaves of an empty tape.
    pub fn register(tape: &mut Tape, theta: &PotentialParams) -> Self {
        assert!(tape.is_empty(), "parameters must be the first leaves on the tape");
        let arch = *theta.arch();
        let (m, n) = (arch.width, arch.input_dim());
        let k = (0..=arch.depth)
            .map(|i| tape.leaf(theta.k(i), m, if i == 0 { n } else { m }))
            .collect();
        let bias = (0..=arch.depth).map(|i| tape.vector(theta.bias(i))).collect();
        let w = tape.vector(theta.w());
        let a = tape.leaf(theta.a(), n, n);
        let c = tape.vector(theta.c());
        let b = tape.constant(theta.b());
        ParamVars {
            arch,
            k,
            bias,
            w,
            a,
            c,
            b,
        }
    }

    /// Replaces the leaf values with a new θ of the same architecture.
    pub fn load(&self, tape: &mut Tape, theta: &PotentialParams) {
        assert_eq!(*theta.arch(), self.arch);
        for i in 0..=self.arch.depth {
            tape.set_leaf(self.k[i], theta.k(i));
            tape.set_leaf(self.bias[i], theta.bias(i));
        }
        tape.set_leaf(self.w, theta.w());
        tape.set_leaf(self.a, theta.a());
        tape.set_leaf(self.c, theta.c());
        tape.set_leaf(self.b, &[theta.b()]);
    }

    fn hidden(&self, tape: &mut Tape, s: Var) -> (Vec<Var>, Vec<Var>) {
        let depth = self.arch.depth;
        let mut pre = Vec::with_capacity(depth + 1);
        let mut u = Vec::with_capacity(depth + 1);
        let k0s = tape.matvec(self.k[0], s);
        let p0 = tape.add(k0s, self.bias[0]);
        pre.push(p0);
        u.push(tape.map(p0, Unary::Sigma));
        for i in 1..=depth {
            let ku = tape.matvec(self.k[i], u[i - 1]);
            let pi = tape.add(ku, self.bias[i]);
            let act = tape.map(pi, Unary::Sigma);
            pre.push(pi);
            u.push(tape.axpy(u[i - 1], act, self.arch.h));
        }
        (pre, u)
    }

    fn phi_from(&self, tape: &mut Tape, s: Var, top: Var) -> Var {
        let nw = tape.dot(self.w, top);
        let as_ = tape.matvec(self.a, s);
        let quad = tape.dot(s, as_);
        let lin = tape.dot(self.c, s);
        let t1 = tape.add(nw, quad);
        let t2 = tape.add(t1, lin);
        tape.add(t2, self.b)
    }

    /// Φ(s) only.
    pub fn record_phi(&self, tape: &mut Tape, s: Var) -> Var {
        let (_, u) = self.hidden(tape, s);
        self.phi_from(tape, s, u[self.arch.depth])
    }

    /// Φ(s), ∇ₛΦ split into space and time, and ΔₓΦ.
    pub fn record(&self, tape: &mut Tape, s: Var) -> PotentialVars {
        let arch = self.arch;
        let (d, depth, h) = (arch.d, arch.depth, arch.h);
        let (pre, u) = self.hidden(tape, s);
        let phi = self.phi_from(tape, s, u[depth]);

        // back-propagation of w: z[i] for i = 0..=depth+1, z[depth+1] = w
        let slope: Vec<Var> = pre.iter().map(|&p| tape.map(p, Unary::SigmaD1)).collect();
        let mut z = vec![self.w; depth + 2];
        for i in (1..=depth).rev() {
            let gz = tape.mul(slope[i], z[i + 1]);
            let kt = tape.mat_t_vec(self.k[i], gz);
            z[i] = tape.axpy(z[i + 1], kt, h);
        }
        let gz0 = tape.mul(slope[0], z[1]);
        z[0] = tape.mat_t_vec(self.k[0], gz0);
        let as_ = tape.matvec(self.a, s);
        let ats = tape.mat_t_vec(self.a, s);
        let g1 = tape.add(z[0], as_);
        let g2 = tape.add(g1, ats);
        let grad = tape.add(g2, self.c);
        let grad_x = tape.slice(grad, 0, d);
        let dt = tape.slice(grad, d, 1);

        // trace recurrence
        let k0e = tape.leading_cols(self.k[0], d);
        let curv0 = tape.map(pre[0], Unary::SigmaD2);
        let wz0 = tape.mul(curv0, z[1]);
        let sq0 = tape.mul(k0e, k0e);
        let rs0 = tape.row_sum(sq0);
        let mut lap = tape.dot(wz0, rs0);
        let mut jac = tape.row_scale(slope[0], k0e);
        for i in 1..=depth {
            let kj = tape.matmat(self.k[i], jac);
            let curv = tape.map(pre[i], Unary::SigmaD2);
            let wz = tape.mul(curv, z[i + 1]);
            let sq = tape.mul(kj, kj);
            let rs = tape.row_sum(sq);
            let ti = tape.dot(wz, rs);
            lap = tape.axpy(lap, ti, h);
            if i < depth {
                let step = tape.row_scale(slope[i], kj);
                jac = tape.axpy(jac, step, h);
            }
        }
        let diag = tape.diag_sum(self.a, d);
        let laplacian = tape.axpy(lap, diag, 2.0);
        PotentialVars {
            phi,
            grad_x,
            dt,
            laplacian,
        }
    }
}
