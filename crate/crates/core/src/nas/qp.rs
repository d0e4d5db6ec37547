//! Local equality-constrained QP around the current iterate.

use crate::dynamics::{linearize_discrete_with, Workspace};
use crate::ftocp::{FtocpError, FtocpInstance};

/// Smallest curvature kept on the QP diagonal.
pub const MIN_CURVATURE: f64 = 1e-10;

/// Linearized dynamics and quadratic cost model of one NAS iteration.
///
/// Stage `k` holds `A_k` (n x n), `B_k` (n x m), the input gradient `e_k`,
/// the state gradient `f_{k+1}` and the diagonal curvatures of `u_k` and
/// `z_{k+1}`. Matrices are row-major.
#[derive(Debug, Clone)]
pub struct LocalQp {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
    pub f: Vec<f64>,
    pub hu: Vec<f64>,
    pub hz: Vec<f64>,
}

impl LocalQp {
    pub fn zeros(n: usize, m: usize, horizon: usize) -> LocalQp {
        LocalQp {
            n,
            m,
            horizon,
            a: vec![0.0; horizon * n * n],
            b: vec![0.0; horizon * n * m],
            e: vec![0.0; horizon * m],
            f: vec![0.0; horizon * n],
            hu: vec![0.0; horizon * m],
            hz: vec![0.0; horizon * n],
        }
    }

    pub fn a_k(&self, k: usize) -> &[f64] {
        &self.a[k * self.n * self.n..(k + 1) * self.n * self.n]
    }

    pub fn b_k(&self, k: usize) -> &[f64] {
        &self.b[k * self.n * self.m..(k + 1) * self.n * self.m]
    }

    /// State perturbations `z~_1 .. z~_N` (`N n` values) caused by input
    /// perturbations `d` under the linear model, starting from `z~_0 = 0`.
    pub fn propagate(&self, d: &[f64], zt: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        for k in 0..self.horizon {
            let a = self.a_k(k);
            let b = self.b_k(k);
            for i in 0..n {
                let mut acc = 0.0;
                if k > 0 {
                    let prev = &zt[(k - 1) * n..k * n];
                    for l in 0..n {
                        acc += a[i * n + l] * prev[l];
                    }
                }
                for l in 0..m {
                    acc += b[i * m + l] * d[k * m + l];
                }
                zt[k * n + i] = acc;
            }
        }
    }

    /// Directional derivative of the quadratic model at displacement `w`
    /// (with state response `zw`) along `d` (with state response `zd`).
    pub fn model_slope(&self, w: &[f64], zw: &[f64], d: &[f64], zd: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.horizon * self.m {
            s += (self.e[i] + self.hu[i] * w[i]) * d[i];
        }
        for i in 0..self.horizon * self.n {
            s += (self.f[i] + self.hz[i] * zw[i]) * zd[i];
        }
        s
    }

    /// Linear term of the model along `d`: `sum e^T d + f^T z~(d)`.
    pub fn linear_slope(&self, d: &[f64], zd: &[f64]) -> f64 {
        let s1: f64 = self.e.iter().zip(d).map(|(a, b)| a * b).sum();
        let s2: f64 = self.f.iter().zip(zd).map(|(a, b)| a * b).sum();
        s1 + s2
    }
}

/// Fills `qp` with the linearization of `inst` at inputs `u` and their rollout `z`.
pub fn build_local_qp_into(
    inst: &FtocpInstance,
    u: &[f64],
    z: &[f64],
    finitediff: f64,
    ws: &mut Workspace,
    next: &mut [f64],
    qp: &mut LocalQp,
) -> Result<(), FtocpError> {
    let (n, m) = (inst.n(), inst.m());
    for k in 0..inst.horizon() {
        let zk = &z[k * n..(k + 1) * n];
        let uk = &u[k * m..(k + 1) * m];
        linearize_discrete_with(
            &inst.model,
            zk,
            uk,
            &inst.integrator,
            finitediff,
            ws,
            next,
            &mut qp.a[k * n * n..(k + 1) * n * n],
            &mut qp.b[k * n * m..(k + 1) * n * m],
        )?;
        inst.input_gradient(k, uk, &mut qp.e[k * m..(k + 1) * m]);
        for j in 0..m {
            qp.hu[k * m + j] = (2.0 * inst.weights.r[j]).max(MIN_CURVATURE);
        }
        let zk1 = &z[(k + 1) * n..(k + 2) * n];
        inst.state_gradient(
            k,
            zk1,
            &mut qp.f[k * n..(k + 1) * n],
            &mut qp.hz[k * n..(k + 1) * n],
        );
        for h in &mut qp.hz[k * n..(k + 1) * n] {
            *h = h.max(MIN_CURVATURE);
        }
    }
    Ok(())
}

/// Builds the local QP at `(u, z)`; `z` is the rollout of `u`.
pub fn build_local_qp(
    inst: &FtocpInstance,
    u: &[f64],
    z: &[f64],
    finitediff: f64,
) -> Result<LocalQp, FtocpError> {
    let mut qp = LocalQp::zeros(inst.n(), inst.m(), inst.horizon());
    let mut ws = Workspace::for_model(&inst.model);
    let mut next = vec![0.0; inst.n()];
    build_local_qp_into(inst, u, z, finitediff, &mut ws, &mut next, &mut qp)?;
    Ok(qp)
}
