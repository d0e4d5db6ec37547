//! KKT system of the local QP, solved by block elimination with a
//! block-tridiagonal Cholesky factor of `G H^-1 G^T`.
//!
//! Stage `s` owns the variables `w_s = (u~_s, z~_{s+1})` and the rows
//! `[active input rows; dynamics rows]`. `D_s` acts on `w_s`, `C_s` on
//! `w_{s-1}`:
//!
//! ```text
//! D_s = [ E_s    0 ]      C_s = [ F_s   0  ]
//!       [ B_s   -I ]            [ 0    A_s ]
//! ```
//!
//! `E_s` holds a one per pinned or tied channel, `F_s` a minus one per tied
//! channel (the tie partner at stage `s - 1`).

use nalgebra::{Cholesky, DMatrix, DVector};

use super::active_set::{ActiveSet, StageRow};
use super::qp::LocalQp;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KktError {
    #[error("active set does not match the QP dimensions")]
    RankDeficientActiveSet,
    #[error("non-positive Cholesky pivot in stage {stage}")]
    CholeskyBreakdown { stage: usize },
}

/// Factorized KKT system for one local QP and active set.
#[derive(Debug, Clone)]
pub struct KktFactor {
    n: usize,
    m: usize,
    horizon: usize,
    rows: Vec<Vec<(usize, StageRow)>>,
    row_offsets: Vec<usize>,
    d: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    h: Vec<DVector<f64>>,
    hinv: Vec<DVector<f64>>,
    l_diag: Vec<DMatrix<f64>>,
    l_sub: Vec<DMatrix<f64>>,
}

/// Solution of the local QP.
#[derive(Debug, Clone)]
pub struct KktSolution {
    /// Stage-major `(u~_0, z~_1, .., u~_{N-1}, z~_N)`.
    pub xi: Vec<f64>,
    /// Multipliers, stage by stage, active rows before dynamics rows.
    pub nu: Vec<f64>,
    /// Input part of `xi`, `N m` values.
    pub direction: Vec<f64>,
    /// Relative KKT residual after refinement.
    pub residual: f64,
}

impl KktFactor {
    pub fn new(qp: &LocalQp, act: &ActiveSet) -> Result<KktFactor, KktError> {
        let (n, m, nh) = (qp.n, qp.m, qp.horizon);
        let layout = act.layout();
        if layout.m != m || layout.horizon != nh {
            return Err(KktError::RankDeficientActiveSet);
        }
        let p = m + n;
        let mut rows = Vec::with_capacity(nh);
        let mut row_offsets = Vec::with_capacity(nh + 1);
        let mut d = Vec::with_capacity(nh);
        let mut c = Vec::with_capacity(nh);
        let mut h = Vec::with_capacity(nh);
        let mut hinv = Vec::with_capacity(nh);
        let mut off = 0;
        for s in 0..nh {
            let r: Vec<(usize, StageRow)> = (0..m)
                .filter_map(|j| act.stage_row(j, s).map(|row| (j, row)))
                .collect();
            if s == 0 && r.iter().any(|&(_, row)| row == StageRow::Tie) {
                return Err(KktError::RankDeficientActiveSet);
            }
            let a = r.len();
            let rs = a + n;
            let mut ds = DMatrix::zeros(rs, p);
            let mut cs = DMatrix::zeros(rs, p);
            for (i, &(j, row)) in r.iter().enumerate() {
                ds[(i, j)] = 1.0;
                if row == StageRow::Tie {
                    cs[(i, j)] = -1.0;
                }
            }
            let bk = qp.b_k(s);
            let ak = qp.a_k(s);
            for i in 0..n {
                for l in 0..m {
                    ds[(a + i, l)] = bk[i * m + l];
                }
                ds[(a + i, m + i)] = -1.0;
                if s > 0 {
                    for l in 0..n {
                        cs[(a + i, m + l)] = ak[i * n + l];
                    }
                }
            }
            let mut hs = DVector::zeros(p);
            for j in 0..m {
                hs[j] = qp.hu[s * m + j];
            }
            for i in 0..n {
                hs[m + i] = qp.hz[s * n + i];
            }
            if hs.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(KktError::CholeskyBreakdown { stage: s });
            }
            hinv.push(hs.map(|x| 1.0 / x));
            h.push(hs);
            row_offsets.push(off);
            off += rs;
            rows.push(r);
            d.push(ds);
            c.push(cs);
        }
        row_offsets.push(off);

        let mut f = KktFactor {
            n,
            m,
            horizon: nh,
            rows,
            row_offsets,
            d,
            c,
            h,
            hinv,
            l_diag: Vec::with_capacity(nh),
            l_sub: Vec::with_capacity(nh),
        };
        f.factorize()?;
        Ok(f)
    }

    fn scaled(mat: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
        let mut out = mat.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= diag[j];
        }
        out
    }

    fn factorize(&mut self) -> Result<(), KktError> {
        for s in 0..self.horizon {
            let dh = Self::scaled(&self.d[s], &self.hinv[s]);
            let mut mss = &dh * self.d[s].transpose();
            let sub = if s > 0 {
                let ch = Self::scaled(&self.c[s], &self.hinv[s - 1]);
                mss += &ch * self.c[s].transpose();
                let msub = &ch * self.d[s - 1].transpose();
                // L_sub = M_sub L_{s-1}^{-T}
                let lt = self.l_diag[s - 1]
                    .solve_lower_triangular(&msub.transpose())
                    .ok_or(KktError::CholeskyBreakdown { stage: s - 1 })?;
                let lsub = lt.transpose();
                mss -= &lsub * lsub.transpose();
                lsub
            } else {
                DMatrix::zeros(mss.nrows(), 0)
            };
            let chol = Cholesky::new(mss).ok_or(KktError::CholeskyBreakdown { stage: s })?;
            let l = chol.unpack();
            if l.diagonal().iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(KktError::CholeskyBreakdown { stage: s });
            }
            self.l_diag.push(l);
            self.l_sub.push(sub);
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Total number of equality rows.
    pub fn row_count(&self) -> usize {
        self.row_offsets[self.horizon]
    }

    /// Number of variables, `N (m + n)`.
    pub fn var_count(&self) -> usize {
        self.horizon * (self.m + self.n)
    }

    /// Active input rows of stage `s` as `(channel, kind)`.
    pub fn stage_rows(&self, s: usize) -> &[(usize, StageRow)] {
        &self.rows[s]
    }

    fn stage_vec(&self, x: &[f64], s: usize) -> DVector<f64> {
        let p = self.m + self.n;
        DVector::from_column_slice(&x[s * p..(s + 1) * p])
    }

    fn stage_nu(&self, nu: &[f64], s: usize) -> DVector<f64> {
        DVector::from_column_slice(&nu[self.row_offsets[s]..self.row_offsets[s + 1]])
    }

    /// `G x`.
    pub fn mul_g(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.row_count()];
        for s in 0..self.horizon {
            let mut r = &self.d[s] * self.stage_vec(x, s);
            if s > 0 {
                r += &self.c[s] * self.stage_vec(x, s - 1);
            }
            out[self.row_offsets[s]..self.row_offsets[s + 1]].copy_from_slice(r.as_slice());
        }
        out
    }

    /// `G^T nu`.
    pub fn mul_gt(&self, nu: &[f64]) -> Vec<f64> {
        let p = self.m + self.n;
        let mut out = vec![0.0; self.var_count()];
        for s in 0..self.horizon {
            let ns = self.stage_nu(nu, s);
            let mut r = self.d[s].tr_mul(&ns);
            if s + 1 < self.horizon {
                r += self.c[s + 1].tr_mul(&self.stage_nu(nu, s + 1));
            }
            out[s * p..(s + 1) * p].copy_from_slice(r.as_slice());
        }
        out
    }

    fn mul_h(&self, x: &[f64]) -> Vec<f64> {
        let p = self.m + self.n;
        let mut out = vec![0.0; x.len()];
        for s in 0..self.horizon {
            for i in 0..p {
                out[s * p + i] = self.h[s][i] * x[s * p + i];
            }
        }
        out
    }

    fn mul_hinv(&self, x: &[f64]) -> Vec<f64> {
        let p = self.m + self.n;
        let mut out = vec![0.0; x.len()];
        for s in 0..self.horizon {
            for i in 0..p {
                out[s * p + i] = self.hinv[s][i] * x[s * p + i];
            }
        }
        out
    }

    /// Solves `L L^T nu = rhs` with the block factor.
    pub fn solve_schur(&self, rhs: &[f64]) -> Vec<f64> {
        let nh = self.horizon;
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(nh);
        for s in 0..nh {
            let mut b = self.stage_nu(rhs, s);
            if s > 0 {
                b -= &self.l_sub[s] * &y[s - 1];
            }
            self.l_diag[s].solve_lower_triangular_mut(&mut b);
            y.push(b);
        }
        let mut out = vec![0.0; self.row_count()];
        let mut next: Option<DVector<f64>> = None;
        for s in (0..nh).rev() {
            let mut b = y[s].clone();
            if let Some(nx) = &next {
                b -= self.l_sub[s + 1].tr_mul(nx);
            }
            self.l_diag[s].tr_solve_lower_triangular_mut(&mut b);
            out[self.row_offsets[s]..self.row_offsets[s + 1]].copy_from_slice(b.as_slice());
            next = Some(b);
        }
        out
    }

    /// Solves `[H G^T; G 0] [xi; nu] = [r1; r2]`.
    pub fn solve(&self, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hr1 = self.mul_hinv(r1);
        let mut rhs = self.mul_g(&hr1);
        for (a, b) in rhs.iter_mut().zip(r2) {
            *a -= b;
        }
        let nu = self.solve_schur(&rhs);
        let gt = self.mul_gt(&nu);
        let t: Vec<f64> = r1.iter().zip(&gt).map(|(a, b)| a - b).collect();
        (self.mul_hinv(&t), nu)
    }

    /// Residual `[r1 - H xi - G^T nu; r2 - G xi]`.
    pub fn residual(&self, r1: &[f64], r2: &[f64], xi: &[f64], nu: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hx = self.mul_h(xi);
        let gt = self.mul_gt(nu);
        let top = (0..r1.len()).map(|i| r1[i] - hx[i] - gt[i]).collect();
        let gx = self.mul_g(xi);
        let bot = (0..r2.len()).map(|i| r2[i] - gx[i]).collect();
        (top, bot)
    }

    /// Collective linear term `f` of the QP in `xi` ordering.
    pub fn linear_term(&self, qp: &LocalQp) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut f = Vec::with_capacity(self.var_count());
        for s in 0..self.horizon {
            f.extend_from_slice(&qp.e[s * m..(s + 1) * m]);
            f.extend_from_slice(&qp.f[s * n..(s + 1) * n]);
        }
        f
    }

    /// Input-row part of `G^T nu` restricted to the inputs, `N m` values.
    pub fn constraint_forces(&self, nu: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; self.horizon * m];
        for s in 0..self.horizon {
            for (i, &(j, row)) in self.rows[s].iter().enumerate() {
                let v = nu[self.row_offsets[s] + i];
                out[s * m + j] += v;
                if row == StageRow::Tie {
                    out[(s - 1) * m + j] -= v;
                }
            }
        }
        out
    }

    /// Input components of `xi`.
    pub fn direction(&self, xi: &[f64]) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut out = Vec::with_capacity(self.horizon * m);
        for s in 0..self.horizon {
            out.extend_from_slice(&xi[s * (m + n)..s * (m + n) + m]);
        }
        out
    }

    /// Dense `G`.
    pub fn dense_g(&self) -> DMatrix<f64> {
        let p = self.m + self.n;
        let mut g = DMatrix::zeros(self.row_count(), self.var_count());
        for s in 0..self.horizon {
            let r0 = self.row_offsets[s];
            g.view_mut((r0, s * p), self.d[s].shape()).copy_from(&self.d[s]);
            if s > 0 {
                g.view_mut((r0, (s - 1) * p), self.c[s].shape())
                    .copy_from(&self.c[s]);
            }
        }
        g
    }

    /// Dense diagonal of `H`.
    pub fn dense_h(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.var_count());
        for hs in &self.h {
            v.extend(hs.iter());
        }
        DVector::from_vec(v)
    }

    /// Dense `G H^-1 G^T`.
    pub fn dense_schur(&self) -> DMatrix<f64> {
        let g = self.dense_g();
        let hinv = self.dense_h().map(|x| 1.0 / x);
        let gh = Self::scaled(&g, &hinv);
        &gh * g.transpose()
    }

    /// Dense assembly of the block factor `L`.
    pub fn dense_l(&self) -> DMatrix<f64> {
        let nr = self.row_count();
        let mut l = DMatrix::zeros(nr, nr);
        for s in 0..self.horizon {
            let r0 = self.row_offsets[s];
            l.view_mut((r0, r0), self.l_diag[s].shape())
                .copy_from(&self.l_diag[s]);
            if s > 0 {
                let c0 = self.row_offsets[s - 1];
                l.view_mut((r0, c0), self.l_sub[s].shape())
                    .copy_from(&self.l_sub[s]);
            }
        }
        l
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Solves the local QP for the given active set. `maxiterref` refinement
/// passes are applied to the full KKT residual.
pub fn solve_kkt(qp: &LocalQp, act: &ActiveSet, maxiterref: usize) -> Result<(KktFactor, KktSolution), KktError> {
    let fac = KktFactor::new(qp, act)?;
    let f = fac.linear_term(qp);
    let r1: Vec<f64> = f.iter().map(|x| -x).collect();
    let r2 = vec![0.0; fac.row_count()];
    let (mut xi, mut nu) = fac.solve(&r1, &r2);
    let scale = 1.0 + norm_inf(&f);
    let mut residual = {
        let (a, b) = fac.residual(&r1, &r2, &xi, &nu);
        norm_inf(&a).max(norm_inf(&b)) / scale
    };
    for _ in 0..maxiterref {
        let (a, b) = fac.residual(&r1, &r2, &xi, &nu);
        let (dx, dn) = fac.solve(&a, &b);
        let xi2: Vec<f64> = xi.iter().zip(&dx).map(|(x, d)| x + d).collect();
        let nu2: Vec<f64> = nu.iter().zip(&dn).map(|(x, d)| x + d).collect();
        let (a2, b2) = fac.residual(&r1, &r2, &xi2, &nu2);
        let res2 = norm_inf(&a2).max(norm_inf(&b2)) / scale;
        if res2 <= residual {
            xi = xi2;
            nu = nu2;
            residual = res2;
        }
    }
    let direction = fac.direction(&xi);
    Ok((
        fac,
        KktSolution {
            xi,
            nu,
            direction,
            residual,
        },
    ))
}

/// Reference solve of the full KKT matrix by dense LU.
pub fn dense_kkt_solve(qp: &LocalQp, act: &ActiveSet) -> Option<(Vec<f64>, Vec<f64>)> {
    let fac = KktFactor::new(qp, act).ok()?;
    let g = fac.dense_g();
    let h = fac.dense_h();
    let (nv, nr) = (fac.var_count(), fac.row_count());
    let mut k = DMatrix::zeros(nv + nr, nv + nr);
    for i in 0..nv {
        k[(i, i)] = h[i];
    }
    k.view_mut((nv, 0), (nr, nv)).copy_from(&g);
    k.view_mut((0, nv), (nv, nr)).copy_from(&g.transpose());
    let mut rhs = DVector::zeros(nv + nr);
    for (i, x) in fac.linear_term(qp).into_iter().enumerate() {
        rhs[i] = -x;
    }
    let sol = k.lu().solve(&rhs)?;
    Some((sol.as_slice()[..nv].to_vec(), sol.as_slice()[nv..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ftocp::{Constraint, ConstraintLayout, Side};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize, nh: usize) -> LocalQp {
        let mut qp = LocalQp::zeros(n, m, nh);
        for x in qp.a.iter_mut().chain(qp.b.iter_mut()) {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in qp.e.iter_mut().chain(qp.f.iter_mut()) {
            *x = rng.random_range(-2.0..2.0);
        }
        for x in qp.hu.iter_mut().chain(qp.hz.iter_mut()) {
            *x = rng.random_range(0.1..3.0);
        }
        qp
    }

    #[test]
    fn empty_set_single_stage_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qp = random_qp(&mut rng, 5, 2, 1);
        let act = ActiveSet::new(ConstraintLayout { horizon: 1, m: 2 });
        let (_, sol) = solve_kkt(&qp, &act, 1).unwrap();
        let (xi, _) = dense_kkt_solve(&qp, &act).unwrap();
        for (a, b) in sol.xi.iter().zip(&xi) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn active_bound_gives_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qp = random_qp(&mut rng, 5, 2, 4);
        let layout = ConstraintLayout { horizon: 4, m: 2 };
        let act = ActiveSet::from_ids(layout, [layout.id(Constraint::Bound { k: 0, j: 1, side: Side::Upper })]);
        let (_, sol) = solve_kkt(&qp, &act, 0).unwrap();
        assert_eq!(sol.direction[1], 0.0);
    }

    #[test]
    fn factor_reproduces_schur_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qp = random_qp(&mut rng, 5, 2, 6);
        let layout = ConstraintLayout { horizon: 6, m: 2 };
        let ids = (0..layout.count()).filter(|_| rng.random_bool(0.3)).collect::<Vec<_>>();
        let act = ActiveSet::from_ids(layout, ids);
        let fac = KktFactor::new(&qp, &act).unwrap();
        let m = fac.dense_schur();
        let l = fac.dense_l();
        let diff = (&l * l.transpose() - &m).abs().max();
        assert!(diff <= 1e-10 * m.abs().max());
    }
}
