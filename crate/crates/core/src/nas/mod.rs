//! Nonlinear Active Set solver for the FTOCP.
//!
//! Every iterate stays feasible: directions come from an equality QP over the
//! active constraints, steps are capped by the first blocking constraint and
//! accepted only if they lower the true nonlinear cost.
//!
//! Multiplier convention: with the KKT system `H xi + G^T nu = -f`, the input
//! rows of `G^T nu` are split into `sum mu_l grad g_l` over the active
//! constraints `g_l <= 0`. At a constrained minimum all `mu_l >= 0`; a
//! constraint is released when `mu_l < -dualtol`.

mod active_set;
mod kkt;
mod line_search;
mod qp;

pub use active_set::{ActiveSet, InsertOutcome, StageRow};
pub use kkt::{dense_kkt_solve, solve_kkt, KktError, KktFactor, KktSolution};
pub use line_search::{alpha_max, backtracking, Backtrack, MAX_TRIALS};
pub use qp::{build_local_qp, build_local_qp_into, LocalQp, MIN_CURVATURE};

use crate::dynamics::Workspace;
use crate::ftocp::FtocpInstance;

/// Constraints with `g >= -ACTIVE_TOL` count as active at the start.
pub const ACTIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NasConfigError {
    #[error("{0} out of range")]
    OutOfRange(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NasConfig {
    pub maxit: usize,
    pub maxproj: usize,
    pub dualtol: f64,
    pub maxiterref: usize,
    pub backtrack: f64,
    pub decrease: f64,
    pub finitediff: f64,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            maxit: 10,
            maxproj: 20,
            dualtol: 1e-10,
            maxiterref: 1,
            backtrack: 0.5,
            decrease: 1e-4,
            finitediff: 1e-6,
        }
    }
}

impl NasConfig {
    pub fn validate(&self) -> Result<(), NasConfigError> {
        if !(self.dualtol > 0.0 && self.dualtol.is_finite()) {
            return Err(NasConfigError::OutOfRange("dualtol"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(NasConfigError::OutOfRange("backtrack"));
        }
        if !(self.decrease > 0.0 && self.decrease < 1.0) {
            return Err(NasConfigError::OutOfRange("decrease"));
        }
        if !(self.finitediff > 0.0 && self.finitediff < 1.0) {
            return Err(NasConfigError::OutOfRange("finitediff"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Local QP stationary and no constraint releasable.
    KktSatisfied,
    MaxIterations,
    /// No examined step lowered the cost.
    NoProgress,
    /// Rollout, linearization or factorization failed; best iterate returned.
    Breakdown,
}

#[derive(Debug, Clone)]
pub struct NasResult {
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Active constraint ids at exit.
    pub active: Vec<usize>,
    /// Cost of the start point followed by the cost after each iteration.
    pub cost_history: Vec<f64>,
    /// Largest constraint value, same indexing as `cost_history`.
    pub residual_history: Vec<f64>,
    /// Line-search projections per iteration.
    pub projections: Vec<usize>,
}

/// Shifted previous solution with its last input repeated, made feasible;
/// zeros without a previous solution.
pub fn warm_start(prev: Option<&NasResult>, inst: &FtocpInstance) -> Vec<f64> {
    let m = inst.m();
    let nh = inst.horizon();
    let mut u = vec![0.0; nh * m];
    if let Some(p) = prev {
        let pn = p.u.len() / m;
        if pn > 0 && p.u.len() == pn * m {
            for k in 0..nh {
                let src = (k + 1).min(pn - 1);
                u[k * m..(k + 1) * m].copy_from_slice(&p.u[src * m..(src + 1) * m]);
            }
        }
    }
    inst.project_feasible_in_place(&mut u);
    u
}

/// Projects `d` onto the active set extended by `hit`.
pub fn project_direction(d: &mut [f64], hit: usize, act: &ActiveSet) {
    let mut a = act.clone();
    a.insert(hit);
    a.project(d);
}

/// Removes every active constraint whose multiplier is below `-dualtol`.
/// Returns the released ids.
pub fn release_constraints(mus: &[(usize, f64)], act: &mut ActiveSet, dualtol: f64) -> Vec<usize> {
    let out: Vec<usize> = mus.iter().filter(|x| x.1 < -dualtol).map(|x| x.0).collect();
    for &id in &out {
        act.remove(id);
    }
    out
}

/// Constraints with `g >= -ACTIVE_TOL`, inserted in id order.
pub fn initial_active_set(inst: &FtocpInstance, u: &[f64]) -> ActiveSet {
    let layout = inst.layout();
    let vals = inst.constraint_values(u);
    ActiveSet::from_ids(
        layout,
        vals.iter()
            .enumerate()
            .filter(|(_, g)| **g >= -ACTIVE_TOL)
            .map(|(i, _)| i),
    )
}

struct Direction {
    d: Vec<f64>,
    zd: Vec<f64>,
    slope: f64,
    mus: Vec<(usize, f64)>,
}

/// NAS solver owning its workspaces.
#[derive(Debug, Clone)]
pub struct NasSolver {
    pub cfg: NasConfig,
    ws: Workspace,
    qp: LocalQp,
    next: Vec<f64>,
}

impl NasSolver {
    pub fn new(cfg: NasConfig) -> NasSolver {
        NasSolver {
            cfg,
            ws: Workspace::new(0, 0),
            qp: LocalQp::zeros(0, 0, 0),
            next: Vec::new(),
        }
    }

    fn prepare(&mut self, inst: &FtocpInstance) {
        let (n, m, nh) = (inst.n(), inst.m(), inst.horizon());
        if self.qp.n != n || self.qp.m != m || self.qp.horizon != nh {
            self.qp = LocalQp::zeros(n, m, nh);
        }
        self.ws = Workspace::for_model(&inst.model);
        self.next.resize(n, 0.0);
    }

    fn evaluate(&mut self, inst: &FtocpInstance, u: &[f64], z: &mut [f64]) -> Option<f64> {
        inst.rollout_with(u, &mut self.ws, z).ok()?;
        let j = inst.total_cost(u, z);
        j.is_finite().then_some(j)
    }

    fn direction(&self, inst: &FtocpInstance, act: &ActiveSet) -> Result<Direction, KktError> {
        let (fac, sol) = solve_kkt(&self.qp, act, self.cfg.maxiterref)?;
        let mut d = sol.direction;
        act.project(&mut d);
        let mut zd = vec![0.0; inst.horizon() * inst.n()];
        self.qp.propagate(&d, &mut zd);
        let slope = self.qp.linear_slope(&d, &zd);
        let mus = act.multipliers(&fac.constraint_forces(&sol.nu), inst.ts());
        Ok(Direction { d, zd, slope, mus })
    }

    /// Runs the solver from the feasible start `u0`.
    pub fn solve(&mut self, inst: &FtocpInstance, u0: &[f64]) -> NasResult {
        self.prepare(inst);
        let cfg = self.cfg.clone();
        let (n, m, nh) = (inst.n(), inst.m(), inst.horizon());
        let mut u = u0.to_vec();
        let mut z = vec![0.0; (nh + 1) * n];
        let mut act = initial_active_set(inst, &u);
        let Some(mut jcur) = self.evaluate(inst, &u, &mut z) else {
            return result(u, z, f64::INFINITY, 0, Termination::Breakdown, &act, vec![f64::INFINITY], vec![inst.max_residual(u0)], vec![]);
        };
        let mut cost_history = vec![jcur];
        let mut residual_history = vec![inst.max_residual(&u)];
        let mut projections = Vec::new();
        let stat_tol = |j: f64| 1e-12 * (1.0 + j.abs());
        let mut zt = vec![0.0; (nh + 1) * n];

        for it in 1..=cfg.maxit {
            if build_local_qp_into(inst, &u, &z, cfg.finitediff, &mut self.ws, &mut self.next, &mut self.qp).is_err() {
                return result(u, z, jcur, it, Termination::Breakdown, &act, cost_history, residual_history, projections);
            }
            let base = match self.direction(inst, &act) {
                Ok(d) => d,
                Err(_) => return result(u, z, jcur, it, Termination::Breakdown, &act, cost_history, residual_history, projections),
            };
            let stationary = -base.slope <= stat_tol(jcur);
            let mut neg: Vec<(usize, f64)> = base.mus.iter().copied().filter(|x| x.1 < -cfg.dualtol).collect();
            let mut dir = None;
            if !neg.is_empty() {
                neg.sort_by(|a, b| a.1.total_cmp(&b.1));
                let candidates = if neg.len() > 1 { vec![neg.clone(), vec![neg[0]]] } else { vec![neg.clone()] };
                for cand in candidates {
                    let mut a2 = act.clone();
                    let released = release_constraints(&cand, &mut a2, cfg.dualtol);
                    let Ok(d2) = self.direction(inst, &a2) else { continue };
                    if -d2.slope <= stat_tol(jcur) {
                        continue;
                    }
                    let ok = released.iter().all(|&id| {
                        let c = inst.layout().decode(id);
                        inst.constraint_value(c, &u) < -ACTIVE_TOL || inst.constraint_slope(c, &d2.d) <= 0.0
                    });
                    if ok {
                        act = a2;
                        dir = Some(d2);
                        break;
                    }
                }
            }
            let dir = match dir {
                Some(d) => d,
                None if stationary => {
                    return result(u, z, jcur, it, Termination::KktSatisfied, &act, cost_history, residual_history, projections);
                }
                None => base,
            };

            // line search with projected continuation
            let set_before = act.ids();
            let mut x = u.clone();
            let mut jx = jcur;
            let mut w = vec![0.0; nh * m];
            let mut zw = vec![0.0; nh * n];
            let Direction { d: mut dcur, zd: mut zdcur, slope: mut slope_cur, .. } = dir;
            let mut nproj = 0;
            let mut moved = false;
            let mut best_z = z.clone();
            let mut trial = vec![0.0; nh * m];
            loop {
                if !(slope_cur < -stat_tol(jx)) {
                    break;
                }
                let (amax, hit) = alpha_max(inst, &act, &x, &dcur);
                if let Some(h) = hit {
                    if amax <= 0.0 {
                        // already on the constraint: fix the set, no step taken
                        if act.insert(h) == InsertOutcome::Added {
                            nproj += 1;
                            act.project(&mut dcur);
                            self.qp.propagate(&dcur, &mut zdcur);
                            slope_cur = self.qp.model_slope(&w, &zw, &dcur, &zdcur);
                            continue;
                        }
                        break;
                    }
                }
                let mut first: Option<(f64, Option<f64>, Vec<f64>, Vec<f64>)> = None;
                if let (Some(h), true) = (hit, nproj < cfg.maxproj) {
                    for i in 0..trial.len() {
                        trial[i] = x[i] + amax * dcur[i];
                    }
                    inst.project_feasible_in_place(&mut trial);
                    let jt = self.evaluate(inst, &trial, &mut zt);
                    if let Some(jt) = jt {
                        if jt - jx <= cfg.decrease * amax * slope_cur && jt < jx {
                            x.copy_from_slice(&trial);
                            jx = jt;
                            best_z.copy_from_slice(&zt);
                            moved = true;
                            act.insert(h);
                            for i in 0..w.len() {
                                w[i] += amax * dcur[i];
                                dcur[i] *= 1.0 - amax;
                            }
                            for i in 0..zw.len() {
                                zw[i] += amax * zdcur[i];
                            }
                            act.project(&mut dcur);
                            self.qp.propagate(&dcur, &mut zdcur);
                            slope_cur = self.qp.model_slope(&w, &zw, &dcur, &zdcur);
                            nproj += 1;
                            continue;
                        }
                    }
                    first = Some((amax, jt, trial.clone(), zt.clone()));
                }
                // backtrack from amax, keeping the best trial point
                let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
                let mut best_j = f64::INFINITY;
                let bt = backtracking(jx, slope_cur, amax, cfg.backtrack, cfg.decrease, |a| {
                    let (jt, ut, ztt) = match &first {
                        Some((a0, jt, ut, ztt)) if *a0 == a => (*jt, ut.clone(), ztt.clone()),
                        _ => {
                            let mut ut = vec![0.0; nh * m];
                            for i in 0..ut.len() {
                                ut[i] = x[i] + a * dcur[i];
                            }
                            inst.project_feasible_in_place(&mut ut);
                            let mut ztt = vec![0.0; (nh + 1) * n];
                            let jt = self.evaluate(inst, &ut, &mut ztt);
                            (jt, ut, ztt)
                        }
                    };
                    if let Some(j) = jt {
                        if j < best_j {
                            best_j = j;
                            best = Some((a, ut, ztt));
                        }
                    }
                    jt
                });
                if let (Some((a, _)), Some((_, ut, ztt))) = (bt.best, best) {
                    x = ut;
                    jx = best_j;
                    best_z = ztt;
                    moved = true;
                    if let (Some(h), true) = (hit, a == amax) {
                        act.insert(h);
                    }
                }
                break;
            }
            projections.push(nproj);
            if !moved && act.ids() != set_before {
                // degenerate vertex: the set grew by zero-length blocks, recompute the direction
                cost_history.push(jcur);
                residual_history.push(inst.max_residual(&u));
                continue;
            }
            if !moved {
                return result(u, z, jcur, it, Termination::NoProgress, &act, cost_history, residual_history, projections);
            }
            u = x;
            z = best_z;
            jcur = jx;
            cost_history.push(jcur);
            residual_history.push(inst.max_residual(&u));
        }
        let it = cfg.maxit;
        result(u, z, jcur, it, Termination::MaxIterations, &act, cost_history, residual_history, projections)
    }
}

#[allow(clippy::too_many_arguments)]
fn result(
    u: Vec<f64>,
    z: Vec<f64>,
    cost: f64,
    iterations: usize,
    termination: Termination,
    act: &ActiveSet,
    cost_history: Vec<f64>,
    residual_history: Vec<f64>,
    projections: Vec<usize>,
) -> NasResult {
    NasResult {
        u,
        z,
        cost,
        iterations,
        termination,
        active: act.ids(),
        cost_history,
        residual_history,
        projections,
    }
}

/// One-shot solve with a fresh solver.
pub fn nas_solve(inst: &FtocpInstance, u0: &[f64], cfg: &NasConfig) -> NasResult {
    NasSolver::new(cfg.clone()).solve(inst, u0)
}
