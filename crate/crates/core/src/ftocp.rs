//! The finite-time optimal control problem solved at every sampling instant:
//! stage costs, soft corridor penalty, input bounds and rate constraints.

use std::sync::Arc;

use thiserror::Error;

use crate::dynamics::{integrate_step_with, DynamicsError, IntegratorConfig, Workspace};
use crate::model::{ModelSpec, IA, IDELTA, IPHI, IV, IX, IY};
use crate::reference::{wrap_angle, DriveMode, RefPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FtocpError {
    #[error("input weights must be positive and state weights non-negative")]
    BadWeights,
    #[error("every input interval must be non-empty and contain 0 (channel {0})")]
    BadConstraints(usize),
    #[error("penalty slope and tolerance must be positive")]
    BadPenalty,
    #[error("expected {expected} values for {what}, got {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Input weights, one per input, all positive.
    pub r: Vec<f64>,
    /// State weights, one per state, all non-negative.
    pub q: Vec<f64>,
}

impl Weights {
    pub fn new(r: Vec<f64>, q: Vec<f64>) -> Result<Weights, FtocpError> {
        if r.iter().any(|&x| !(x > 0.0 && x.is_finite())) || q.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(FtocpError::BadWeights);
        }
        Ok(Weights { r, q })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputConstraints {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Rate limits in input units per second.
    pub du_min: Vec<f64>,
    pub du_max: Vec<f64>,
}

impl InputConstraints {
    pub fn new(
        u_min: Vec<f64>,
        u_max: Vec<f64>,
        du_min: Vec<f64>,
        du_max: Vec<f64>,
    ) -> Result<InputConstraints, FtocpError> {
        let m = u_min.len();
        for (what, v) in [("u_max", &u_max), ("du_min", &du_min), ("du_max", &du_max)] {
            if v.len() != m {
                return Err(FtocpError::Dimension {
                    what,
                    expected: m,
                    found: v.len(),
                });
            }
        }
        for j in 0..m {
            let ok = u_min[j] < 0.0 && 0.0 < u_max[j] && du_min[j] < 0.0 && 0.0 < du_max[j];
            let finite = [u_min[j], u_max[j], du_min[j], du_max[j]].iter().all(|x| x.is_finite());
            if !ok || !finite {
                return Err(FtocpError::BadConstraints(j));
            }
        }
        Ok(InputConstraints {
            u_min,
            u_max,
            du_min,
            du_max,
        })
    }

    /// Splits the stacked `[U_min; U_max; dU_min; dU_max]` vector.
    pub fn from_ucon(ucon: &[f64], m: usize) -> Result<InputConstraints, FtocpError> {
        if ucon.len() != 4 * m {
            return Err(FtocpError::Dimension {
                what: "Ucon",
                expected: 4 * m,
                found: ucon.len(),
            });
        }
        InputConstraints::new(
            ucon[..m].to_vec(),
            ucon[m..2 * m].to_vec(),
            ucon[2 * m..3 * m].to_vec(),
            ucon[3 * m..].to_vec(),
        )
    }

    pub fn to_ucon(&self) -> Vec<f64> {
        [&self.u_min, &self.u_max, &self.du_min, &self.du_max]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn m(&self) -> usize {
        self.u_min.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    /// Slope beyond the smoothing region, cost per metre.
    pub lambda: f64,
    /// Width of the cubic smoothing region, m.
    pub tau: f64,
}

impl PenaltyParams {
    pub fn new(lambda: f64, tau: f64) -> Result<PenaltyParams, FtocpError> {
        if !(lambda > 0.0 && tau > 0.0 && lambda.is_finite() && tau.is_finite()) {
            return Err(FtocpError::BadPenalty);
        }
        Ok(PenaltyParams { lambda, tau })
    }
}

/// Soft-constraint penalty with its first and second derivative.
///
/// Zero for `eps <= 0`, `lambda * eps^3 / (3 tau^2)` on `(0, tau)` and linear
/// with slope `lambda` beyond. The cubic joins the zero branch with matching
/// value, slope and curvature and the linear branch with matching value and
/// slope; the curvature jumps from `2 lambda / tau` to 0 at `eps = tau`.
pub fn penalty_with_derivatives(eps: f64, p: &PenaltyParams) -> (f64, f64, f64) {
    let PenaltyParams { lambda, tau } = *p;
    if eps <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if eps < tau {
        let t2 = tau * tau;
        (
            lambda * eps * eps * eps / (3.0 * t2),
            lambda * eps * eps / t2,
            2.0 * lambda * eps / t2,
        )
    } else {
        (lambda * (eps - tau) + lambda * tau / 3.0, lambda, 0.0)
    }
}

pub fn penalty(eps: f64, p: &PenaltyParams) -> f64 {
    penalty_with_derivatives(eps, p).0
}

/// Longitudinal and lateral offsets of `(x, y)` from the reference point in
/// the path-aligned frame. Lateral is positive to the left of travel.
pub fn path_errors(x: f64, y: f64, r: &RefPoint) -> (f64, f64) {
    let (s, c) = r.phi.sin_cos();
    let dx = x - r.x;
    let dy = y - r.y;
    (c * dx + s * dy, -s * dx + c * dy)
}

/// Corridor violations `(eps_left, eps_right)` of state `z`; positive values violate.
pub fn violation(z: &[f64], r: &RefPoint) -> (f64, f64) {
    let (_, l) = path_errors(z[IX], z[IY], r);
    (l - r.d_left, -l - r.d_right)
}

/// Vehicle heading, speed and acceleration references implied by the driving mode.
fn directional_refs(r: &RefPoint) -> (f64, f64, f64) {
    match r.mode {
        DriveMode::Reverse => (r.phi + std::f64::consts::PI, -r.v, -r.a),
        _ => (r.phi, r.v, r.a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Lower,
    Upper,
}

/// One inequality of the input constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    /// Bound on `u_k(j)`. For `k = 0` the bound also includes the rate limit
    /// relative to the previously applied input.
    Bound { k: usize, j: usize, side: Side },
    /// Rate limit on `(u_k(j) - u_{k-1}(j)) / t_s`, `k >= 1`.
    Rate { k: usize, j: usize, side: Side },
}

/// Numbering of the `(4N - 2) m` constraints.
///
/// Bounds come first, stage by stage (`m` lower then `m` upper per stage),
/// followed by the rate limits for stages `1..N` in the same pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintLayout {
    pub horizon: usize,
    pub m: usize,
}

impl ConstraintLayout {
    pub fn count(&self) -> usize {
        (4 * self.horizon - 2) * self.m
    }

    pub fn id(&self, c: Constraint) -> usize {
        let m = self.m;
        let off = |side: Side, j: usize| if side == Side::Lower { j } else { m + j };
        match c {
            Constraint::Bound { k, j, side } => 2 * m * k + off(side, j),
            Constraint::Rate { k, j, side } => {
                2 * m * self.horizon + 2 * m * (k - 1) + off(side, j)
            }
        }
    }

    pub fn decode(&self, id: usize) -> Constraint {
        let m = self.m;
        let split = |rest: usize| {
            let side = if rest % (2 * m) < m { Side::Lower } else { Side::Upper };
            (rest / (2 * m), rest % m, side)
        };
        if id < 2 * m * self.horizon {
            let (k, j, side) = split(id);
            Constraint::Bound { k, j, side }
        } else {
            let (k, j, side) = split(id - 2 * m * self.horizon);
            Constraint::Rate { k: k + 1, j, side }
        }
    }
}

/// A fully specified FTOCP at one sampling instant.
#[derive(Debug, Clone)]
pub struct FtocpInstance {
    pub model: Arc<ModelSpec>,
    pub integrator: IntegratorConfig,
    /// One reference point per prediction step `1..=N`.
    pub refs: Vec<RefPoint>,
    pub weights: Weights,
    pub constraints: InputConstraints,
    pub penalty: PenaltyParams,
    /// Input applied during the previous sampling interval.
    pub u_prev: Vec<f64>,
    pub z0: Vec<f64>,
}

impl FtocpInstance {
    /// Checks dimensions and clamps `u_prev` into the input bounds.
    pub fn new(
        model: Arc<ModelSpec>,
        integrator: IntegratorConfig,
        refs: Vec<RefPoint>,
        weights: Weights,
        constraints: InputConstraints,
        penalty: PenaltyParams,
        u_prev: Vec<f64>,
        z0: Vec<f64>,
    ) -> Result<FtocpInstance, FtocpError> {
        let (n, m) = (model.n(), model.m());
        if refs.is_empty() {
            return Err(FtocpError::EmptyHorizon);
        }
        let checks = [
            ("R", m, weights.r.len()),
            ("Q", n, weights.q.len()),
            ("Ucon", m, constraints.m()),
            ("u_prev", m, u_prev.len()),
            ("z0", n, z0.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(FtocpError::Dimension {
                    what,
                    expected,
                    found,
                });
            }
        }
        integrator.validate()?;
        let u_prev = u_prev
            .iter()
            .enumerate()
            .map(|(j, &u)| {
                if u.is_finite() {
                    u.clamp(constraints.u_min[j], constraints.u_max[j])
                } else {
                    0.0
                }
            })
            .collect();
        Ok(FtocpInstance {
            model,
            integrator,
            refs,
            weights,
            constraints,
            penalty,
            u_prev,
            z0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.refs.len()
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    pub fn ts(&self) -> f64 {
        self.integrator.dt
    }

    pub fn layout(&self) -> ConstraintLayout {
        ConstraintLayout {
            horizon: self.horizon(),
            m: self.m(),
        }
    }

    /// Bounds on `u_k(j)`; stage 0 intersects them with the rate window around `u_prev`.
    pub fn bounds(&self, k: usize, j: usize) -> (f64, f64) {
        let c = &self.constraints;
        if k == 0 {
            let ts = self.ts();
            (
                c.u_min[j].max(self.u_prev[j] + ts * c.du_min[j]),
                c.u_max[j].min(self.u_prev[j] + ts * c.du_max[j]),
            )
        } else {
            (c.u_min[j], c.u_max[j])
        }
    }

    /// Value `g_l(U)` of constraint `c`; feasible when `<= 0`.
    pub fn constraint_value(&self, c: Constraint, u: &[f64]) -> f64 {
        let m = self.m();
        match c {
            Constraint::Bound { k, j, side } => {
                let (lo, hi) = self.bounds(k, j);
                match side {
                    Side::Lower => lo - u[k * m + j],
                    Side::Upper => u[k * m + j] - hi,
                }
            }
            Constraint::Rate { k, j, side } => {
                let rate = (u[k * m + j] - u[(k - 1) * m + j]) / self.ts();
                match side {
                    Side::Lower => self.constraints.du_min[j] - rate,
                    Side::Upper => rate - self.constraints.du_max[j],
                }
            }
        }
    }

    /// Directional derivative of constraint `c` along `d`.
    pub fn constraint_slope(&self, c: Constraint, d: &[f64]) -> f64 {
        let m = self.m();
        match c {
            Constraint::Bound { k, j, side } => match side {
                Side::Lower => -d[k * m + j],
                Side::Upper => d[k * m + j],
            },
            Constraint::Rate { k, j, side } => {
                let r = (d[k * m + j] - d[(k - 1) * m + j]) / self.ts();
                match side {
                    Side::Lower => -r,
                    Side::Upper => r,
                }
            }
        }
    }

    /// All constraint values in id order.
    pub fn constraint_values(&self, u: &[f64]) -> Vec<f64> {
        let layout = self.layout();
        (0..layout.count())
            .map(|id| self.constraint_value(layout.decode(id), u))
            .collect()
    }

    pub fn max_residual(&self, u: &[f64]) -> f64 {
        self.constraint_values(u)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Forward clamping pass onto the feasible set. Feasible inputs are
    /// returned unchanged.
    pub fn project_feasible(&self, u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        self.project_feasible_in_place(&mut out);
        out
    }

    pub fn project_feasible_in_place(&self, u: &mut [f64]) {
        let m = self.m();
        let ts = self.ts();
        let c = &self.constraints;
        for k in 0..self.horizon() {
            for j in 0..m {
                let (mut lo, mut hi) = self.bounds(k, j);
                if k > 0 {
                    let prev = u[(k - 1) * m + j];
                    lo = lo.max(prev + ts * c.du_min[j]);
                    hi = hi.min(prev + ts * c.du_max[j]);
                }
                let x = &mut u[k * m + j];
                if !x.is_finite() {
                    *x = 0.0f64.clamp(lo, hi);
                }
                if *x < lo {
                    *x = lo;
                } else if *x > hi {
                    *x = hi;
                }
            }
        }
    }

    /// Simulates the prediction model; `z` receives `(N + 1) n` values
    /// starting with `z0`.
    pub fn rollout_with(
        &self,
        u: &[f64],
        ws: &mut Workspace,
        z: &mut [f64],
    ) -> Result<(), FtocpError> {
        let n = self.n();
        let m = self.m();
        z[..n].copy_from_slice(&self.z0);
        for k in 0..self.horizon() {
            let (head, tail) = z.split_at_mut((k + 1) * n);
            integrate_step_with(
                &self.model,
                &head[k * n..],
                &u[k * m..(k + 1) * m],
                &self.integrator,
                ws,
                &mut tail[..n],
            )?;
        }
        Ok(())
    }

    pub fn rollout(&self, u: &[f64]) -> Result<Vec<f64>, FtocpError> {
        if u.len() != self.horizon() * self.m() {
            return Err(FtocpError::Dimension {
                what: "U",
                expected: self.horizon() * self.m(),
                found: u.len(),
            });
        }
        let mut z = vec![0.0; (self.horizon() + 1) * self.n()];
        let mut ws = Workspace::for_model(&self.model);
        self.rollout_with(u, &mut ws, &mut z)?;
        Ok(z)
    }

    fn input_ref(&self, k: usize, j: usize) -> f64 {
        if j == IA {
            directional_refs(&self.refs[k]).2
        } else {
            0.0
        }
    }

    /// Input stage cost of `u_k`, paired with reference step `k + 1`.
    pub fn input_cost(&self, k: usize, u: &[f64]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(j, &x)| {
                let d = x - self.input_ref(k, j);
                self.weights.r[j] * d * d
            })
            .sum()
    }

    /// Gradient of the input stage cost; the Hessian is `2 R`.
    pub fn input_gradient(&self, k: usize, u: &[f64], grad: &mut [f64]) {
        for (j, g) in grad.iter_mut().enumerate() {
            *g = 2.0 * self.weights.r[j] * (u[j] - self.input_ref(k, j));
        }
    }

    /// State stage cost of `z_{k+1}` including both corridor penalties.
    pub fn state_cost(&self, k: usize, z: &[f64]) -> f64 {
        let r = &self.refs[k];
        let q = &self.weights.q;
        let (heading, v_ref, _) = directional_refs(r);
        let (es, el) = path_errors(z[IX], z[IY], r);
        let dphi = wrap_angle(z[IPHI] - heading);
        let dv = z[IV] - v_ref;
        let dd = z[IDELTA] - r.delta;
        let mut cost = q[IX] * es * es
            + q[IY] * el * el
            + q[IPHI] * dphi * dphi
            + q[IV] * dv * dv
            + q[IDELTA] * dd * dd;
        for j in 5..z.len() {
            cost += q[j] * z[j] * z[j];
        }
        let (eps_l, eps_r) = (el - r.d_left, -el - r.d_right);
        cost + penalty(eps_l, &self.penalty) + penalty(eps_r, &self.penalty)
    }

    /// Gradient of [`FtocpInstance::state_cost`] and a positive diagonal
    /// curvature estimate used by the local QP.
    pub fn state_gradient(&self, k: usize, z: &[f64], grad: &mut [f64], hess: &mut [f64]) {
        let r = &self.refs[k];
        let q = &self.weights.q;
        let (heading, v_ref, _) = directional_refs(r);
        let (sn, cs) = r.phi.sin_cos();
        let (es, el) = path_errors(z[IX], z[IY], r);
        let (_, dl, ddl) = penalty_with_derivatives(el - r.d_left, &self.penalty);
        let (_, dr, ddr) = penalty_with_derivatives(-el - r.d_right, &self.penalty);
        // d/d(el) of the lateral terms
        let gl = 2.0 * q[IY] * el + dl - dr;
        let gs = 2.0 * q[IX] * es;
        grad[IX] = gs * cs - gl * sn;
        grad[IY] = gs * sn + gl * cs;
        let hl = 2.0 * q[IY] + ddl + ddr;
        let hs = 2.0 * q[IX];
        hess[IX] = hs * cs * cs + hl * sn * sn;
        hess[IY] = hs * sn * sn + hl * cs * cs;
        grad[IPHI] = 2.0 * q[IPHI] * wrap_angle(z[IPHI] - heading);
        hess[IPHI] = 2.0 * q[IPHI];
        grad[IV] = 2.0 * q[IV] * (z[IV] - v_ref);
        hess[IV] = 2.0 * q[IV];
        grad[IDELTA] = 2.0 * q[IDELTA] * (z[IDELTA] - r.delta);
        hess[IDELTA] = 2.0 * q[IDELTA];
        for j in 5..z.len() {
            grad[j] = 2.0 * q[j] * z[j];
            hess[j] = 2.0 * q[j];
        }
    }

    /// Objective value for inputs `u` and their rollout `z` (`(N + 1) n`
    /// values; `z0` does not enter the cost).
    pub fn total_cost(&self, u: &[f64], z: &[f64]) -> f64 {
        let n = self.n();
        let m = self.m();
        (0..self.horizon())
            .map(|k| {
                self.input_cost(k, &u[k * m..(k + 1) * m])
                    + self.state_cost(k, &z[(k + 1) * n..(k + 2) * n])
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Method;
    use crate::model::builtin_kbm;

    fn refpoint(x: f64, y: f64, phi: f64, v: f64, width: f64) -> RefPoint {
        RefPoint {
            x,
            y,
            phi,
            v,
            a: 0.0,
            delta: 0.0,
            beta: 0.0,
            d_left: width,
            d_right: width,
            mode: DriveMode::Forward,
            seg: 1,
        }
    }

    fn instance(n_h: usize) -> FtocpInstance {
        FtocpInstance::new(
            Arc::new(builtin_kbm()),
            IntegratorConfig::new(Method::Rk4, 0.1),
            (0..n_h).map(|k| refpoint(0.1 * (k + 1) as f64, 0.0, 0.0, 1.0, 2.0)).collect(),
            Weights::new(vec![1.0, 1.0], vec![1.0; 5]).unwrap(),
            InputConstraints::from_ucon(&[-3.0, -0.5, 2.0, 0.5, -5.0, -1.0, 5.0, 0.4], 2).unwrap(),
            PenaltyParams::new(10.0, 0.1).unwrap(),
            vec![0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn penalty_branches() {
        let p = PenaltyParams::new(10.0, 0.1).unwrap();
        assert_eq!(penalty(-1.0, &p), 0.0);
        assert!((penalty(0.05, &p) - 10.0 * 0.05f64.powi(3) / 0.03).abs() < 1e-15);
        assert!((penalty(1.0, &p) - 10.0 * (1.0 - 0.2 / 3.0)).abs() < 1e-12);
        assert_eq!(penalty(0.1, &p), 10.0 * 0.1 / 3.0);
    }

    #[test]
    fn violation_geometry() {
        let r = refpoint(0.0, 0.0, 0.0, 1.0, 2.0);
        assert_eq!(violation(&[0.0, 0.0, 0.0, 0.0, 0.0], &r), (-2.0, -2.0));
        assert_eq!(violation(&[0.0, 3.0, 0.0, 0.0, 0.0], &r).0, 1.0);
        let mut r2 = r;
        r2.d_right = -0.5;
        assert_eq!(violation(&[0.0, 0.0, 0.0, 0.0, 0.0], &r2).1, 0.5);
        // rotated frame: travel along +y, vehicle at -x is on the left
        let r3 = refpoint(0.0, 0.0, std::f64::consts::FRAC_PI_2, 1.0, 2.0);
        let (l, _) = violation(&[-3.0, 0.0, 0.0, 0.0, 0.0], &r3);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layout_round_trip_and_count() {
        let layout = ConstraintLayout { horizon: 4, m: 3 };
        assert_eq!(layout.count(), (4 * 4 - 2) * 3);
        for id in 0..layout.count() {
            assert_eq!(layout.id(layout.decode(id)), id);
        }
        assert_eq!(
            layout.decode(layout.id(Constraint::Rate { k: 1, j: 2, side: Side::Upper })),
            Constraint::Rate { k: 1, j: 2, side: Side::Upper }
        );
    }

    #[test]
    fn zero_input_is_strictly_feasible() {
        let inst = instance(4);
        assert!(inst.constraint_values(&[0.0; 8]).iter().all(|&g| g < 0.0));
    }

    #[test]
    fn active_bound_and_rate_violation() {
        let inst = instance(2);
        // stage 1 upper bound on a is exactly active
        let u = [0.0, 0.0, 2.0, 0.0];
        let id = inst.layout().id(Constraint::Bound { k: 1, j: 0, side: Side::Upper });
        assert_eq!(inst.constraint_values(&u)[id], 0.0);
        // steering rate 0.05 / 0.1 exceeds 0.4 by 0.1
        let u = [0.0, 0.0, 0.0, 0.05];
        let g = inst.constraint_value(Constraint::Rate { k: 1, j: 1, side: Side::Upper }, &u);
        assert!((g - 0.1).abs() < 1e-15);
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        let inst = instance(3);
        let u = [5.0, 1.0, 5.0, -1.0, -5.0, 1.0];
        let p = inst.project_feasible(&u);
        assert!(inst.max_residual(&p) <= 1e-12);
        assert_eq!(inst.project_feasible(&p), p);
        assert_eq!(inst.project_feasible(&[0.0; 6]), vec![0.0; 6]);
    }

    #[test]
    fn zero_deviation_costs_nothing() {
        let mut inst = instance(3);
        let u = vec![0.0; 6];
        let z = inst.rollout(&u).unwrap();
        for k in 0..3 {
            let zk = &z[(k + 1) * 5..(k + 2) * 5];
            inst.refs[k] = refpoint(zk[0], zk[1], zk[2], zk[3], 2.0);
        }
        assert_eq!(inst.total_cost(&u, &z), 0.0);
    }

    #[test]
    fn reverse_mode_flips_heading_and_speed() {
        let mut inst = instance(1);
        inst.refs[0].mode = DriveMode::Reverse;
        inst.refs[0].phi = std::f64::consts::PI;
        let z = [inst.refs[0].x, 0.0, 0.0, -1.0, 0.0];
        assert!(inst.state_cost(0, &z) < 1e-20);
    }
}
