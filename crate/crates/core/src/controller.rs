//! One receding-horizon step per sampling instant.

use std::sync::Arc;

use crate::dynamics::{integrate_step, IntegratorConfig, Method};
use crate::ftocp::{FtocpError, FtocpInstance, InputConstraints, PenaltyParams, Weights};
use crate::model::{ModelSpec, IA, IPHI, IV, IX, IY};
use crate::nas::{warm_start, NasConfig, NasResult, NasSolver, Termination};
use crate::reference::{
    generate_references, lagging_time, localize, stop_references, validate_trajectory, DriveMode,
    Localization, PathType, RefGenParams, RefPoint, ReferenceError, Trajectory,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Sampling time, s.
    pub dt: f64,
    /// Prediction horizon.
    pub npar: usize,
    /// Maximum number of trajectory segments.
    pub nn: usize,
    pub segsearch: usize,
    pub cuptime: f64,
    pub maxrefvelmod: f64,
    pub conpenalty: f64,
    pub contolerance: f64,
    /// Start the prediction one sampling period ahead.
    pub onesteppred: bool,
    pub integrator: IntegratorConfig,
    pub nas: NasConfig,
    /// Speed below which the vehicle counts as standing, m/s.
    pub v_still: f64,
    /// Minimum time in standstill mode before driving off, s.
    pub dwell: f64,
    /// Remaining arc below which a run of segments counts as finished, m.
    pub endtol: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            dt: 0.05,
            npar: 30,
            nn: 200,
            segsearch: 5,
            cuptime: 2.0,
            maxrefvelmod: 0.2,
            conpenalty: 200.0,
            contolerance: 0.2,
            onesteppred: false,
            integrator: IntegratorConfig::new(Method::Rk4, 0.05),
            nas: NasConfig::default(),
            v_still: 0.05,
            dwell: 0.5,
            endtol: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} out of range")]
    OutOfRange(&'static str),
    #[error("integrator step {integrator} differs from dt {dt}")]
    StepMismatch { integrator: f64, dt: f64 },
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ConfigError::OutOfRange("dt"));
        }
        if self.npar == 0 {
            return Err(ConfigError::OutOfRange("Npar"));
        }
        if self.nn == 0 {
            return Err(ConfigError::OutOfRange("Nn"));
        }
        if self.segsearch == 0 {
            return Err(ConfigError::OutOfRange("segsearch"));
        }
        if !(self.cuptime >= 0.0) || !(self.maxrefvelmod >= 0.0) {
            return Err(ConfigError::OutOfRange("cuptime/maxrefvelmod"));
        }
        if !(self.conpenalty > 0.0) || !(self.contolerance > 0.0) {
            return Err(ConfigError::OutOfRange("conpenalty/contolerance"));
        }
        if !(self.v_still >= 0.0) || !(self.dwell >= 0.0) || !(self.endtol >= 0.0) {
            return Err(ConfigError::OutOfRange("v_still/dwell/endtol"));
        }
        if (self.integrator.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(ConfigError::StepMismatch {
                integrator: self.integrator.dt,
                dt: self.dt,
            });
        }
        self.integrator
            .validate()
            .map_err(|_| ConfigError::OutOfRange("integrator"))?;
        self.nas
            .validate()
            .map_err(|_| ConfigError::OutOfRange("NAS parameters"))
    }
}

/// Weights used by the examples: inputs (a, ddelta), states (x, y, phi, v, delta).
pub fn default_weights() -> Weights {
    Weights::new(vec![0.2, 2.0], vec![2.0, 10.0, 10.0, 2.0, 0.1]).unwrap()
}

/// Input limits used by the examples.
pub fn default_constraints() -> InputConstraints {
    InputConstraints::new(vec![-4.0, -0.6], vec![2.0, 0.6], vec![-8.0, -3.0], vec![8.0, 3.0]).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    NonFiniteState,
    NoTrajectory,
    Localization,
    Setup,
    Solver,
    NonFiniteOutput,
}

#[derive(Debug, Clone)]
pub struct ControllerOutputs {
    pub drivmode: DriveMode,
    pub u0: Vec<f64>,
    /// Optimal inputs, `N m` values.
    pub useq: Vec<f64>,
    /// Reference points, 9 values each.
    pub refs: Vec<f64>,
    /// Predicted states, `(N + 1) n` values.
    pub zseq: Vec<f64>,
    // diagnostics
    pub localization: Option<Localization>,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub fault: Option<Fault>,
}

impl ControllerOutputs {
    /// Output block in wire order: drivmode, u0, Useq, Ref, Zseq.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + self.u0.len() + self.useq.len() + self.refs.len() + self.zseq.len());
        out.push(self.drivmode.code() as f64);
        out.extend_from_slice(&self.u0);
        out.extend_from_slice(&self.useq);
        out.extend_from_slice(&self.refs);
        out.extend_from_slice(&self.zseq);
        out
    }
}

/// Persistent controller state plus workspaces.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    model: Arc<ModelSpec>,
    solver: NasSolver,
    traj: Option<Trajectory>,
    loc: Option<Localization>,
    prev: Option<NasResult>,
    u_prev: Vec<f64>,
    mode: DriveMode,
    /// Time at which standstill mode was entered.
    mode_since: f64,
    fault: Option<Fault>,
}

fn flatten_refs(refs: &[RefPoint]) -> Vec<f64> {
    refs.iter().flat_map(|r| r.to_array()).collect()
}

impl Controller {
    pub fn new(model: Arc<ModelSpec>, cfg: ControllerConfig) -> Result<Controller, ConfigError> {
        cfg.validate()?;
        let m = model.m();
        Ok(Controller {
            solver: NasSolver::new(cfg.nas.clone()),
            cfg,
            model,
            traj: None,
            loc: None,
            prev: None,
            u_prev: vec![0.0; m],
            mode: DriveMode::Standstill,
            mode_since: f64::NEG_INFINITY,
            fault: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Arc<ModelSpec> {
        &self.model
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.traj.as_ref()
    }

    pub fn mode(&self) -> DriveMode {
        self.mode
    }

    pub fn u_prev(&self) -> &[f64] {
        &self.u_prev
    }

    pub fn last_fault(&self) -> Option<Fault> {
        self.fault
    }

    /// Validates a flat trajectory array; it replaces the current one only if
    /// its time stamp is strictly newer. Invalid input leaves the state as is.
    pub fn submit_trajectory(&mut self, raw: &[f64]) -> Result<bool, ReferenceError> {
        let traj = validate_trajectory(raw, self.cfg.nn)?;
        Ok(self.submit(traj))
    }

    /// Same as [`Controller::submit_trajectory`] for an already built trajectory.
    pub fn submit(&mut self, traj: Trajectory) -> bool {
        if let Some(cur) = &self.traj {
            if !(traj.header.t > cur.header.t) {
                return false;
            }
        }
        self.traj = Some(traj);
        self.loc = None;
        true
    }

    /// Localizes the global position `pos` on `traj`.
    fn localize(&self, traj: &Trajectory, pos: (f64, f64)) -> Result<Localization, ReferenceError> {
        let pos = traj.to_local(pos.0, pos.1);
        let filter = match self.mode {
            DriveMode::Standstill => None,
            m => Some(m),
        };
        let prev = self.loc.as_ref().filter(|l| l.seg <= traj.len());
        match localize(traj, pos, prev, self.cfg.segsearch, filter) {
            Err(ReferenceError::NoMatch(_)) if filter.is_some() => {
                localize(traj, pos, prev, self.cfg.segsearch, None)
            }
            r => r,
        }
    }

    /// Arc length from `loc` to the end of its run of equal-mode segments;
    /// `None` for a circular reference driven in a single mode.
    fn run_remaining(traj: &Trajectory, loc: &Localization) -> Option<f64> {
        let count = traj.len();
        let mode = traj.segment(loc.seg).mode;
        let circular = traj.header.ptype == PathType::Circular;
        if circular && traj.segments().iter().all(|s| s.mode == mode) {
            return None;
        }
        let mut rem = traj.segment_length(loc.seg) - loc.s;
        let mut seg = loc.seg;
        for _ in 0..count {
            let next = if seg == count {
                if circular {
                    1
                } else {
                    break;
                }
            } else {
                seg + 1
            };
            if traj.segment(next).mode != mode {
                break;
            }
            seg = next;
            rem += traj.segment_length(seg);
        }
        Some(rem.max(0.0))
    }

    /// Mode of the first moving segment after the run containing `seg`.
    fn next_moving_mode(traj: &Trajectory, seg: usize) -> Option<DriveMode> {
        let count = traj.len();
        let circular = traj.header.ptype == PathType::Circular;
        let mode = traj.segment(seg).mode;
        let mut s = seg;
        let mut left_run = false;
        for _ in 0..count {
            s = if s == count {
                if circular {
                    1
                } else {
                    return None;
                }
            } else {
                s + 1
            };
            let m = traj.segment(s).mode;
            if m != mode {
                left_run = true;
            }
            if left_run && m != DriveMode::Standstill {
                return Some(m);
            }
        }
        None
    }

    fn run_finished(&self, traj: &Trajectory, loc: &Localization) -> bool {
        Self::run_remaining(traj, loc).is_some_and(|r| r <= self.cfg.endtol)
    }

    /// Advances the driving-mode machine; returns the mode the references are built for.
    fn update_mode(&mut self, traj: &Trajectory, loc: &Localization, v: f64, now: f64) {
        let at_rest = v.abs() <= self.cfg.v_still;
        let seg_mode = traj.segment(loc.seg).mode;
        match self.mode {
            DriveMode::Standstill => {
                let target = if seg_mode != DriveMode::Standstill && !self.run_finished(traj, loc) {
                    Some(seg_mode)
                } else {
                    Self::next_moving_mode(traj, loc.seg)
                };
                if let Some(t) = target {
                    let dwell_ok = now - self.mode_since >= self.cfg.dwell - 1e-9;
                    let same_direction = v * t.sign() > self.cfg.v_still;
                    if (at_rest && dwell_ok) || same_direction {
                        self.mode = t;
                    }
                }
            }
            m => {
                let finished = seg_mode == m && self.run_finished(traj, loc);
                if (seg_mode != m || finished) && at_rest {
                    self.mode = DriveMode::Standstill;
                    self.mode_since = now;
                }
            }
        }
    }

    /// References that hold the current pose at rest.
    fn hold_references(&self, z0: &[f64], seg: usize) -> Vec<RefPoint> {
        vec![
            RefPoint {
                x: z0[IX],
                y: z0[IY],
                phi: z0[IPHI],
                v: 0.0,
                a: 0.0,
                delta: 0.0,
                beta: 0.0,
                d_left: 1e3,
                d_right: 1e3,
                mode: DriveMode::Standstill,
                seg,
            };
            self.cfg.npar
        ]
    }

    /// Straight-ahead deceleration to standstill along the current motion,
    /// expressed in the frame of the commanded mode.
    fn braking_references(&self, z0: &[f64], decel: f64, seg: usize) -> Vec<RefPoint> {
        let sgn = if z0[IV] < 0.0 { -1.0 } else { 1.0 };
        let f = if self.mode == DriveMode::Reverse { -1.0 } else { 1.0 };
        let heading = z0[IPHI];
        let travel = if sgn < 0.0 { heading + std::f64::consts::PI } else { heading };
        let (sn, cs) = travel.sin_cos();
        let v0 = z0[IV].abs();
        let t_stop = if decel > 0.0 { v0 / decel } else { 0.0 };
        (1..=self.cfg.npar)
            .map(|k| {
                let t = (k as f64 * self.cfg.dt).min(t_stop);
                let s = v0 * t - 0.5 * decel * t * t;
                RefPoint {
                    x: z0[IX] + s * cs,
                    y: z0[IY] + s * sn,
                    phi: if f < 0.0 { heading + std::f64::consts::PI } else { heading },
                    v: f * sgn * (v0 - decel * t).max(0.0),
                    a: if t < t_stop { -f * sgn * decel } else { 0.0 },
                    delta: 0.0,
                    beta: 0.0,
                    d_left: 1e3,
                    d_right: 1e3,
                    mode: self.mode,
                    seg,
                }
            })
            .collect()
    }

    fn fault_output(&mut self, z: &[f64], constraints: &InputConstraints, fault: Fault) -> ControllerOutputs {
        let m = self.model.m();
        let n = self.model.n();
        let ts = self.cfg.dt;
        let v = z.get(IV).copied().filter(|x| x.is_finite()).unwrap_or(0.0);
        let mut u0 = vec![0.0; m];
        for (j, u) in u0.iter_mut().enumerate() {
            let prev = if self.u_prev[j].is_finite() { self.u_prev[j] } else { 0.0 };
            let prev = prev.clamp(constraints.u_min[j], constraints.u_max[j]);
            let lo = constraints.u_min[j].max(prev + ts * constraints.du_min[j]);
            let hi = constraints.u_max[j].min(prev + ts * constraints.du_max[j]);
            let want = match j {
                IA => -v / ts,
                _ => 0.0,
            };
            *u = want.clamp(lo, hi);
        }
        self.u_prev.copy_from_slice(&u0);
        self.prev = None;
        self.fault = Some(fault);
        let nh = self.cfg.npar;
        let mut useq = Vec::with_capacity(nh * m);
        for _ in 0..nh {
            useq.extend_from_slice(&u0);
        }
        ControllerOutputs {
            drivmode: self.mode,
            u0,
            useq,
            refs: vec![0.0; 9 * nh],
            zseq: vec![f64::NAN; (nh + 1) * n],
            localization: self.loc,
            cost: f64::NAN,
            iterations: 0,
            termination: None,
            fault: Some(fault),
        }
    }

    /// Computes the control input for the measured state `z_hat` at global time `now`.
    pub fn step(
        &mut self,
        z_hat: &[f64],
        weights: &Weights,
        constraints: &InputConstraints,
        now: f64,
    ) -> ControllerOutputs {
        let n = self.model.n();
        let m = self.model.m();
        if z_hat.len() != n || z_hat.iter().any(|x| !x.is_finite()) {
            return self.fault_output(z_hat, constraints, Fault::NonFiniteState);
        }
        if constraints.m() != m || weights.r.len() != m || weights.q.len() != n {
            return self.fault_output(z_hat, constraints, Fault::Setup);
        }
        for (j, u) in self.u_prev.iter_mut().enumerate() {
            *u = if u.is_finite() { u.clamp(constraints.u_min[j], constraints.u_max[j]) } else { 0.0 };
        }
        let z0 = if self.cfg.onesteppred {
            match integrate_step(&self.model, z_hat, &self.u_prev, &self.cfg.integrator) {
                Ok(z) if z.iter().all(|x| x.is_finite()) => z,
                _ => return self.fault_output(z_hat, constraints, Fault::NonFiniteState),
            }
        } else {
            z_hat.to_vec()
        };
        let Some(traj) = self.traj.take() else {
            return self.fault_output(&z0, constraints, Fault::NoTrajectory);
        };
        let out = self.step_with(&traj, &z0, weights, constraints, now);
        self.traj = Some(traj);
        out
    }

    fn step_with(
        &mut self,
        traj: &Trajectory,
        z0: &[f64],
        weights: &Weights,
        constraints: &InputConstraints,
        now: f64,
    ) -> ControllerOutputs {
        let m = self.model.m();
        let mut loc = match self.localize(traj, (z0[IX], z0[IY])) {
            Ok(l) => l,
            Err(_) => return self.fault_output(z0, constraints, Fault::Localization),
        };
        loc.lagging_time = lagging_time(traj, &loc, now);
        self.update_mode(traj, &loc, z0[IV], now);
        if self.mode != DriveMode::Standstill && traj.segment(loc.seg).mode != self.mode {
            // relocalize inside the newly selected run
            if let Ok(mut l) = self.localize(traj, (z0[IX], z0[IY])) {
                l.lagging_time = lagging_time(traj, &l, now);
                loc = l;
            }
        }
        self.loc = Some(loc);

        let seg_mode = traj.segment(loc.seg).mode;
        let refs = match self.mode {
            DriveMode::Standstill if z0[IV].abs() <= self.cfg.v_still => self.hold_references(z0, loc.seg),
            DriveMode::Standstill => self.braking_references(z0, 0.5 * constraints.u_min[IA].abs(), loc.seg),
            mode if seg_mode == mode => {
                let p = RefGenParams {
                    horizon: self.cfg.npar,
                    ts: self.cfg.dt,
                    cuptime: self.cfg.cuptime,
                    maxrefvelmod: self.cfg.maxrefvelmod,
                };
                generate_references(traj, &loc, now, &p)
            }
            _ if z0[IV].abs() <= self.cfg.v_still => stop_references(traj, &loc, self.cfg.npar),
            _ => self.braking_references(z0, 0.5 * constraints.u_min[IA].abs(), loc.seg),
        };

        let inst = match self.build_instance(refs, weights, constraints, z0) {
            Ok(i) => i,
            Err(_) => return self.fault_output(z0, constraints, Fault::Setup),
        };
        let u_start = match &self.prev {
            Some(p) if p.u.len() == inst.horizon() * m => warm_start(Some(p), &inst),
            _ => warm_start(None, &inst),
        };
        let res = self.solver.solve(&inst, &u_start);
        if res.termination == Termination::Breakdown || !res.cost.is_finite() {
            return self.fault_output(z0, constraints, Fault::Solver);
        }
        let mut u0 = res.u[..m].to_vec();
        for (j, u) in u0.iter_mut().enumerate() {
            let (lo, hi) = inst.bounds(0, j);
            *u = u.clamp(lo, hi);
        }
        if u0.iter().any(|x| !x.is_finite()) {
            return self.fault_output(z0, constraints, Fault::NonFiniteOutput);
        }
        self.u_prev.copy_from_slice(&u0);
        self.fault = None;
        let out = ControllerOutputs {
            drivmode: self.mode,
            u0,
            useq: res.u.clone(),
            refs: flatten_refs(&inst.refs),
            zseq: res.z.clone(),
            localization: Some(loc),
            cost: res.cost,
            iterations: res.iterations,
            termination: Some(res.termination),
            fault: None,
        };
        self.prev = Some(res);
        out
    }

    fn build_instance(
        &self,
        refs: Vec<RefPoint>,
        weights: &Weights,
        constraints: &InputConstraints,
        z0: &[f64],
    ) -> Result<FtocpInstance, FtocpError> {
        FtocpInstance::new(
            self.model.clone(),
            self.cfg.integrator,
            refs,
            weights.clone(),
            constraints.clone(),
            PenaltyParams::new(self.cfg.conpenalty, self.cfg.contolerance)?,
            self.u_prev.clone(),
            z0.to_vec(),
        )
    }
}
