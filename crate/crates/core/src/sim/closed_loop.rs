//! Receding-horizon loop around a simulated plant.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::controller::{ConfigError, Controller, ControllerConfig, Fault};
use crate::dynamics::{integrate_step, IntegratorConfig, Method};
use crate::ftocp::{violation, InputConstraints, Weights};
use crate::model::{ModelSpec, IX, IY};
use crate::nas::Termination;
use crate::reference::{project_onto_segment, DriveMode, RefPoint, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("at least one step is required")]
    ZeroSteps,
    #[error("initial state has {found} entries, model expects {expected}")]
    StateLength { expected: usize, found: usize },
    #[error("noise vector has {found} entries, model expects {expected}")]
    NoiseLength { expected: usize, found: usize },
    #[error("invalid noise standard deviation {0}")]
    BadNoise(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trajectory rejected by the controller")]
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    /// Standard deviation of the measurement noise per state; empty for none.
    pub noise: Vec<f64>,
    /// Plant integrator; its step must equal the controller sampling time.
    pub plant: IntegratorConfig,
    pub weights: Weights,
    pub constraints: InputConstraints,
}

impl SimConfig {
    /// Noise-free setup with an RK4 plant using nine support nodes.
    pub fn new(steps: usize, dt: f64, weights: Weights, constraints: InputConstraints) -> SimConfig {
        SimConfig {
            steps,
            seed: 0,
            noise: Vec::new(),
            plant: IntegratorConfig::new(Method::Rk4, dt).with_supnds(9),
            weights,
            constraints,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    /// True plant state at `t`.
    pub z: Vec<f64>,
    pub u0: Vec<f64>,
    pub drivmode: DriveMode,
    /// Localization of the measured state; segment 0 if unavailable.
    pub seg: usize,
    pub s: f64,
    pub dist: f64,
    pub lagging_time: f64,
    /// Largest corridor violation of the true state against the localized segment.
    pub eps: f64,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub fault: Option<Fault>,
    /// Wall time of the controller step, µs.
    pub solve_us: f64,
}

impl LogRow {
    /// Equality of everything except the wall time.
    pub fn same_trace(&self, other: &LogRow) -> bool {
        let bits = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        bits(
            &[self.t, self.s, self.dist, self.lagging_time, self.eps, self.cost],
            &[other.t, other.s, other.dist, other.lagging_time, other.eps, other.cost],
        ) && bits(&self.z, &other.z)
            && bits(&self.u0, &other.u0)
            && self.drivmode == other.drivmode
            && self.seg == other.seg
            && self.iterations == other.iterations
            && self.termination == other.termination
            && self.fault == other.fault
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub rows: Vec<LogRow>,
    /// Plant state after the last step.
    pub final_state: Vec<f64>,
}

impl SimLog {
    pub fn same_trace(&self, other: &SimLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_trace(b))
            && self.final_state.iter().zip(&other.final_state).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn median_iterations(&self) -> f64 {
        let mut it: Vec<usize> = self.rows.iter().map(|r| r.iterations).collect();
        if it.is_empty() {
            return 0.0;
        }
        it.sort_unstable();
        let n = it.len();
        if n % 2 == 1 {
            it[n / 2] as f64
        } else {
            0.5 * (it[n / 2 - 1] + it[n / 2]) as f64
        }
    }

    /// Driving-mode sequence with consecutive duplicates removed.
    pub fn mode_sequence(&self) -> Vec<DriveMode> {
        let mut out: Vec<DriveMode> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.drivmode) {
                out.push(r.drivmode);
            }
        }
        out
    }
}

fn corridor_violation(traj: &Trajectory, seg: usize, z: &[f64]) -> f64 {
    let e = traj.segment(seg);
    let (lx, ly) = traj.to_local(z[IX], z[IY]);
    let (s, _) = project_onto_segment(traj, seg, (lx, ly));
    let (px, py) = traj.point_on(seg, s);
    let (gx, gy) = traj.to_global(px, py);
    let r = RefPoint {
        x: gx,
        y: gy,
        phi: e.phi + traj.header.phi,
        v: e.v,
        a: e.a,
        delta: e.delta,
        beta: e.beta,
        d_left: e.d_left,
        d_right: e.d_right,
        mode: e.mode,
        seg,
    };
    let (l, rr) = violation(z, &r);
    l.max(rr)
}

/// Runs `sim.steps` controller steps against a plant integrated with
/// `sim.plant`. Under `onesteppred` the plant applies each input one period
/// after it was computed.
pub fn run_closed_loop(
    model: Arc<ModelSpec>,
    plant: &ModelSpec,
    traj: Trajectory,
    z0: &[f64],
    cfg: ControllerConfig,
    sim: &SimConfig,
) -> Result<SimLog, SimError> {
    if sim.steps == 0 {
        return Err(SimError::ZeroSteps);
    }
    let n = plant.n();
    if z0.len() != n || model.n() != n {
        return Err(SimError::StateLength {
            expected: n,
            found: z0.len(),
        });
    }
    let noise: Vec<Normal<f64>> = if sim.noise.is_empty() {
        Vec::new()
    } else if sim.noise.len() != n {
        return Err(SimError::NoiseLength {
            expected: n,
            found: sim.noise.len(),
        });
    } else {
        sim.noise
            .iter()
            .map(|&s| Normal::new(0.0, s).map_err(|_| SimError::BadNoise(s)))
            .collect::<Result<_, _>>()?
    };
    let dt = cfg.dt;
    let delayed = cfg.onesteppred;
    let mut ctl = Controller::new(model.clone(), cfg)?;
    if !ctl.submit(traj.clone()) {
        return Err(SimError::Rejected);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut z = z0.to_vec();
    let mut applied = vec![0.0; plant.m()];
    let mut rows = Vec::with_capacity(sim.steps);

    for k in 0..sim.steps {
        let t = k as f64 * dt;
        let meas: Vec<f64> = if noise.is_empty() {
            z.clone()
        } else {
            z.iter().zip(&noise).map(|(x, d)| x + d.sample(&mut rng)).collect()
        };
        let clock = Instant::now();
        let out = ctl.step(&meas, &sim.weights, &sim.constraints, t);
        let solve_us = clock.elapsed().as_secs_f64() * 1e6;

        let (seg, s, dist, lag) = match out.localization {
            Some(l) => (l.seg, l.s, l.dist, l.lagging_time),
            None => (0, f64::NAN, f64::NAN, f64::NAN),
        };
        let eps = if seg >= 1 && z.iter().all(|x| x.is_finite()) {
            corridor_violation(&traj, seg, &z)
        } else {
            f64::NAN
        };
        rows.push(LogRow {
            t,
            z: z.clone(),
            u0: out.u0.clone(),
            drivmode: out.drivmode,
            seg,
            s,
            dist,
            lagging_time: lag,
            eps,
            cost: out.cost,
            iterations: out.iterations,
            termination: out.termination,
            fault: out.fault,
            solve_us,
        });

        let u = if delayed { applied.clone() } else { out.u0.clone() };
        applied = out.u0;
        z = match integrate_step(plant, &z, &u, &sim.plant) {
            Ok(next) => next,
            Err(_) => vec![f64::NAN; n],
        };
    }
    Ok(SimLog {
        state_names: plant.state_names().to_vec(),
        input_names: plant.input_names().to_vec(),
        rows,
        final_state: z,
    })
}
