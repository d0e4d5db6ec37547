//! Closed-loop simulation of the circular-path and parking examples.

mod closed_loop;
mod io;
mod scenarios;

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

pub use closed_loop::{run_closed_loop, LogRow, SimConfig, SimError, SimLog};
pub use io::{apply_config, corridor_lines, write_log, write_plot, ConfigFileError, LOG_SCHEMA};
pub use scenarios::{
    scenario_circular, scenario_parking, steady_steering, CircularScenario, ParkingScenario,
    ParkingVariant, ScenarioError, KBM_REAR_RATIO, KBM_WHEELBASE,
};

use crate::controller::{default_constraints, default_weights, ControllerConfig};
use crate::dynamics::{IntegratorConfig, Method};
use crate::ftocp::{InputConstraints, Weights};
use crate::model::{builtin_kbm, IA};
use crate::reference::{wrap_angle, DriveMode, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Circular,
    ParkForward,
    ParkReverse,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Option<ScenarioKind> {
        match s {
            "circular" => Some(ScenarioKind::Circular),
            "park-forward" => Some(ScenarioKind::ParkForward),
            "park-reverse" => Some(ScenarioKind::ParkReverse),
            _ => None,
        }
    }

    /// Step count that covers the manoeuvre with the default parameters.
    pub fn default_steps(self) -> usize {
        match self {
            ScenarioKind::Circular => 2000,
            _ => 1200,
        }
    }
}

/// Everything needed for one closed-loop run of an example scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSetup {
    pub kind: ScenarioKind,
    pub circular: CircularScenario,
    pub parking: ParkingScenario,
    pub controller: ControllerConfig,
    pub weights: Weights,
    pub constraints: InputConstraints,
    /// Plant support nodes per sampling interval.
    pub plant_supnds: usize,
    /// Measurement noise standard deviation per state; empty for none.
    pub noise: Vec<f64>,
}

impl SimSetup {
    pub fn new(kind: ScenarioKind) -> SimSetup {
        let parking = ParkingScenario {
            variant: match kind {
                ScenarioKind::ParkForward => ParkingVariant::Forward,
                _ => ParkingVariant::Reverse,
            },
            ..Default::default()
        };
        let mut controller = ControllerConfig::default();
        if kind != ScenarioKind::Circular {
            // reversing with the CoG as reference point is non-minimum phase;
            // 1.5 s of prediction is too short at parking speeds
            controller.npar = 60;
        }
        SimSetup {
            kind,
            circular: CircularScenario::default(),
            parking,
            controller,
            weights: default_weights(),
            constraints: default_constraints(),
            plant_supnds: 9,
            noise: Vec::new(),
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory, ScenarioError> {
        match self.kind {
            ScenarioKind::Circular => scenario_circular(&self.circular),
            _ => {
                let mut p = self.parking;
                p.accel = self.constraints.u_max[IA];
                p.decel = self.constraints.u_min[IA].abs();
                scenario_parking(&p)
            }
        }
    }

    /// Vehicle at rest on the root node, aligned with the path.
    pub fn initial_state(&self) -> Vec<f64> {
        match self.kind {
            ScenarioKind::Circular => {
                let heading = match self.circular.direction {
                    DriveMode::Reverse => -FRAC_PI_2,
                    _ => FRAC_PI_2,
                };
                vec![self.circular.rad, 0.0, wrap_angle(heading), 0.0, 0.0]
            }
            _ => {
                let (x, y, phi) = self.parking.start_pose();
                vec![x, y, phi, 0.0, 0.0]
            }
        }
    }

    pub fn run(&self, steps: usize, seed: u64) -> Result<(Trajectory, SimLog), SimRunError> {
        let traj = self.trajectory()?;
        let mut cfg = self.controller.clone();
        cfg.nn = cfg.nn.max(traj.len());
        let sim = SimConfig {
            steps,
            seed,
            noise: self.noise.clone(),
            plant: IntegratorConfig::new(Method::Rk4, cfg.dt).with_supnds(self.plant_supnds),
            weights: self.weights.clone(),
            constraints: self.constraints.clone(),
        };
        let model = Arc::new(builtin_kbm());
        let log = run_closed_loop(model.clone(), &model, traj.clone(), &self.initial_state(), cfg, &sim)?;
        Ok((traj, log))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimRunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
