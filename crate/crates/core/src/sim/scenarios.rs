//! Reference generators for the circular-path and parking examples.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use thiserror::Error;

use crate::reference::{
    wrap_angle, DriveMode, PathType, ReferenceError, Segment, Trajectory, TrajectoryHeader,
};

/// Wheelbase and rear-axle ratio of the built-in kinematic bicycle model.
pub const KBM_WHEELBASE: f64 = 2.843;
pub const KBM_REAR_RATIO: f64 = 0.6113;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario parameter {name} = {value}")]
    Invalid { name: &'static str, value: f64 },
    #[error("obstacle protrusion {0} exceeds the corridor width")]
    Infeasible(f64),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
}

fn check(name: &'static str, value: f64, ok: bool) -> Result<(), ScenarioError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::Invalid { name, value })
    }
}

/// Steady-state steering angle of the CoG-referenced bicycle on a circle of
/// radius `radius` (signed: positive turns left).
pub fn steady_steering(radius: f64) -> f64 {
    if !radius.is_finite() || radius == 0.0 {
        return 0.0;
    }
    let q = KBM_WHEELBASE / radius.abs();
    let c = KBM_REAR_RATIO;
    let s = (1.0 - c * c * q * q).max(1e-12).sqrt();
    radius.signum() * (q / s).atan()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularScenario {
    /// Circle radius, m.
    pub rad: f64,
    pub vref: f64,
    /// Angular size of the full-protrusion part of an obstacle, rad.
    pub alpha: f64,
    /// Angular length of the linear transition on each side, rad.
    pub beta: f64,
    /// Protrusion of the obstacles passed on the inside, m.
    pub oin: f64,
    /// Protrusion of the obstacles passed on the outside, m.
    pub oout: f64,
    pub pwidth: f64,
    /// Number of nodes on the circle.
    pub nn: usize,
    pub direction: DriveMode,
}

impl Default for CircularScenario {
    fn default() -> Self {
        CircularScenario {
            rad: 30.0,
            vref: 5.0,
            alpha: 10f64.to_radians(),
            beta: 10f64.to_radians(),
            oin: 1.2,
            oout: 1.2,
            pwidth: 5.0,
            nn: 48,
            direction: DriveMode::Forward,
        }
    }
}

impl CircularScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        check("Rad", self.rad, self.rad > 0.0)?;
        check("vref", self.vref, self.vref > 0.0)?;
        check("alpha", self.alpha, self.alpha > 0.0)?;
        check("beta", self.beta, self.beta > 0.0)?;
        check("alpha", self.alpha, 4.0 * (self.alpha + 2.0 * self.beta) < TAU)?;
        check("pwidth", self.pwidth, self.pwidth > 0.0)?;
        check("Oin", self.oin, self.oin >= 0.0)?;
        check("Oout", self.oout, self.oout >= 0.0)?;
        check("Nn", self.nn as f64, self.nn >= 8)?;
        if self.direction == DriveMode::Standstill {
            return Err(ScenarioError::Invalid { name: "direction", value: 0.0 });
        }
        for o in [self.oin, self.oout] {
            if o > self.pwidth {
                return Err(ScenarioError::Infeasible(o));
            }
        }
        Ok(())
    }

    /// Obstacle weight in `[0, 1]` at polar angle `theta` for an obstacle centred at `center`.
    pub fn obstacle_weight(&self, theta: f64, center: f64) -> f64 {
        let d = wrap_angle(theta - center).abs();
        let half = 0.5 * self.alpha;
        if d <= half {
            1.0
        } else if d < half + self.beta {
            1.0 - (d - half) / self.beta
        } else {
            0.0
        }
    }

    /// Left and right corridor half-widths at polar angle `theta`. Obstacles
    /// at 0 and π stand on the inside of the circle and push the corridor
    /// outward; those at π/2 and 3π/2 stand outside and push it inward.
    pub fn corridor(&self, theta: f64) -> (f64, f64) {
        let half = 0.5 * self.pwidth;
        let out = self.obstacle_weight(theta, 0.0).max(self.obstacle_weight(theta, PI));
        let inn = self
            .obstacle_weight(theta, FRAC_PI_2)
            .max(self.obstacle_weight(theta, 3.0 * FRAC_PI_2));
        // the centre of the circle is on the left of counter-clockwise travel
        let shift = self.oin * inn - self.oout * out;
        (half + shift, half - shift)
    }
}

/// Counter-clockwise circle with its centre at the global origin. The local
/// frame sits at the root node `(Rad, 0)`, unrotated.
pub fn scenario_circular(sc: &CircularScenario) -> Result<Trajectory, ScenarioError> {
    sc.validate()?;
    let n = sc.nn;
    let delta = sc.direction.sign() * steady_steering(sc.rad);
    let chord = 2.0 * sc.rad * (PI / n as f64).sin();
    let mut segs = Vec::with_capacity(n);
    for k in 1..=n {
        let th0 = TAU * (k - 1) as f64 / n as f64;
        let th1 = TAU * k as f64 / n as f64;
        let (x, y) = (sc.rad * th1.cos() - sc.rad, sc.rad * th1.sin());
        let phi = wrap_angle(0.5 * (th0 + th1) + FRAC_PI_2);
        let (dl, dr) = sc.corridor(0.5 * (th0 + th1));
        segs.push(Segment {
            t: k as f64 * chord / sc.vref,
            x,
            y,
            phi,
            v: sc.vref,
            a: 0.0,
            delta,
            beta: 0.0,
            mode: sc.direction,
            d_left: dl,
            d_right: dr,
        });
    }
    // close the loop exactly on the root
    let last = segs.last_mut().unwrap();
    last.x = 0.0;
    last.y = 0.0;
    let header = TrajectoryHeader {
        t: 0.0,
        x: sc.rad,
        y: 0.0,
        phi: 0.0,
        ptype: PathType::Circular,
    };
    Ok(Trajectory::new(header, segs, n)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParkingVariant {
    /// Forward run first, reverse into the slot.
    Reverse,
    /// Reverse run first, drive forward into the slot.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParkingScenario {
    pub l1: f64,
    pub r1: f64,
    pub r2: f64,
    pub l2: f64,
    pub vref: f64,
    pub pwidth: f64,
    pub variant: ParkingVariant,
    /// Acceleration and deceleration magnitudes of the speed profile, m/s².
    pub accel: f64,
    pub decel: f64,
    /// Lower limit of the reference speed on moving segments, m/s.
    pub v_floor: f64,
    /// Maximum sampling distance along the path, m.
    pub spacing: f64,
}

impl Default for ParkingScenario {
    fn default() -> Self {
        ParkingScenario {
            l1: 20.0,
            r1: 12.0,
            r2: 12.0,
            l2: 10.0,
            vref: 2.0,
            pwidth: 3.0,
            variant: ParkingVariant::Reverse,
            accel: 2.0,
            decel: 4.0,
            v_floor: 0.3,
            spacing: 0.5,
        }
    }
}

impl ParkingScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, v) in [
            ("L1", self.l1),
            ("R1", self.r1),
            ("R2", self.r2),
            ("L2", self.l2),
            ("vref", self.vref),
            ("pwidth", self.pwidth),
            ("accel", self.accel),
            ("decel", self.decel),
            ("spacing", self.spacing),
        ] {
            check(name, v, v > 0.0)?;
        }
        check("v_floor", self.v_floor, self.v_floor > 0.0 && self.v_floor <= self.vref)?;
        Ok(())
    }

    /// Modes of the first and second run.
    pub fn modes(&self) -> (DriveMode, DriveMode) {
        match self.variant {
            ParkingVariant::Reverse => (DriveMode::Forward, DriveMode::Reverse),
            ParkingVariant::Forward => (DriveMode::Reverse, DriveMode::Forward),
        }
    }

    /// Position and vehicle heading at the start of the manoeuvre.
    pub fn start_pose(&self) -> (f64, f64, f64) {
        let (m1, _) = self.modes();
        (0.0, 0.0, heading_of(FRAC_PI_2, m1))
    }

    /// Position and vehicle heading at the end of the manoeuvre.
    pub fn end_pose(&self) -> (f64, f64, f64) {
        let (_, m2) = self.modes();
        (
            self.r1 - self.r2,
            self.l1 + self.r1 + self.r2 + self.l2,
            heading_of(FRAC_PI_2, m2),
        )
    }

    /// Arc samples per turn: `ceil(length / spacing)`, at least 6.
    pub fn arc_samples(&self, radius: f64) -> usize {
        ((FRAC_PI_2 * radius / self.spacing).ceil() as usize).max(6)
    }
}

fn heading_of(travel: f64, mode: DriveMode) -> f64 {
    match mode {
        DriveMode::Reverse => wrap_angle(travel + PI),
        _ => wrap_angle(travel),
    }
}

/// Geometric node of one run before speeds are assigned.
struct Node {
    x: f64,
    y: f64,
    /// Signed path curvature of the segment ending here (left positive).
    curv: f64,
}

fn straight(nodes: &mut Vec<Node>, from: (f64, f64), dir: f64, len: f64, spacing: f64) {
    let k = ((len / spacing).ceil() as usize).max(1);
    for i in 1..=k {
        let s = len * i as f64 / k as f64;
        nodes.push(Node {
            x: from.0 + s * dir.cos(),
            y: from.1 + s * dir.sin(),
            curv: 0.0,
        });
    }
}

/// Quarter arc of radius `r` about `center`, sweeping from polar angle `a0` by `sweep`.
fn arc(nodes: &mut Vec<Node>, center: (f64, f64), r: f64, a0: f64, sweep: f64, k: usize) {
    for i in 1..=k {
        let a = a0 + sweep * i as f64 / k as f64;
        nodes.push(Node {
            x: center.0 + r * a.cos(),
            y: center.1 + r * a.sin(),
            curv: sweep.signum() / r,
        });
    }
}

/// Trapezoidal speed profile over a run of nodes starting at `start`.
fn run_segments(
    sc: &ParkingScenario,
    start: (f64, f64),
    nodes: &[Node],
    mode: DriveMode,
    half: f64,
) -> Vec<Segment> {
    let mut cum = Vec::with_capacity(nodes.len() + 1);
    cum.push(0.0);
    let mut p = start;
    for n in nodes {
        cum.push(cum.last().unwrap() + (n.x - p.0).hypot(n.y - p.1));
        p = (n.x, n.y);
    }
    let total = *cum.last().unwrap();
    let mut t = 0.0;
    let mut p = start;
    nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mid = 0.5 * (cum[i] + cum[i + 1]);
            let up = (2.0 * sc.accel * mid).sqrt();
            let down = (2.0 * sc.decel * (total - mid)).sqrt();
            let v = sc.vref.min(up).min(down).max(sc.v_floor);
            let a = if v >= sc.vref {
                0.0
            } else if up <= down {
                sc.accel
            } else {
                -sc.decel
            };
            let len = cum[i + 1] - cum[i];
            t += len / v;
            let phi = (n.y - p.1).atan2(n.x - p.0);
            p = (n.x, n.y);
            let delta = if n.curv == 0.0 { 0.0 } else { mode.sign() * steady_steering(1.0 / n.curv) };
            Segment {
                t,
                x: n.x,
                y: n.y,
                phi,
                v,
                a,
                delta,
                beta: 0.0,
                mode,
                d_left: half,
                d_right: half,
            }
        })
        .collect()
}

/// Parking path: straight `L1` north from the origin, right turn of radius
/// `R1` ending eastbound at B, a standstill node at B, a right turn (in the
/// direction of travel) of radius `R2` ending northbound, and a final
/// straight `L2`. The local frame coincides with the global one.
pub fn scenario_parking(sc: &ParkingScenario) -> Result<Trajectory, ScenarioError> {
    sc.validate()?;
    let (m1, m2) = sc.modes();
    let half = 0.5 * sc.pwidth;

    let mut first = Vec::new();
    straight(&mut first, (0.0, 0.0), FRAC_PI_2, sc.l1, sc.spacing);
    arc(&mut first, (sc.r1, sc.l1), sc.r1, PI, -FRAC_PI_2, sc.arc_samples(sc.r1));
    let b = (sc.r1, sc.l1 + sc.r1);

    let mut second = Vec::new();
    let c2 = (b.0, b.1 + sc.r2);
    arc(&mut second, c2, sc.r2, -FRAC_PI_2, -FRAC_PI_2, sc.arc_samples(sc.r2));
    let turn_end = (b.0 - sc.r2, c2.1);
    straight(&mut second, turn_end, FRAC_PI_2, sc.l2, sc.spacing);

    let mut segs = run_segments(sc, (0.0, 0.0), &first, m1, half);
    let t_b = segs.last().unwrap().t;
    segs.push(Segment {
        t: t_b,
        x: b.0,
        y: b.1,
        phi: 0.0,
        v: 0.0,
        a: 0.0,
        delta: 0.0,
        beta: 0.0,
        mode: DriveMode::Standstill,
        d_left: half,
        d_right: half,
    });
    let mut rest = run_segments(sc, b, &second, m2, half);
    for s in &mut rest {
        s.t += t_b;
    }
    segs.extend(rest);
    let header = TrajectoryHeader {
        t: 0.0,
        x: 0.0,
        y: 0.0,
        phi: 0.0,
        ptype: PathType::Path,
    };
    let n = segs.len();
    Ok(Trajectory::new(header, segs, n)?)
}
