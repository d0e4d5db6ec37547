#![allow(dead_code)]

use std::sync::Arc;

use nlmpc::dynamics::{IntegratorConfig, Method};
use nlmpc::ftocp::{FtocpInstance, InputConstraints, PenaltyParams, Weights};
use nlmpc::model::builtin_kbm;
use nlmpc::reference::{DriveMode, RefPoint};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn default_constraints() -> InputConstraints {
    InputConstraints::new(vec![-5.0, -0.5], vec![2.5, 0.5], vec![-10.0, -2.0], vec![10.0, 2.0]).unwrap()
}

/// Reference points along a circular arc (or a straight line for `curv == 0`)
/// starting at the origin with heading `phi0`.
pub fn arc_refs(n_h: usize, ts: f64, v: f64, phi0: f64, curv: f64, width: f64) -> Vec<RefPoint> {
    let l = 2.843;
    (1..=n_h)
        .map(|k| {
            let s = v * ts * k as f64;
            let (x, y, phi) = if curv.abs() < 1e-12 {
                (s * phi0.cos(), s * phi0.sin(), phi0)
            } else {
                let th = s * curv;
                let r = 1.0 / curv;
                (
                    r * ((phi0 + th).sin() - phi0.sin()),
                    -r * ((phi0 + th).cos() - phi0.cos()),
                    phi0 + th,
                )
            };
            RefPoint {
                x,
                y,
                phi,
                v,
                a: 0.0,
                delta: (l * curv).atan(),
                beta: 0.0,
                d_left: width,
                d_right: width,
                mode: DriveMode::Forward,
                seg: 1,
            }
        })
        .collect()
}

/// Random KBM tracking problem around a curved reference.
pub fn random_instance(rng: &mut ChaCha8Rng, n_h: usize) -> FtocpInstance {
    let ts = 0.05;
    let v = rng.random_range(1.0..8.0);
    let curv = rng.random_range(-0.05..0.05);
    let phi0 = rng.random_range(-3.0..3.0);
    let width = rng.random_range(0.3..1.5);
    let refs = arc_refs(n_h, ts, v, phi0, curv, width);
    let lat = rng.random_range(-1.0..1.0);
    let z0 = vec![
        -lat * phi0.sin() + rng.random_range(-0.3..0.3),
        lat * phi0.cos() + rng.random_range(-0.3..0.3),
        phi0 + rng.random_range(-0.15..0.15),
        v + rng.random_range(-1.5..1.5),
        rng.random_range(-0.1..0.1),
    ];
    let weights = Weights::new(
        vec![rng.random_range(0.05..2.0), rng.random_range(0.5..20.0)],
        vec![
            rng.random_range(0.1..5.0),
            rng.random_range(0.5..20.0),
            rng.random_range(0.5..20.0),
            rng.random_range(0.1..5.0),
            rng.random_range(0.0..1.0),
        ],
    )
    .unwrap();
    let cons = default_constraints();
    let u_prev = vec![rng.random_range(-5.0..2.5), rng.random_range(-0.5..0.5)];
    FtocpInstance::new(
        Arc::new(builtin_kbm()),
        IntegratorConfig::new(Method::Rk4, ts),
        refs,
        weights,
        cons,
        PenaltyParams::new(rng.random_range(10.0..200.0), 0.1).unwrap(),
        u_prev,
        z0,
    )
    .unwrap()
}

/// Random feasible input sequence.
pub fn random_feasible(rng: &mut ChaCha8Rng, inst: &FtocpInstance) -> Vec<f64> {
    let m = inst.m();
    let mut u: Vec<f64> = (0..inst.horizon() * m)
        .map(|i| {
            let j = i % m;
            rng.random_range(inst.constraints.u_min[j]..inst.constraints.u_max[j])
        })
        .collect();
    inst.project_feasible_in_place(&mut u);
    u
}

/// Kinematic bicycle right-hand side, written out independently of the DSL.
pub fn kbm_rhs(z: &[f64], u: &[f64]) -> [f64; 5] {
    let beta = (0.6113 * z[4].tan()).atan();
    [
        z[3] * (z[2] + beta).cos(),
        z[3] * (z[2] + beta).sin(),
        z[3] * beta.cos() * z[4].tan() / 2.843,
        u[0],
        u[1],
    ]
}

/// Classical RK4 on `kbm_rhs` with `steps` sub-steps over `dt`.
pub fn kbm_oracle(z: &[f64], u: &[f64], dt: f64, steps: usize) -> [f64; 5] {
    let h = dt / steps as f64;
    let mut x: [f64; 5] = z.try_into().unwrap();
    let add = |x: &[f64; 5], k: &[f64; 5], c: f64| std::array::from_fn::<f64, 5, _>(|i| x[i] + c * k[i]);
    for _ in 0..steps {
        let k1 = kbm_rhs(&x, u);
        let k2 = kbm_rhs(&add(&x, &k1, h / 2.0), u);
        let k3 = kbm_rhs(&add(&x, &k2, h / 2.0), u);
        let k4 = kbm_rhs(&add(&x, &k3, h), u);
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    x
}

/// Error-reduction factor of one explicit method when `dt` is halved, summed
/// over `states` random KBM states.
pub fn order_factor(method: Method, dt: f64, states: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let model = builtin_kbm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut coarse, mut fine) = (0.0, 0.0);
    for _ in 0..states {
        let z = [
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(1.0..8.0),
            rng.random_range(-0.4..0.4),
        ];
        let u = [rng.random_range(-2.0..2.0), rng.random_range(-0.3..0.3)];
        for (h, acc) in [(dt, &mut coarse), (dt / 2.0, &mut fine)] {
            let got = nlmpc::dynamics::integrate_step(&model, &z, &u, &IntegratorConfig::new(method, h)).unwrap();
            let want = kbm_oracle(&z, &u, h, 4000);
            *acc += got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        }
    }
    coarse / fine
}

/// Model text with the mandatory skeleton and the given derivative bodies.
pub fn skeleton_model(rhs: [&str; 5]) -> nlmpc::model::ModelSpec {
    let mut t = String::from("states: x, y, phi, v, delta\ninputs: a, ddelta\nparameters:\n");
    for (s, e) in ["x", "y", "phi", "v", "delta"].iter().zip(rhs) {
        t.push_str(&format!("dot({s})={e};\n"));
    }
    nlmpc::model::parse_model(&t).unwrap()
}

/// Path through the given local nodes (the root is the origin) with headings
/// from the node differences.
pub fn polyline(
    nodes: &[(f64, f64)],
    v: f64,
    ptype: nlmpc::reference::PathType,
    header: (f64, f64, f64),
) -> nlmpc::reference::Trajectory {
    use nlmpc::reference::{Segment, Trajectory, TrajectoryHeader};
    let mut prev = (0.0, 0.0);
    let segs: Vec<Segment> = nodes
        .iter()
        .map(|&(x, y)| {
            let phi = (y - prev.1).atan2(x - prev.0);
            prev = (x, y);
            Segment::node(x, y, phi, v, DriveMode::Forward, 1.0)
        })
        .collect();
    let n = segs.len();
    Trajectory::new(
        TrajectoryHeader {
            t: 0.0,
            x: header.0,
            y: header.1,
            phi: header.2,
            ptype,
        },
        segs,
        n,
    )
    .unwrap()
}

/// Minimum distance from `p` to segments `first..=last` (1-based) of the
/// polyline starting at the origin, by sampling every `spacing` metres.
pub fn dense_min_distance(nodes: &[(f64, f64)], first: usize, last: usize, p: (f64, f64), spacing: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in first..=last {
        let a = if i == 1 { (0.0, 0.0) } else { nodes[i - 2] };
        let b = nodes[i - 1];
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let k = (len / spacing).ceil().max(1.0) as usize;
        for j in 0..=k {
            let f = j as f64 / k as f64;
            let q = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
            best = best.min((p.0 - q.0).hypot(p.1 - q.1));
        }
    }
    best
}

/// Random walk polyline with `count` nodes and segment lengths in 0.5..5 m.
pub fn random_polyline(rng: &mut ChaCha8Rng, count: usize) -> Vec<(f64, f64)> {
    let mut heading: f64 = rng.random_range(-3.0..3.0);
    let mut p = (0.0, 0.0);
    (0..count)
        .map(|_| {
            heading += rng.random_range(-1.2..1.2);
            let len = rng.random_range(0.5..5.0);
            p = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
            p
        })
        .collect()
}

/// Figure-eight `(10 sin t, 5 sin 2t)` sampled at `count + 1` parameters from
/// `t = -0.5`, shifted so the first sample is the origin.
pub fn figure_eight(count: usize) -> Vec<(f64, f64)> {
    let at = |k: usize| {
        let t = -0.5 + std::f64::consts::TAU * k as f64 / count as f64;
        (10.0 * t.sin(), 5.0 * (2.0 * t).sin())
    };
    let o = at(0);
    (1..=count).map(|k| (at(k).0 - o.0, at(k).1 - o.1)).collect()
}

pub fn figure_eight_offset() -> (f64, f64) {
    (-10.0 * 0.5f64.sin(), -5.0 * 1.0f64.sin())
}
