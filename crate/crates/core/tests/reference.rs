mod common;

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use common::{dense_min_distance, figure_eight, figure_eight_offset, polyline, random_polyline};
use nlmpc::reference::{
    generate_references, localize, validate_trajectory, DriveMode, Localization, PathType, RefGenParams, ReferenceError,
    Segment, Trajectory, TrajectoryHeader, HEADER_LEN, SEGMENT_LEN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn header(ptype: PathType) -> TrajectoryHeader {
    TrajectoryHeader {
        t: 0.0,
        x: 0.0,
        y: 0.0,
        phi: 0.0,
        ptype,
    }
}

fn params(horizon: usize, ts: f64) -> RefGenParams {
    RefGenParams {
        horizon,
        ts,
        cuptime: 1.0,
        maxrefvelmod: 0.2,
    }
}

fn loc(seg: usize, s: f64) -> Localization {
    Localization {
        seg,
        s,
        dist: 0.0,
        lagging_time: 0.0,
    }
}

#[test]
fn garbage_tail_is_ignored() {
    let s_max = 4;
    let mut raw = vec![f64::NAN; HEADER_LEN + SEGMENT_LEN * s_max];
    raw[..6].copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    raw[6..17].copy_from_slice(&[0.0, 5.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.5, 1.5]);
    raw[17..28].copy_from_slice(&[0.0, 10.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.5, 1.5]);
    let t = validate_trajectory(&raw, s_max).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.header.ptype, PathType::Path);
    let back = t.to_flat();
    assert_eq!(&back[..28], &raw[..28]);
}

#[test]
fn invalid_arrays_are_rejected() {
    let mut raw = vec![0.0; HEADER_LEN + SEGMENT_LEN * 2];
    raw[4] = 1.0;
    assert_eq!(validate_trajectory(&raw, 2).unwrap_err(), ReferenceError::BadSegmentCount(0, 2));
    raw[5] = 3.0;
    assert_eq!(validate_trajectory(&raw, 2).unwrap_err(), ReferenceError::BadSegmentCount(3, 2));
    raw[5] = 1.0;
    raw[6 + 4] = -1.0;
    raw[6 + 8] = 1.0;
    assert_eq!(validate_trajectory(&raw, 2).unwrap_err(), ReferenceError::NegativeRefSpeed(1));
    raw[6 + 4] = 1.0;
    raw[4] = 3.0;
    assert!(matches!(validate_trajectory(&raw, 2), Err(ReferenceError::BadPtype(_))));
    raw[4] = 1.0;
    raw[6 + 8] = 5.0;
    assert!(matches!(validate_trajectory(&raw, 2), Err(ReferenceError::BadMode { segment: 1, .. })));
    assert!(matches!(validate_trajectory(&raw[1..], 2), Err(ReferenceError::BadLength { .. })));
}

#[test]
fn frame_transforms() {
    let t = polyline(&[(1.0, 0.0)], 1.0, PathType::Path, (0.0, 0.0, 0.0));
    assert_eq!(t.to_local(3.5, -2.0), (3.5, -2.0));

    let t = polyline(&[(1.0, 0.0)], 1.0, PathType::Path, (1.0, 2.0, FRAC_PI_2));
    let (x, y) = t.to_local(1.0, 3.0);
    assert!((x - 1.0).abs() < 1e-15 && y.abs() < 1e-15);
}

#[test]
fn localize_examples() {
    let t = polyline(&[(10.0, 0.0)], 1.0, PathType::Path, (0.0, 0.0, 0.0));
    let l = localize(&t, (5.0, 1.0), None, 3, None).unwrap();
    assert_eq!((l.seg, l.s, l.dist), (1, 5.0, 1.0));
    let l = localize(&t, (-1.0, 0.0), None, 3, None).unwrap();
    assert_eq!((l.seg, l.s, l.dist), (1, 0.0, 1.0));
}

#[test]
fn localization_stays_on_its_branch_of_a_figure_eight() {
    let nodes = figure_eight(80);
    let t = polyline(&nodes, 1.0, PathType::Path, (0.0, 0.0, 0.0));
    let o = figure_eight_offset();
    let p = (-o.0 + 0.5, -o.1 - 0.3);

    // the other branch, around segment 47, is closer
    let global = dense_min_distance(&nodes, 1, nodes.len(), p, 1e-3);
    let lower = dense_min_distance(&nodes, 1, 20, p, 1e-4);
    assert!(lower > global + 0.3);

    let l = localize(&t, p, Some(&loc(6, 0.0)), 2, None).unwrap();
    assert!((4..=10).contains(&l.seg), "jumped to segment {}", l.seg);
    assert!((l.dist - lower).abs() < 1e-3, "{} vs {lower}", l.dist);

    let free = localize(&t, p, None, nodes.len(), None).unwrap();
    assert!((free.dist - global).abs() < 1e-3);
}

#[test]
fn mode_filter_skips_other_segments() {
    let mut segs = vec![
        Segment::node(5.0, 0.0, 0.0, 1.0, DriveMode::Forward, 1.0),
        Segment::node(10.0, 0.0, 0.0, 1.0, DriveMode::Reverse, 1.0),
    ];
    segs[1].mode = DriveMode::Reverse;
    let t = Trajectory::new(header(PathType::Path), segs, 2).unwrap();
    let l = localize(&t, (8.0, 0.0), None, 2, Some(DriveMode::Forward)).unwrap();
    assert_eq!((l.seg, l.s), (1, 5.0));
    assert_eq!(
        localize(&t, (8.0, 0.0), None, 2, Some(DriveMode::Standstill)).unwrap_err(),
        ReferenceError::NoMatch(Some(DriveMode::Standstill))
    );
}

#[test]
fn straight_path_marches_by_speed_times_ts() {
    let t = polyline(&[(100.0, 0.0)], 2.0, PathType::Path, (0.0, 0.0, 0.0));
    let refs = generate_references(&t, &loc(1, 0.0), 0.0, &params(30, 0.1));
    assert_eq!(refs.len(), 30);
    for (k, r) in refs.iter().enumerate() {
        assert!((r.x - 0.2 * (k + 1) as f64).abs() < 1e-12);
        assert_eq!((r.y, r.phi, r.v), (0.0, 0.0, 2.0));
    }
}

#[test]
fn on_schedule_trajectory_keeps_speed() {
    let mut segs = vec![Segment::node(100.0, 0.0, 0.0, 2.0, DriveMode::Forward, 1.0)];
    segs[0].t = 50.0;
    let t = Trajectory::new(header(PathType::Trajectory), segs, 1).unwrap();
    // at now = 5 the schedule sits at s = 10
    let refs = generate_references(&t, &loc(1, 10.0), 5.0, &params(5, 0.1));
    assert!(refs.iter().all(|r| r.v == 2.0));
    // trailing the schedule raises the speed, capped by maxrefvelmod
    let refs = generate_references(&t, &loc(1, 0.0), 5.0, &params(5, 0.1));
    assert!(refs.iter().all(|r| (r.v - 2.4).abs() < 1e-12));
}

#[test]
fn circular_reference_wraps_to_first_node() {
    let n = 24;
    let nodes: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64;
            (10.0 * a.sin(), 10.0 - 10.0 * a.cos())
        })
        .collect();
    let t = polyline(&nodes, 5.0, PathType::Circular, (0.0, 0.0, 0.0));
    let refs = generate_references(&t, &loc(24, 1.0), 0.0, &params(10, 0.1));
    assert!(refs.iter().any(|r| r.seg == 1));
    assert!(refs.iter().all(|r| r.v == 5.0));
    assert!(refs.windows(2).all(|w| w[0].seg == w[1].seg || w[1].seg == w[0].seg % n + 1));

    let l = localize(&t, nodes[0], Some(&loc(24, 2.0)), 2, None).unwrap();
    assert!(l.seg == 1 || l.seg == 2);
}

#[test]
fn march_freezes_at_standstill_and_path_end() {
    let segs = vec![
        Segment::node(1.0, 0.0, 0.0, 2.0, DriveMode::Forward, 1.0),
        Segment::node(1.0, 0.0, 0.0, 0.0, DriveMode::Standstill, 1.0),
        Segment::node(0.0, 0.0, PI, 2.0, DriveMode::Reverse, 1.0),
    ];
    let t = Trajectory::new(header(PathType::Path), segs, 3).unwrap();
    let refs = generate_references(&t, &loc(1, 0.0), 0.0, &params(10, 0.1));
    assert!((refs[9].x - 1.0).abs() < 1e-12 && refs[9].v == 0.0);
    assert!(refs.iter().all(|r| r.mode == DriveMode::Forward));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn localization_matches_dense_sampling(seed in any::<u64>(), count in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = random_polyline(&mut rng, count);
        let t = polyline(&nodes, 1.0, PathType::Path, (0.0, 0.0, 0.0));
        let p = (rand::Rng::random_range(&mut rng, -15.0..15.0), rand::Rng::random_range(&mut rng, -15.0..15.0));
        let l = localize(&t, p, None, count, None).unwrap();
        let want = dense_min_distance(&nodes, 1, count, p, 1e-3);
        prop_assert!((l.dist - want).abs() < 1e-3);
        prop_assert!(l.s >= 0.0 && l.s <= t.segment_length(l.seg));
    }

    #[test]
    fn transforms_invert(hx in -50.0f64..50.0, hy in -50.0f64..50.0, phi in -4.0f64..4.0, px in -80.0f64..80.0, py in -80.0f64..80.0) {
        let t = polyline(&[(1.0, 0.0)], 1.0, PathType::Path, (hx, hy, phi));
        let (lx, ly) = t.to_local(px, py);
        let (gx, gy) = t.to_global(lx, ly);
        prop_assert!((gx - px).abs() < 1e-12 && (gy - py).abs() < 1e-12);
    }

    #[test]
    fn references_have_bounded_spacing_and_copied_corridors(
        seed in any::<u64>(),
        count in 2usize..10,
        horizon in 1usize..40,
        start in 0.0f64..1.0,
        lag in -20.0f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = random_polyline(&mut rng, count);
        let mut t0 = 0.0;
        let mut prev = (0.0, 0.0);
        let segs: Vec<Segment> = nodes.iter().map(|&(x, y)| {
            let mut s = Segment::node(x, y, (y - prev.1).atan2(x - prev.0), rand::Rng::random_range(&mut rng, 0.5..6.0), DriveMode::Forward, 0.0);
            t0 += (x - prev.0).hypot(y - prev.1) / s.v;
            s.t = t0;
            s.d_left = rand::Rng::random_range(&mut rng, -1.0..3.0);
            s.d_right = rand::Rng::random_range(&mut rng, -1.0..3.0);
            prev = (x, y);
            s
        }).collect();
        let traj = Trajectory::new(header(PathType::Trajectory), segs, count).unwrap();
        let seg = ((start * count as f64) as usize).min(count - 1) + 1;
        let p = params(horizon, 0.05);
        let refs = generate_references(&traj, &loc(seg, 0.0), lag.max(0.0), &p);
        prop_assert_eq!(refs.len(), horizon);
        let vmax = traj.segments().iter().map(|s| s.v).fold(0.0, f64::max);
        let bound = vmax * p.ts * (1.0 + p.maxrefvelmod) + 1e-12;
        let (sx, sy) = traj.point_on(seg, 0.0);
        let mut last = traj.to_global(sx, sy);
        for r in &refs {
            prop_assert!((r.x - last.0).hypot(r.y - last.1) <= bound);
            last = (r.x, r.y);
            let host = traj.segment(r.seg);
            prop_assert_eq!(r.d_left.to_bits(), host.d_left.to_bits());
            prop_assert_eq!(r.d_right.to_bits(), host.d_right.to_bits());
        }
    }

    #[test]
    fn path_timing_fields_are_ignored(seed in any::<u64>(), count in 2usize..10, now in 0.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = random_polyline(&mut rng, count);
        let a = polyline(&nodes, 3.0, PathType::Path, (1.0, -2.0, 0.3));
        let mut raw = a.to_flat();
        for i in 0..count {
            raw[HEADER_LEN + SEGMENT_LEN * i] = rand::Rng::random_range(&mut rng, -100.0..100.0);
        }
        let b = validate_trajectory(&raw, count).unwrap();
        let l = loc(1, 0.1);
        let ra = generate_references(&a, &l, now, &params(20, 0.1));
        let rb = generate_references(&b, &l, now, &params(20, 0.1));
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert!(x.to_array().iter().zip(y.to_array()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn flat_round_trip_is_value_identical(seed in any::<u64>(), count in 1usize..10, spare in 0usize..4, ptype in 0i64..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_max = count + spare;
        let mut raw: Vec<f64> = (0..HEADER_LEN + SEGMENT_LEN * s_max).map(|_| rand::Rng::random_range(&mut rng, -9.0..9.0)).collect();
        raw[4] = ptype as f64;
        raw[5] = count as f64;
        for i in 0..count {
            let o = HEADER_LEN + SEGMENT_LEN * i;
            raw[o + 4] = raw[o + 4].abs();
            raw[o + 8] = (i % 3) as f64;
        }
        let t = validate_trajectory(&raw, s_max).unwrap();
        let back = t.to_flat();
        let used = HEADER_LEN + SEGMENT_LEN * count;
        prop_assert_eq!(&back[..used], &raw[..used]);
        prop_assert_eq!(validate_trajectory(&back, s_max).unwrap(), t);
    }
}
