mod common;

use nlmpc::ftocp::{Constraint, ConstraintLayout, Side};
use nlmpc::nas::{
    build_local_qp, dense_kkt_solve, initial_active_set, nas_solve, project_direction,
    release_constraints, solve_kkt, warm_start, ActiveSet, NasConfig, NasResult, Termination,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> NasConfig {
    NasConfig {
        maxit: 30,
        ..NasConfig::default()
    }
}

#[test]
fn iterates_stay_feasible_and_costs_decrease() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..40 {
        let n_h = if t % 2 == 0 { 5 } else { 20 };
        let inst = common::random_instance(&mut rng, n_h);
        let u0 = common::random_feasible(&mut rng, &inst);
        let r = nas_solve(&inst, &u0, &cfg());
        assert!(r.residual_history.iter().all(|&g| g <= 1e-12), "{:?}", r.residual_history);
        for w in r.cost_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(r.cost <= r.cost_history[0]);
        assert!(inst.max_residual(&r.u) <= 1e-12);
    }
}

#[test]
fn solver_reaches_kkt_on_easy_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut kkt = 0;
    for _ in 0..20 {
        let inst = common::random_instance(&mut rng, 10);
        let u0 = vec![0.0; 20];
        let r = nas_solve(&inst, &inst.project_feasible(&u0), &NasConfig { maxit: 100, ..cfg() });
        if r.termination == Termination::KktSatisfied {
            kkt += 1;
        }
    }
    assert!(kkt >= 10, "{kkt}");
}

#[test]
fn zero_maxit_returns_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inst = common::random_instance(&mut rng, 5);
    let u0 = common::random_feasible(&mut rng, &inst);
    let r = nas_solve(&inst, &u0, &NasConfig { maxit: 0, ..cfg() });
    assert_eq!(r.u, u0);
    assert_eq!(r.z, inst.rollout(&u0).unwrap());
    assert_eq!(r.iterations, 0);
}

#[test]
fn stationary_start_terminates_immediately() {
    // references produced by the model itself from zero inputs
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut inst = common::random_instance(&mut rng, 6);
    inst.z0[4] = 0.0;
    inst.u_prev = vec![0.0, 0.0];
    let z = inst.rollout(&[0.0; 12]).unwrap();
    for k in 0..6 {
        let zk = &z[(k + 1) * 5..(k + 2) * 5];
        let r = &mut inst.refs[k];
        r.x = zk[0];
        r.y = zk[1];
        r.phi = zk[2];
        r.v = zk[3];
        r.a = 0.0;
        r.delta = 0.0;
    }
    let r = nas_solve(&inst, &[0.0; 12], &cfg());
    assert_eq!(r.termination, Termination::KktSatisfied);
    assert_eq!(r.iterations, 1);
    assert!(r.u.iter().all(|&x| x == 0.0));
    assert!(r.cost.abs() < 1e-20);
}

#[test]
fn warm_start_shifts_and_clamps() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut inst = common::random_instance(&mut rng, 3);
    inst.u_prev = vec![0.1, 0.0];
    assert_eq!(warm_start(None, &inst), vec![0.0; 6]);
    let prev = NasResult {
        u: vec![0.0, 0.0, 0.1, 0.01, 0.2, 0.02],
        z: vec![],
        cost: 0.0,
        iterations: 1,
        termination: Termination::KktSatisfied,
        active: vec![],
        cost_history: vec![],
        residual_history: vec![],
        projections: vec![],
    };
    assert_eq!(warm_start(Some(&prev), &inst), vec![0.1, 0.01, 0.2, 0.02, 0.2, 0.02]);
    inst.constraints.u_max[0] = 0.15;
    let u = warm_start(Some(&prev), &inst);
    assert!(inst.max_residual(&u) <= 1e-12);
    assert_eq!(u, vec![0.1, 0.01, 0.15, 0.02, 0.15, 0.02]);
}

#[test]
fn projection_examples() {
    let layout = ConstraintLayout { horizon: 4, m: 2 };
    let act = ActiveSet::new(layout);
    let mut d = vec![0.0, 0.1, 0.0, 0.2, 0.0, 0.3, 0.0, 0.4];
    project_direction(&mut d, layout.id(Constraint::Bound { k: 2, j: 1, side: Side::Upper }), &act);
    assert_eq!(d[5], 0.0);

    let mut d = vec![0.0, 0.2, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0];
    project_direction(&mut d, layout.id(Constraint::Rate { k: 1, j: 1, side: Side::Lower }), &act);
    assert!((d[1] - 0.4).abs() < 1e-15 && (d[3] - 0.4).abs() < 1e-15);

    let act = ActiveSet::from_ids(layout, [layout.id(Constraint::Bound { k: 1, j: 1, side: Side::Lower })]);
    let mut d = vec![0.0, 0.2, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0];
    project_direction(&mut d, layout.id(Constraint::Rate { k: 1, j: 1, side: Side::Lower }), &act);
    assert_eq!((d[1], d[3]), (0.0, 0.0));
}

#[test]
fn release_threshold() {
    let layout = ConstraintLayout { horizon: 2, m: 1 };
    let ids = [0usize, 3, 4];
    for (mu, released) in [(-1e-6, true), (-1e-10, false), (0.3, false)] {
        let mut act = ActiveSet::from_ids(layout, ids);
        let id = act.ids()[0];
        let out = release_constraints(&[(id, mu)], &mut act, 1e-8);
        assert_eq!(out.len() == 1, released);
        assert_eq!(act.contains(id), !released);
    }
}

#[test]
fn structured_kkt_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..30 {
        let inst = common::random_instance(&mut rng, 5);
        let u = common::random_feasible(&mut rng, &inst);
        let z = inst.rollout(&u).unwrap();
        let qp = build_local_qp(&inst, &u, &z, 1e-6).unwrap();
        let ids: Vec<usize> = (0..inst.layout().count()).filter(|_| rng.random_bool(0.35)).collect();
        let act = ActiveSet::from_ids(inst.layout(), ids);
        let (_, sol) = solve_kkt(&qp, &act, 1).unwrap();
        let (xi, _) = dense_kkt_solve(&qp, &act).unwrap();
        let scale = 1.0 + xi.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for (a, b) in sol.xi.iter().zip(&xi) {
            assert!((a - b).abs() <= 1e-8 * scale);
        }
    }
}

#[test]
fn initial_active_set_detects_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inst = common::random_instance(&mut rng, 4);
    let mut u = vec![0.0; 8];
    inst.project_feasible_in_place(&mut u);
    let (_, hi) = inst.bounds(0, 0);
    u[0] = hi;
    inst.project_feasible_in_place(&mut u);
    let act = initial_active_set(&inst, &u);
    assert!(act.contains(inst.layout().id(Constraint::Bound { k: 0, j: 0, side: Side::Upper })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn block_cholesky_reproduces_schur_complement(seed in any::<u64>(), n_h in 1usize..12, density in 0.0f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng, n_h);
        let u = common::random_feasible(&mut rng, &inst);
        let z = inst.rollout(&u).unwrap();
        let qp = build_local_qp(&inst, &u, &z, 1e-6).unwrap();
        let ids: Vec<usize> = (0..inst.layout().count()).filter(|_| rng.random_bool(density)).collect();
        let act = ActiveSet::from_ids(inst.layout(), ids);
        let (fac, _) = solve_kkt(&qp, &act, 1).unwrap();
        let s = fac.dense_schur();
        let l = fac.dense_l();
        let diff = (&l * l.transpose() - &s).abs().max();
        prop_assert!(diff <= 1e-10 * s.abs().max().max(f64::MIN_POSITIVE), "{} vs {}", diff, s.abs().max());
    }

    #[test]
    fn iterates_are_feasible_and_monotone(seed in any::<u64>(), long in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng, if long { 20 } else { 5 });
        let u0 = common::random_feasible(&mut rng, &inst);
        let r = nas_solve(&inst, &u0, &cfg());
        prop_assert!(r.residual_history.iter().all(|&g| g <= 1e-12));
        prop_assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(r.iterations <= cfg().maxit);
    }

    #[test]
    fn carried_solution_never_starts_worse(seed in any::<u64>()) {
        // the same problem solved again from its previous solution
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng, 10);
        let cold0 = warm_start(None, &inst);
        let cold = nas_solve(&inst, &cold0, &cfg());
        let warm = nas_solve(&inst, &cold.u, &NasConfig { maxit: 1, ..cfg() });
        let cold_first = cold.cost_history.get(1).copied().unwrap_or(cold.cost);
        prop_assert!(warm.cost <= cold_first + 1e-12);
    }
}
