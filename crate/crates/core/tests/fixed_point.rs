use std::sync::Arc;

use lamlab_core::fixedpoint::{
    build_t, direction_preserving_refit, evaluate_profile, find_fixed_point, linear_direction, linear_node_vector,
    member_t, random_theta_point, verify_joint_laminate, Directions, FailureReason, FixedPointConfig, Outcome,
};
use lamlab_core::geometry::{build_unit_cube_triangulation, Triangulation};
use lamlab_core::hn::{validate_certificate, RankOne};
use lamlab_core::lp::{certifies_infeasible, minimize};
use lamlab_core::pipeline::{build_instance, InstanceKind};
use lamlab_core::pwa::PeriodicPwaMap;
use lamlab_core::scalar::{max_abs, sub_vec, Rational, Scalar};
use lamlab_core::theta::{build_theta, select_tuples, TupleSelection};
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mesh(r: u32) -> Arc<Triangulation> {
    Arc::new(build_unit_cube_triangulation(2, r).unwrap())
}

fn selection<S: Scalar>(tri: &Arc<Triangulation>, kind: InstanceKind, seed: u64) -> (PeriodicPwaMap<S>, TupleSelection<S>) {
    let map = build_instance::<S>(tri.clone(), kind, 3, seed).unwrap();
    let sel = select_tuples(&map.extract_measure(), tri, None).unwrap();
    (map, sel)
}

fn random_cost(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn direction_is_linear_in_the_weights() {
    let kinds = [InstanceKind::Random, InstanceKind::Scaled, InstanceKind::Separable];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let tri = mesh((seed % 2) as u32);
        let (_, sel) = selection::<f64>(&tri, kinds[seed as usize % 3], seed);
        let theta = build_theta(&sel).unwrap();
        let s = random_theta_point(&theta, &mut rng).unwrap();
        let p = evaluate_profile(&s, &sel, &theta).unwrap();
        for k in 0..sel.m - 1 {
            for i in 0..(1 << k) {
                let lin = linear_direction(&sel.y, &s, sel.m, k, i);
                worst = worst.max(max_abs(&sub_vec(&lin, &p.dy[k][i])));
                let lin_x = linear_direction(&sel.x, &s, sel.m, k, i);
                worst = worst.max(max_abs(&sub_vec(&lin_x, &p.dx[k][i])));
            }
        }
    }
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}

#[test]
fn exact_linearity_on_the_polytope() {
    let (_, sel) = selection::<Rational>(&mesh(1), InstanceKind::Random, 3);
    let theta = build_theta(&sel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_theta_point(&theta, &mut rng).unwrap();
    let p = evaluate_profile(&s, &sel, &theta).unwrap();
    for k in 0..sel.m - 1 {
        for i in 0..(1 << k) {
            assert_eq!(linear_direction(&sel.y, &s, sel.m, k, i), p.dy[k][i]);
        }
    }
}

#[test]
fn profile_conserves_weight_and_barycenter() {
    let (_, sel) = selection::<Rational>(&mesh(1), InstanceKind::Random, 5);
    let theta = build_theta(&sel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_theta_point(&theta, &mut rng).unwrap();
    let p = evaluate_profile(&s, &sel, &theta).unwrap();
    let root_y = linear_node_vector(&sel.y, &s, sel.m, 0, 0);
    for k in 0..=sel.m {
        let total = p.weights[k].iter().fold(Rational::zero(), |a, w| a + w.clone());
        assert_eq!(total, Rational::one());
        let mut bary = vec![Rational::zero(); sel.dim()];
        for (w, y) in p.weights[k].iter().zip(&p.y[k]) {
            for (b, c) in bary.iter_mut().zip(y) {
                *b = b.clone() + w.clone() * c.clone();
            }
        }
        assert_eq!(bary, root_y, "level {k}");
    }
    for level in &p.lambdas {
        assert!(level.iter().all(|l| *l >= Rational::zero() && *l <= Rational::one()));
    }
}

/// Instances where `T(t)` is known to be nonempty at the selection weights.
fn nonempty_cases() -> Vec<TupleSelection<f64>> {
    let mut out = Vec::new();
    for seed in 0..4 {
        out.push(selection::<f64>(&mesh(1), InstanceKind::Identical, seed).1);
        out.push(selection::<f64>(&mesh(1), InstanceKind::Scaled, seed).1);
        out.push(selection::<f64>(&mesh(0), InstanceKind::Random, seed).1);
    }
    out
}

#[test]
fn t_is_midpoint_convex() {
    let cfg = FixedPointConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut violations = 0;
    let mut samples = 0;
    let cases = nonempty_cases();
    let per_case = 500usize.div_ceil(cases.len());
    for sel in &cases {
        let theta = build_theta(sel).unwrap();
        let t = sel.t_bar.clone();
        let tp = build_t(&t, sel, &theta).unwrap();
        let members: Vec<Vec<f64>> =
            (0..4).map(|_| minimize(&tp.system, &random_cost(sel.leaves(), &mut rng)).unwrap()).collect();
        for s in &members {
            assert!(member_t(s, &t, sel, &theta, &cfg).unwrap());
        }
        for _ in 0..per_case {
            let (a, b) = (&members[rng.gen_range(0..4)], &members[rng.gen_range(0..4)]);
            let lam: f64 = rng.gen_range(0.0..=1.0);
            let mid: Vec<f64> = a.iter().zip(b).map(|(p, q)| (1.0 - lam) * p + lam * q).collect();
            samples += 1;
            if !member_t(&mid, &t, sel, &theta, &cfg).unwrap() {
                violations += 1;
            }
        }
    }
    assert!(samples >= 500);
    assert_eq!(violations, 0);
}

#[test]
fn leaving_the_parallel_subspace_is_detected() {
    let cfg = FixedPointConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    for sel in nonempty_cases() {
        let theta = build_theta(&sel).unwrap();
        let t = sel.t_bar.clone();
        let tp = build_t(&t, &sel, &theta).unwrap();
        if tp.parallel_rows == 0 {
            continue;
        }
        let s = minimize(&tp.system, &random_cost(sel.leaves(), &mut rng)).unwrap();
        let q = random_theta_point(&theta, &mut rng).unwrap();
        if member_t(&q, &t, &sel, &theta, &cfg).unwrap() {
            continue;
        }
        // The constraint set is a polytope cut by a linear subspace; moving
        // from a member toward a non-member leaves the subspace.
        let off: Vec<f64> = s.iter().zip(&q).map(|(a, b)| a + 1e-3 * (b - a)).collect();
        assert!(theta.contains(&off));
        assert!(!member_t(&off, &t, &sel, &theta, &cfg).unwrap());
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn identical_components_are_fixed_immediately() {
    let cfg = FixedPointConfig::default();
    for seed in 0..5 {
        for r in 0..=1 {
            let (_, sel) = selection::<Rational>(&mesh(r), InstanceKind::Identical, seed);
            let report = find_fixed_point(&sel, &cfg, None).unwrap();
            assert_eq!(report.outcome, Outcome::Converged);
            assert_eq!(report.iterations, 0);
            let t_star = report.t_star.unwrap();
            assert_eq!(t_star, sel.t_bar);
            let cert = verify_joint_laminate(&t_star, &sel, &cfg).unwrap();
            assert!(validate_certificate(&cert, &RankOne, 0.0).is_valid());
        }
    }
}

#[test]
fn empty_t_comes_with_a_farkas_witness() {
    let cfg = FixedPointConfig::default();
    let (_, sel) = selection::<f64>(&mesh(1), InstanceKind::Random, 1);
    let report = find_fixed_point(&sel, &cfg, None).unwrap();
    let Outcome::Failed(FailureReason::InfeasibleT { iteration, witness, phase_one_value }) = report.outcome else {
        panic!("expected an empty T, got {:?}", report.outcome);
    };
    assert!(report.t_star.is_none());
    assert!(phase_one_value > 0.0);
    let theta = build_theta(&sel).unwrap();
    assert_eq!(iteration, 0);
    let tp = build_t(&sel.t_bar, &sel, &theta).unwrap();
    assert!(certifies_infeasible(&tp.system, &witness, 1e-9));
}

fn refit_setup(r: u32, seed: u64) -> (Arc<Triangulation>, PeriodicPwaMap<f64>, TupleSelection<f64>, Directions<f64>) {
    let tri = mesh(r);
    let (map, sel) = selection::<f64>(&tri, InstanceKind::Identical, seed);
    let theta = build_theta(&sel).unwrap();
    let profile = evaluate_profile(&sel.t_bar, &sel, &theta).unwrap();
    let dirs = Directions::from_profile(&profile, &sel);
    (tri, map, sel, dirs)
}

#[test]
fn unperturbed_refit_returns_the_baseline() {
    let cfg = FixedPointConfig::default();
    for r in 0..=1 {
        let (_, map, sel, dirs) = refit_setup(r, 6);
        let refit = direction_preserving_refit(&sel, &dirs, &sel.t_bar, &map, &cfg).unwrap();
        assert_eq!(refit.s, sel.t_bar);
        assert!(refit.residual <= cfg.refit_tol);
    }
}
