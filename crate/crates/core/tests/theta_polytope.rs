use std::sync::Arc;

use lamlab_core::fixedpoint::random_theta_point;
use lamlab_core::geometry::build_unit_cube_triangulation;
use lamlab_core::pipeline::{build_instance, InstanceKind};
use lamlab_core::pwa::GradientMeasure;
use lamlab_core::scalar::{rat, Rational, Scalar};
use lamlab_core::theta::{build_theta, pushforward, same_vector_measure, select_tuples, ThetaPolytope, TupleSelection};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    label: String,
    measure: GradientMeasure<Rational>,
    sel: TupleSelection<Rational>,
    theta: ThetaPolytope<Rational>,
}

fn cases() -> Vec<Case> {
    let kinds = [InstanceKind::Random, InstanceKind::Identical, InstanceKind::Scaled, InstanceKind::Separable, InstanceKind::Zero];
    let mut out = Vec::new();
    for r in 0..=1 {
        let tri = Arc::new(build_unit_cube_triangulation(2, r).unwrap());
        for kind in kinds {
            for seed in 0..2 {
                let map = build_instance::<Rational>(tri.clone(), kind, 3, seed).unwrap();
                let measure = map.extract_measure();
                let minimal = select_tuples(&measure, &tri, None).unwrap();
                let depths = if r == 0 { vec![minimal.m, minimal.m + 1] } else { vec![minimal.m] };
                for m in depths {
                    let sel = select_tuples(&measure, &tri, Some(m)).unwrap();
                    let theta = build_theta(&sel).unwrap();
                    let label = format!("r={r} {} seed={seed} m={m}", kind.name());
                    out.push(Case { label, measure: measure.clone(), sel, theta });
                }
            }
        }
    }
    out
}

/// Exact membership: pair sums `2^(1-m)`, nonnegativity and both marginals.
fn exact_member(c: &Case, t: &[Rational]) -> Result<(), String> {
    let pair = Rational::pow2(1 - c.sel.m as i32);
    for k in 0..t.len() / 2 {
        if t[2 * k].clone() + t[2 * k + 1].clone() != pair {
            return Err(format!("pair {k} sums to {}", t[2 * k].clone() + t[2 * k + 1].clone()));
        }
    }
    if t.iter().any(|w| *w < Rational::zero()) {
        return Err("negative weight".into());
    }
    let marginal_u = same_vector_measure(&pushforward(t, &c.sel.x, 0.0), &c.measure.marginal(0, 0.0), 0.0);
    let marginal_v = same_vector_measure(&pushforward(t, &c.sel.y, 0.0), &c.measure.marginal(1, 0.0), 0.0);
    if !marginal_u {
        return Err("first marginal differs".into());
    }
    if !marginal_v {
        return Err("second marginal differs".into());
    }
    Ok(())
}

#[test]
fn selection_weights_are_feasible() {
    for c in cases() {
        exact_member(&c, &c.sel.t_bar).unwrap_or_else(|e| panic!("{}: {e}", c.label));
        assert!(c.theta.contains(&c.sel.t_bar), "{}", c.label);
        let total = c.sel.t_bar.iter().fold(Rational::zero(), |a, w| a + w.clone());
        assert_eq!(total, rat(1, 1), "{}", c.label);
    }
}

#[test]
fn midpoints_stay_in_the_polytope() {
    let cases = cases();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pools: Vec<Vec<Vec<Rational>>> = cases
        .iter()
        .map(|c| {
            let mut pool = vec![c.sel.t_bar.clone()];
            pool.extend((0..3).filter_map(|_| random_theta_point(&c.theta, &mut rng)));
            pool
        })
        .collect();
    for (c, pool) in cases.iter().zip(&pools) {
        for p in pool {
            exact_member(c, p).unwrap_or_else(|e| panic!("{}: sampled point: {e}", c.label));
        }
    }
    let mut violations = 0;
    for _ in 0..1000 {
        let ci = rng.gen_range(0..cases.len());
        let pool = &mut pools[ci];
        let (a, b) = (rng.gen_range(0..pool.len()), rng.gen_range(0..pool.len()));
        let mid: Vec<Rational> = pool[a].iter().zip(&pool[b]).map(|(p, q)| (p.clone() + q.clone()) * rat(1, 2)).collect();
        if exact_member(&cases[ci], &mid).is_err() || !cases[ci].theta.contains(&mid) {
            violations += 1;
        }
        pool.push(mid);
    }
    assert_eq!(violations, 0);
}
