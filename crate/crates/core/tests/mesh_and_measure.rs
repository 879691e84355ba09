use std::collections::BTreeSet;
use std::sync::Arc;

use lamlab_core::geometry::{build_unit_cube_triangulation, validate, Triangulation};
use lamlab_core::pwa::{check_jump_compatibility, random_map, PeriodicPwaMap};
use lamlab_core::scalar::{rat, Rational, Scalar};
use num_traits::{One, Zero};
use proptest::prelude::*;

/// Element volumes by the shoelace / triple product formula on raw vertex
/// coordinates, independent of the stored charts.
fn simplex_volume(tri: &Triangulation, e: usize) -> Rational {
    let el = &tri.elements()[e];
    let p: Vec<Vec<Rational>> = el.vertices.iter().map(|&v| tri.point_coords(v)).collect();
    let edge = |i: usize, c: usize| p[i][c].clone() - p[0][c].clone();
    let det = match tri.dim() {
        2 => edge(1, 0) * edge(2, 1) - edge(1, 1) * edge(2, 0),
        3 => {
            edge(1, 0) * (edge(2, 1) * edge(3, 2) - edge(2, 2) * edge(3, 1))
                - edge(1, 1) * (edge(2, 0) * edge(3, 2) - edge(2, 2) * edge(3, 0))
                + edge(1, 2) * (edge(2, 0) * edge(3, 1) - edge(2, 1) * edge(3, 0))
        }
        _ => unreachable!(),
    };
    let fact = if tri.dim() == 2 { rat(1, 2) } else { rat(1, 6) };
    let abs = if det < Rational::zero() { -det } else { det };
    abs * fact
}

#[test]
fn planar_meshes_have_three_normals_and_unit_volume() {
    for r in 0..=3 {
        let tri = build_unit_cube_triangulation(2, r).unwrap();
        let normals: BTreeSet<Vec<i64>> =
            tri.interfaces().iter().map(|i| i.normal.direction().to_vec()).collect();
        assert_eq!(normals.len(), 3, "refinement {r}");
        let total = (0..tri.elements().len()).fold(Rational::zero(), |acc, e| acc + simplex_volume(&tri, e));
        assert!(total.is_one());
        assert!(validate(&tri).is_valid());
        // 2 * 4^r triangles, 3 * 4^r edges on the torus.
        assert_eq!(tri.elements().len(), 2 << (2 * r));
        assert_eq!(tri.interfaces().len(), 3 << (2 * r));
    }
}

#[test]
fn cube_mesh_normals_within_bound() {
    for r in 0..=1 {
        let tri = build_unit_cube_triangulation(3, r).unwrap();
        let normals: BTreeSet<Vec<i64>> =
            tri.interfaces().iter().map(|i| i.normal.direction().to_vec()).collect();
        assert!(normals.len() <= 7);
        assert!(validate(&tri).is_valid());
        for e in 0..tri.elements().len() {
            assert_eq!(simplex_volume(&tri, e), tri.elements()[e].volume);
        }
    }
}

#[test]
fn interface_normals_are_orthogonal_to_facets() {
    let tri = build_unit_cube_triangulation(2, 2).unwrap();
    for iface in tri.interfaces() {
        let n = iface.normal.direction();
        let pts: Vec<&[i64]> = iface.nodes.iter().map(|&p| tri.point_grid(p)).collect();
        for q in &pts[1..] {
            let dot: i64 = q.iter().zip(pts[0]).zip(n).map(|((a, b), c)| (a - b) * c).sum();
            assert_eq!(dot, 0);
        }
    }
}

fn mesh(dim: usize, r: u32) -> Arc<Triangulation> {
    Arc::new(build_unit_cube_triangulation(dim, r).unwrap())
}

/// The affine interpolant with the element gradient reproduces every vertex
/// value of the element.
fn gradient_reproduces_vertices(map: &PeriodicPwaMap<Rational>) {
    let tri = map.triangulation();
    let u = map.component(0);
    for (e, el) in tri.elements().iter().enumerate() {
        let g = map.element_gradient(&u, e);
        let p0 = tri.point_coords(el.vertices[0]);
        let u0 = u[tri.node_of_point(el.vertices[0])].clone();
        for &v in &el.vertices[1..] {
            let pv = tri.point_coords(v);
            let pred = g.iter().zip(pv.iter().zip(&p0)).fold(u0.clone(), |acc, (gc, (a, b))| {
                acc + gc.clone() * (a.clone() - b.clone())
            });
            assert_eq!(pred, u[tri.node_of_point(v)]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn measures_have_zero_barycenter_and_compatible_jumps(seed in any::<u64>(), r in 0u32..=2, k in 1i64..=5) {
        let map = random_map::<Rational>(mesh(2, r), k, seed);
        let measure = map.extract_measure();
        prop_assert!(measure.total_weight().is_one());
        prop_assert!(measure.barycenter().is_zero(0.0));
        let jumps = check_jump_compatibility(&measure, map.triangulation(), 0.0);
        prop_assert!(jumps.is_compatible());
        gradient_reproduces_vertices(&map);
    }

    #[test]
    fn float_measures_agree_with_exact(seed in any::<u64>(), r in 1u32..=2) {
        let exact = random_map::<Rational>(mesh(2, r), 4, seed).extract_measure();
        let float = random_map::<f64>(mesh(2, r), 4, seed).extract_measure();
        prop_assert!(float.barycenter().max_abs() <= 1e-10);
        for (a, b) in exact.atoms.iter().zip(&float.atoms) {
            for (x, y) in a.u.iter().chain(&a.v).zip(b.u.iter().chain(&b.v)) {
                prop_assert!((x.to_f64() - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cube_measures_are_compatible(seed in any::<u64>()) {
        let map = random_map::<Rational>(mesh(3, 1), 3, seed);
        let measure = map.extract_measure();
        prop_assert!(measure.barycenter().is_zero(0.0));
        prop_assert!(check_jump_compatibility(&measure, map.triangulation(), 0.0).is_compatible());
    }
}
