//! Two-component periodic piecewise-affine maps and their gradient measures.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::{GeometryError, Triangulation};
use crate::linalg::Matrix;
use crate::scalar::{parallel, sub_vec, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PwaError {
    #[error("expected {expected} nodal values, got {got}")]
    NodalCount { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

/// Map `x -> (u(x), v(x))`, affine on every simplex, given by one value pair
/// per periodic node class.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicPwaMap<S> {
    tri: Arc<Triangulation>,
    values: Vec<[S; 2]>,
}

impl<S: Scalar> PeriodicPwaMap<S> {
    pub fn new(tri: Arc<Triangulation>, values: Vec<[S; 2]>) -> Result<Self, PwaError> {
        if values.len() != tri.node_count() {
            return Err(PwaError::NodalCount { expected: tri.node_count(), got: values.len() });
        }
        Ok(Self { tri, values })
    }

    pub fn zero(tri: Arc<Triangulation>) -> Self {
        let values = vec![[S::zero(), S::zero()]; tri.node_count()];
        Self { tri, values }
    }

    /// Builds `(u, v)` from separate component vectors.
    pub fn from_components(tri: Arc<Triangulation>, u: &[S], v: &[S]) -> Result<Self, PwaError> {
        if u.len() != v.len() {
            return Err(PwaError::NodalCount { expected: u.len(), got: v.len() });
        }
        let values = u.iter().zip(v).map(|(a, b)| [a.clone(), b.clone()]).collect();
        Self::new(tri, values)
    }

    pub fn triangulation(&self) -> &Arc<Triangulation> {
        &self.tri
    }

    pub fn values(&self) -> &[[S; 2]] {
        &self.values
    }

    /// Independent nodal degrees of freedom per component.
    pub fn dof(&self) -> usize {
        self.values.len()
    }

    pub fn component(&self, c: usize) -> Vec<S> {
        self.values.iter().map(|v| v[c].clone()).collect()
    }

    pub fn with_value(&self, node: usize, component: usize, value: S) -> Self {
        let mut out = self.clone();
        out.values[node][component] = value;
        out
    }

    pub fn scaled(&self, c: &S) -> Self {
        let values = self
            .values
            .iter()
            .map(|[u, v]| [c.clone() * u.clone(), c.clone() * v.clone()])
            .collect();
        Self { tri: self.tri.clone(), values }
    }

    /// Constant gradient of one nodal field on element `e`.
    pub fn element_gradient(&self, field: &[S], e: usize) -> Vec<S> {
        let el = &self.tri.elements()[e];
        let nodes = self.tri.element_nodes(e);
        let base = field[nodes[0]].clone();
        let incr: Vec<S> = nodes[1..].iter().map(|&n| field[n].clone() - base.clone()).collect();
        let dim = self.tri.dim();
        (0..dim)
            .map(|r| {
                (0..dim).fold(S::zero(), |acc, c| {
                    acc + S::from_rational(el.chart.get(r, c)) * incr[c].clone()
                })
            })
            .collect()
    }

    /// One `2 x N` matrix per element, rows `grad u` and `grad v`.
    pub fn gradient_per_element(&self) -> Vec<Matrix<S>> {
        let (u, v) = (self.component(0), self.component(1));
        (0..self.tri.elements().len())
            .map(|e| {
                Matrix::from_rows(&[self.element_gradient(&u, e), self.element_gradient(&v, e)])
            })
            .collect()
    }

    /// One atom per element; equal gradients are deliberately kept apart.
    pub fn extract_measure(&self) -> GradientMeasure<S> {
        let atoms = self
            .gradient_per_element()
            .into_iter()
            .enumerate()
            .map(|(e, g)| Atom {
                weight: S::from_rational(&self.tri.elements()[e].volume),
                u: g.row(0).to_vec(),
                v: g.row(1).to_vec(),
                element: Some(e),
            })
            .collect();
        GradientMeasure { atoms }
    }

    pub fn to_json(&self, triangulation_ref: &str) -> Value {
        json!({
            "triangulation_ref": triangulation_ref,
            "nodal_values": self.values.iter()
                .map(|[u, v]| vec![u.encode(), v.encode()])
                .collect::<Vec<_>>(),
        })
    }

    pub fn from_json(tri: Arc<Triangulation>, v: &Value) -> Result<Self, PwaError> {
        let bad = |m: &str| PwaError::Malformed(m.to_string());
        let rows = v["nodal_values"].as_array().ok_or_else(|| bad("nodal_values"))?;
        let mut values = Vec::with_capacity(rows.len());
        for row in rows {
            let pair = row.as_array().filter(|p| p.len() == 2).ok_or_else(|| bad("pair"))?;
            let dec = |x: &Value| x.as_str().and_then(S::decode).ok_or_else(|| bad("number"));
            values.push([dec(&pair[0])?, dec(&pair[1])?]);
        }
        Self::new(tri, values)
    }
}

/// Integer nodal values drawn uniformly from `[-k, k]`.
pub fn sample_integer_values(count: usize, k: i64, rng: &mut ChaCha8Rng) -> Vec<i64> {
    (0..count).map(|_| rng.gen_range(-k..=k)).collect()
}

/// Seeded random map with independent integer components in `[-k, k]`.
pub fn random_map<S: Scalar>(tri: Arc<Triangulation>, k: i64, seed: u64) -> PeriodicPwaMap<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = tri.node_count();
    let u = sample_integer_values(q, k, &mut rng);
    let v = sample_integer_values(q, k, &mut rng);
    let values = u.into_iter().zip(v).map(|(a, b)| [S::from_i64(a), S::from_i64(b)]).collect();
    PeriodicPwaMap { tri, values }
}

/// Seeded map whose second component repeats the first, scaled by `c`.
pub fn scaled_map<S: Scalar>(tri: Arc<Triangulation>, k: i64, c: i64, seed: u64) -> PeriodicPwaMap<S> {
    let u = random_map::<S>(tri.clone(), k, seed).component(0);
    let v: Vec<S> = u.iter().map(|x| S::from_i64(c) * x.clone()).collect();
    PeriodicPwaMap::from_components(tri, &u, &v).expect("lengths agree")
}

/// Sums of per-axis zigzags: component `c` is `sum_a coeffs[c][a] (i_a mod 2)`
/// on grid indices `i`. Every joint gradient is `sum_a s_a w_a (x) e_a` with
/// signs `s_a`, which makes the joint measure a laminate along the axes.
pub fn separable_map<S: Scalar>(tri: Arc<Triangulation>, coeffs: [&[i64]; 2]) -> Result<PeriodicPwaMap<S>, PwaError> {
    let dim = tri.dim();
    if coeffs.iter().any(|c| c.len() != dim) {
        return Err(PwaError::Malformed(format!("expected {dim} coefficients per component")));
    }
    let values = tri
        .periodic_classes()
        .iter()
        .map(|class| {
            let g = tri.point_grid(class[0]);
            let eval = |c: &[i64]| S::from_i64(c.iter().zip(g).map(|(a, i)| a * i.rem_euclid(2)).sum());
            [eval(coeffs[0]), eval(coeffs[1])]
        })
        .collect();
    PeriodicPwaMap::new(tri, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom<S> {
    pub weight: S,
    pub u: Vec<S>,
    pub v: Vec<S>,
    /// Element the atom came from, when extracted from a map.
    pub element: Option<usize>,
}

impl<S: Scalar> Atom<S> {
    pub fn matrix(&self) -> Matrix<S> {
        Matrix::from_rows(&[self.u.clone(), self.v.clone()])
    }
}

/// Discrete probability measure on `2 x N` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMeasure<S> {
    pub atoms: Vec<Atom<S>>,
}

impl<S: Scalar> GradientMeasure<S> {
    pub fn dim(&self) -> usize {
        self.atoms.first().map_or(0, |a| a.u.len())
    }

    pub fn total_weight(&self) -> S {
        self.atoms.iter().fold(S::zero(), |acc, a| acc + a.weight.clone())
    }

    /// Barycenter `F` as a `2 x N` matrix.
    pub fn barycenter(&self) -> Matrix<S> {
        let n = self.dim();
        let mut out: Matrix<S> = Matrix::zeros(2, n);
        for a in &self.atoms {
            for c in 0..n {
                let u = out.get(0, c).clone() + a.weight.clone() * a.u[c].clone();
                let v = out.get(1, c).clone() + a.weight.clone() * a.v[c].clone();
                out.set(0, c, u);
                out.set(1, c, v);
            }
        }
        out
    }

    /// Marginal on one component, equal vectors merged in first-seen order.
    pub fn marginal(&self, component: usize, tol: f64) -> Vec<(Vec<S>, S)> {
        merge(
            self.atoms.iter().map(|a| {
                let p = if component == 0 { a.u.clone() } else { a.v.clone() };
                (p, a.weight.clone())
            }),
            tol,
        )
    }

    /// Joint measure with equal matrices merged; used for reporting and for
    /// comparing leaf measures.
    pub fn merged(&self, tol: f64) -> Vec<(Matrix<S>, S)> {
        merge(self.atoms.iter().map(|a| (a.matrix(), a.weight.clone())), tol)
    }

    pub fn to_json(&self) -> Value {
        let f = self.barycenter();
        json!({
            "atoms": self.atoms.iter().map(|a| json!({
                "w": a.weight.encode(),
                "u": a.u.iter().map(Scalar::encode).collect::<Vec<_>>(),
                "v": a.v.iter().map(Scalar::encode).collect::<Vec<_>>(),
                "element": a.element,
            })).collect::<Vec<_>>(),
            "barycenter": f.row_vecs().iter()
                .map(|r| r.iter().map(Scalar::encode).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, PwaError> {
        let bad = |m: &str| PwaError::Malformed(m.to_string());
        let dec = |x: &Value| x.as_str().and_then(S::decode).ok_or_else(|| bad("number"));
        let vecs = |x: &Value| -> Result<Vec<S>, PwaError> {
            x.as_array().ok_or_else(|| bad("vector"))?.iter().map(dec).collect()
        };
        let mut atoms = Vec::new();
        for a in v["atoms"].as_array().ok_or_else(|| bad("atoms"))? {
            atoms.push(Atom {
                weight: dec(&a["w"])?,
                u: vecs(&a["u"])?,
                v: vecs(&a["v"])?,
                element: a["element"].as_u64().map(|e| e as usize),
            });
        }
        Ok(Self { atoms })
    }
}

/// Merges equal points (within `tol` entrywise on the float path), summing weights.
pub fn merge<S: Scalar, P: MergeKey<S>>(
    items: impl IntoIterator<Item = (P, S)>,
    tol: f64,
) -> Vec<(P, S)> {
    let mut out: Vec<(P, S)> = Vec::new();
    for (p, w) in items {
        match out.iter_mut().find(|(q, _)| q.close_to(&p, tol)) {
            Some((_, acc)) => *acc = acc.clone() + w,
            None => out.push((p, w)),
        }
    }
    out
}

pub trait MergeKey<S> {
    fn close_to(&self, other: &Self, tol: f64) -> bool;
}

impl<S: Scalar> MergeKey<S> for Vec<S> {
    fn close_to(&self, other: &Self, tol: f64) -> bool {
        self.len() == other.len() && self.iter().zip(other).all(|(a, b)| S::approx_eq(a, b, tol))
    }
}

impl<S: Scalar> MergeKey<S> for Matrix<S> {
    fn close_to(&self, other: &Self, tol: f64) -> bool {
        self.approx_eq(other, tol)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JumpViolation {
    pub interface: usize,
    /// 0 for `u`, 1 for `v`.
    pub component: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JumpReport {
    pub violations: Vec<JumpViolation>,
    /// Interfaces whose elements are not both present among the atoms.
    pub skipped: Vec<usize>,
}

impl JumpReport {
    pub fn is_compatible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Across every interface both gradient jumps must be parallel to its normal.
pub fn check_jump_compatibility<S: Scalar>(
    measure: &GradientMeasure<S>,
    tri: &Triangulation,
    tol: f64,
) -> JumpReport {
    let mut by_element: Vec<Option<&Atom<S>>> = vec![None; tri.elements().len()];
    for a in &measure.atoms {
        if let Some(e) = a.element.filter(|e| *e < by_element.len()) {
            by_element[e] = Some(a);
        }
    }
    let mut report = JumpReport::default();
    for (k, iface) in tri.interfaces().iter().enumerate() {
        let (Some(a), Some(b)) = (by_element[iface.elements.0], by_element[iface.elements.1])
        else {
            report.skipped.push(k);
            continue;
        };
        let n: Vec<S> = iface.normal.as_scalars();
        if !parallel(&sub_vec(&a.u, &b.u), &n, tol) {
            report.violations.push(JumpViolation { interface: k, component: 0 });
        }
        if !parallel(&sub_vec(&a.v, &b.v), &n, tol) {
            report.violations.push(JumpViolation { interface: k, component: 1 });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_unit_cube_triangulation;
    use crate::scalar::{rat, Rational};

    fn mesh(r: u32) -> Arc<Triangulation> {
        Arc::new(build_unit_cube_triangulation(2, r).unwrap())
    }

    fn node_at(tri: &Triangulation, g: [i64; 2]) -> usize {
        let p = (0..tri.point_count()).find(|&p| tri.point_grid(p) == g).unwrap();
        tri.node_of_point(p)
    }

    #[test]
    fn zero_map_has_zero_gradients() {
        let map = PeriodicPwaMap::<Rational>::zero(mesh(1));
        assert!(map.gradient_per_element().iter().all(|g| g.is_zero(0.0)));
        let m = map.extract_measure();
        assert_eq!(m.atoms.len(), 8);
        assert_eq!(m.merged(0.0).len(), 1);
    }

    #[test]
    fn hat_function_lives_on_its_star() {
        let tri = mesh(1);
        let c = node_at(&tri, [1, 1]);
        let mut u = vec![rat(0, 1); 4];
        u[c] = rat(1, 1);
        let map = PeriodicPwaMap::from_components(tri.clone(), &u, &u).unwrap();
        let grads = map.gradient_per_element();
        let star = tri.node_star(c).unwrap();
        for (e, g) in grads.iter().enumerate() {
            assert_eq!(!g.is_zero(0.0), star.elements.contains(&e), "element {e}");
        }
        // Hand values: slope 2 on the spacing-1/2 grid, so gradients are
        // (+-2, 0), (0, +-2) or +-(2, -2) depending on the triangle.
        let allowed = [[2, 0], [-2, 0], [0, 2], [0, -2], [2, -2], [-2, 2]];
        let mut seen: Vec<[i64; 2]> = grads
            .iter()
            .filter(|g| !g.is_zero(0.0))
            .map(|g| {
                let r = g.row(0);
                assert_eq!(g.row(0), g.row(1));
                [r[0].to_integer().try_into().unwrap(), r[1].to_integer().try_into().unwrap()]
            })
            .collect();
        seen.sort();
        let mut expected = allowed.to_vec();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn random_maps_have_zero_mean_and_compatible_jumps() {
        let tri = mesh(2);
        for seed in 0..10 {
            let map = random_map::<Rational>(tri.clone(), 5, seed);
            let m = map.extract_measure();
            assert!(m.barycenter().is_zero(0.0));
            assert_eq!(m.total_weight(), rat(1, 1));
            assert!(check_jump_compatibility(&m, &tri, 0.0).is_compatible());
        }
    }

    #[test]
    fn broken_jump_is_flagged() {
        let tri = mesh(1);
        let map = random_map::<f64>(tri.clone(), 3, 7);
        let mut m = map.extract_measure();
        m.atoms[0].u[0] += 0.5;
        m.atoms[0].u[1] += 0.25;
        let report = check_jump_compatibility(&m, &tri, 1e-9);
        assert!(!report.is_compatible());
        assert!(report.violations.iter().all(|v| v.component == 0));
    }

    #[test]
    fn single_atom_is_vacuously_compatible() {
        let tri = mesh(0);
        let m = GradientMeasure {
            atoms: vec![Atom { weight: 1.0, u: vec![1.0, 2.0], v: vec![0.0, 3.0], element: Some(0) }],
        };
        let report = check_jump_compatibility(&m, &tri, 1e-9);
        assert!(report.is_compatible());
        assert_eq!(report.skipped.len(), 3);
    }

    #[test]
    fn json_round_trip() {
        let tri = mesh(1);
        let map = random_map::<f64>(tri.clone(), 4, 3).scaled(&0.1);
        let back = PeriodicPwaMap::<f64>::from_json(tri, &map.to_json("mesh")).unwrap();
        assert_eq!(back, map);
        let m = map.extract_measure();
        assert_eq!(GradientMeasure::<f64>::from_json(&m.to_json()).unwrap(), m);
    }
}
