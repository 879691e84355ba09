//! Tuple selections over node stars and the leaf-weight polytope built on them.
//!
//! Leaves come in adjacent pairs `(2k, 2k+1)` (0-based). Every pair holds the
//! two gradients across one interface, and the pairs of a node block cycle
//! through the interfaces incident to that node. The polytope is
//!
//! ```text
//! t_{2k} + t_{2k+1} = 2^(1-m)                  for every pair
//! sum_{j : (x_j, y_j) = w} t_j = nu(w)         for every distinct atom w
//! t >= 0
//! ```

use num_traits::{One, Zero};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::Triangulation;
use crate::linalg::{independent_rows, solve, Matrix};
use crate::lp::{feasible_point, LinearSystem};
use crate::pwa::{merge, GradientMeasure};
use crate::qp::{project, QpError};
use crate::scalar::{convert, Rational, Scalar};

/// Equality tolerance for membership on the float path.
pub const MEMBERSHIP_EQ_TOL: f64 = 1e-10;
/// Allowed negativity on the float path.
pub const MEMBERSHIP_NONNEG_TOL: f64 = 1e-12;
/// Depth searched above the first candidate before giving up.
const DEPTH_SEARCH_SPAN: usize = 4;
/// Vertex enumeration cap on the number of coordinates.
pub const VERTEX_ENUMERATION_CAP: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThetaError {
    #[error("depth {requested} is below the minimal depth {minimal}")]
    DepthTooSmall { requested: usize, minimal: usize },
    #[error("no admissible depth up to {searched}")]
    NoAdmissibleDepth { searched: usize },
    #[error("node {0} has no incident interfaces")]
    DisconnectedStar(usize),
    #[error("measure does not carry one atom per element ({0})")]
    MeasureMismatch(String),
    #[error("selection weights are infeasible for the polytope")]
    InfeasibleWeights,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("vertex enumeration limited to {cap} coordinates, got {got}")]
    TooLarge { cap: usize, got: usize },
    #[error("projection failed: {0}")]
    Projection(String),
    #[error("malformed selection payload: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TupleSelection<S> {
    pub m: usize,
    /// Smallest depth at which this construction is admissible.
    pub minimal_depth: usize,
    pub x: Vec<Vec<S>>,
    pub y: Vec<Vec<S>>,
    pub element_of: Vec<usize>,
    /// Interface realizing pair `k` (leaves `2k`, `2k+1`).
    pub pair_interface: Vec<usize>,
    /// Integer normal of each pair's interface.
    pub pair_normals: Vec<Vec<i64>>,
    /// Leaf indices of every node block, in padded node order.
    pub node_blocks: Vec<Vec<usize>>,
    pub block_nodes: Vec<usize>,
    pub t_bar: Vec<S>,
    /// Volume of every element.
    pub element_weights: Vec<S>,
}

impl<S: Scalar> TupleSelection<S> {
    pub fn leaves(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Same layout with the second tuple replaced by per-element vectors `v`.
    pub fn with_second_component(&self, v: &[Vec<S>]) -> Self {
        let mut out = self.clone();
        out.y = self.element_of.iter().map(|&e| v[e].clone()).collect();
        out
    }

    pub fn to_json(&self) -> Value {
        let vecs = |v: &[Vec<S>]| {
            v.iter().map(|r| r.iter().map(Scalar::encode).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        json!({
            "m": self.m,
            "minimal_depth": self.minimal_depth,
            "X": vecs(&self.x),
            "Y": vecs(&self.y),
            "element_of": self.element_of,
            "pair_interface": self.pair_interface,
            "pair_normals": self.pair_normals,
            "node_blocks": self.node_blocks,
            "block_nodes": self.block_nodes,
            "t_bar": self.t_bar.iter().map(Scalar::encode).collect::<Vec<_>>(),
            "element_weights": self.element_weights.iter().map(Scalar::encode).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, ThetaError> {
        let bad = |m: &str| ThetaError::Malformed(m.to_string());
        let num = |x: &Value| x.as_str().and_then(S::decode).ok_or_else(|| bad("number"));
        let list = |x: &Value| -> Result<Vec<S>, ThetaError> {
            x.as_array().ok_or_else(|| bad("list"))?.iter().map(num).collect()
        };
        let vecs = |x: &Value| -> Result<Vec<Vec<S>>, ThetaError> {
            x.as_array().ok_or_else(|| bad("tuple"))?.iter().map(list).collect()
        };
        fn ints<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T, ThetaError> {
            serde_json::from_value(v[key].clone()).map_err(|e| ThetaError::Malformed(e.to_string()))
        }
        let sel = Self {
            m: v["m"].as_u64().ok_or_else(|| bad("m"))? as usize,
            minimal_depth: v["minimal_depth"].as_u64().ok_or_else(|| bad("minimal_depth"))? as usize,
            x: vecs(&v["X"])?,
            y: vecs(&v["Y"])?,
            element_of: ints(v, "element_of")?,
            pair_interface: ints(v, "pair_interface")?,
            pair_normals: ints(v, "pair_normals")?,
            node_blocks: ints(v, "node_blocks")?,
            block_nodes: ints(v, "block_nodes")?,
            t_bar: list(&v["t_bar"])?,
            element_weights: list(&v["element_weights"])?,
        };
        let n = 1usize << sel.m;
        if [sel.x.len(), sel.y.len(), sel.element_of.len(), sel.t_bar.len()].iter().any(|l| *l != n)
            || sel.pair_interface.len() * 2 != n
        {
            return Err(bad("inconsistent lengths"));
        }
        Ok(sel)
    }
}

fn ceil_log2(v: usize) -> usize {
    v.next_power_of_two().trailing_zeros() as usize
}

/// Pair layout (interface per pair) for depth `m`.
fn layout(stars: &[Vec<usize>], order: &[usize], m: usize) -> Vec<usize> {
    let n = ceil_log2(order.len());
    let pairs_per_block = 1usize << (m - n - 1);
    order
        .iter()
        .flat_map(|&node| {
            let star = &stars[node];
            (0..pairs_per_block).map(move |c| star[c % star.len()])
        })
        .collect()
}

/// Exact weights for a layout: equal split of every volume over its
/// occurrences when that already gives the pair sums, otherwise a vertex of
/// the exact feasibility system.
fn layout_weights(tri: &Triangulation, pairs: &[usize], m: usize) -> Option<Vec<Rational>> {
    let leaves: Vec<usize> = pairs
        .iter()
        .flat_map(|&k| {
            let (a, b) = tri.interfaces()[k].elements;
            [a, b]
        })
        .collect();
    let ne = tri.elements().len();
    let mut count = vec![0i64; ne];
    for &e in &leaves {
        count[e] += 1;
    }
    if count.contains(&0) {
        return None;
    }
    let pair_sum = Rational::pow2(1 - m as i32);
    let equal: Vec<Rational> = leaves
        .iter()
        .map(|&e| tri.elements()[e].volume.clone() / Rational::from_i64(count[e]))
        .collect();
    if equal.chunks(2).all(|p| p[0].clone() + p[1].clone() == pair_sum) {
        return Some(equal);
    }
    let n = leaves.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for k in 0..n / 2 {
        let mut r = vec![Rational::zero(); n];
        r[2 * k] = Rational::one();
        r[2 * k + 1] = Rational::one();
        rows.push(r);
        rhs.push(pair_sum.clone());
    }
    for e in 0..ne {
        rows.push(leaves.iter().map(|&l| if l == e { Rational::one() } else { Rational::zero() }).collect());
        rhs.push(tri.elements()[e].volume.clone());
    }
    feasible_point(&LinearSystem::new(Matrix::from_rows(&rows), rhs)).ok()
}

/// Builds the tuples for `measure` (one atom per element of `tri`). With
/// `depth = None` the minimal admissible depth is used.
pub fn select_tuples<S: Scalar>(
    measure: &GradientMeasure<S>,
    tri: &Triangulation,
    depth: Option<usize>,
) -> Result<TupleSelection<S>, ThetaError> {
    let ne = tri.elements().len();
    let mut per_element: Vec<Option<(Vec<S>, Vec<S>)>> = vec![None; ne];
    for a in &measure.atoms {
        let e = a.element.ok_or_else(|| ThetaError::MeasureMismatch("atom without element".into()))?;
        let slot = per_element
            .get_mut(e)
            .ok_or_else(|| ThetaError::MeasureMismatch(format!("element {e} out of range")))?;
        if slot.replace((a.u.clone(), a.v.clone())).is_some() {
            return Err(ThetaError::MeasureMismatch(format!("element {e} repeated")));
        }
    }
    let per_element: Vec<(Vec<S>, Vec<S>)> = per_element
        .into_iter()
        .enumerate()
        .map(|(e, a)| a.ok_or_else(|| ThetaError::MeasureMismatch(format!("element {e} missing"))))
        .collect::<Result<_, _>>()?;

    let order = tri.padded_node_order();
    let n = ceil_log2(order.len());
    let mut stars = Vec::with_capacity(tri.node_count());
    for node in 0..tri.node_count() {
        let star = tri.node_star(node).expect("valid node").interfaces;
        if star.is_empty() {
            return Err(ThetaError::DisconnectedStar(node));
        }
        stars.push(star);
    }
    let max_star = stars.iter().map(Vec::len).max().unwrap_or(1);
    let first = n + ceil_log2(2 * max_star);

    let mut minimal = None;
    for m in first..first + DEPTH_SEARCH_SPAN {
        let pairs = layout(&stars, &order, m);
        if let Some(w) = layout_weights(tri, &pairs, m) {
            minimal = Some((m, pairs, w));
            break;
        }
    }
    let Some((minimal_depth, mut pairs, mut weights)) = minimal else {
        return Err(ThetaError::NoAdmissibleDepth { searched: first + DEPTH_SEARCH_SPAN - 1 });
    };
    let m = depth.unwrap_or(minimal_depth);
    if m < minimal_depth {
        return Err(ThetaError::DepthTooSmall { requested: m, minimal: minimal_depth });
    }
    if m > minimal_depth {
        pairs = layout(&stars, &order, m);
        weights = layout_weights(tri, &pairs, m).ok_or(ThetaError::InfeasibleWeights)?;
    }

    let element_of: Vec<usize> = pairs
        .iter()
        .flat_map(|&k| {
            let (a, b) = tri.interfaces()[k].elements;
            [a, b]
        })
        .collect();
    let block = 1usize << (m - n);
    Ok(TupleSelection {
        m,
        minimal_depth,
        x: element_of.iter().map(|&e| per_element[e].0.clone()).collect(),
        y: element_of.iter().map(|&e| per_element[e].1.clone()).collect(),
        pair_normals: pairs.iter().map(|&k| tri.interfaces()[k].normal.direction().to_vec()).collect(),
        pair_interface: pairs,
        node_blocks: (0..order.len()).map(|b| (b * block..(b + 1) * block).collect()).collect(),
        block_nodes: order,
        t_bar: weights.iter().map(S::from_rational).collect(),
        element_weights: tri.elements().iter().map(|e| S::from_rational(&e.volume)).collect(),
        element_of,
    })
}

/// Pushforward `sum_j t_j delta_{p_j}` with equal points merged.
pub fn pushforward<S: Scalar>(t: &[S], points: &[Vec<S>], tol: f64) -> Vec<(Vec<S>, S)> {
    merge(points.iter().cloned().zip(t.iter().cloned()), tol)
}

/// Equality of two merged vector measures (ignoring zero-weight atoms).
pub fn same_vector_measure<S: Scalar>(a: &[(Vec<S>, S)], b: &[(Vec<S>, S)], tol: f64) -> bool {
    let a: Vec<_> = a.iter().filter(|(_, w)| !w.is_negligible(tol)).collect();
    let b: Vec<_> = b.iter().filter(|(_, w)| !w.is_negligible(tol)).collect();
    a.len() == b.len()
        && a.iter().all(|(p, w)| {
            b.iter().any(|(q, x)| {
                p.len() == q.len()
                    && p.iter().zip(q).all(|(r, s)| S::approx_eq(r, s, tol))
                    && S::approx_eq(w, x, tol)
            })
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaPolytope<S> {
    pub m: usize,
    pub system: LinearSystem<S>,
    pub pair_rows: usize,
    /// Distinct joint atoms `(x, y)` matched by the marginal rows, in row order.
    pub atoms: Vec<(Vec<S>, Vec<S>)>,
    pub t_bar: Vec<S>,
}

/// Tolerance used to identify equal atoms on the float path.
fn atom_tol<S: Scalar>(sel: &TupleSelection<S>) -> f64 {
    let scale = sel
        .x
        .iter()
        .chain(&sel.y)
        .flat_map(|v| v.iter().map(Scalar::to_f64))
        .fold(1.0f64, |a, b| a.max(b.abs()));
    1e-12 * scale
}

pub fn build_theta<S: Scalar>(sel: &TupleSelection<S>) -> Result<ThetaPolytope<S>, ThetaError> {
    let n = sel.leaves();
    let mut a = Matrix::zeros(0, n);
    let mut b = Vec::new();
    let pair_sum = S::pow2(1 - sel.m as i32);
    for k in 0..n / 2 {
        let mut r = vec![S::zero(); n];
        r[2 * k] = S::one();
        r[2 * k + 1] = S::one();
        a.push_row(&r);
        b.push(pair_sum.clone());
    }
    let tol = atom_tol(sel);
    let joint: Vec<(Vec<S>, S)> = merge(
        sel.element_weights.iter().enumerate().map(|(e, w)| {
            let j = sel.element_of.iter().position(|&x| x == e).expect("every element occurs");
            let mut key = sel.x[j].clone();
            key.extend(sel.y[j].iter().cloned());
            (key, w.clone())
        }),
        tol,
    );
    let d = sel.dim();
    let mut atoms = Vec::with_capacity(joint.len());
    for (key, w) in joint {
        let row: Vec<S> = (0..n)
            .map(|j| {
                let same = sel.x[j].iter().chain(&sel.y[j]).zip(&key).all(|(p, q)| S::approx_eq(p, q, tol));
                if same {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect();
        a.push_row(&row);
        b.push(w);
        atoms.push((key[..d].to_vec(), key[d..].to_vec()));
    }
    let theta = ThetaPolytope { m: sel.m, system: LinearSystem::new(a, b), pair_rows: n / 2, atoms, t_bar: sel.t_bar.clone() };
    if !theta.contains(&sel.t_bar) {
        return Err(ThetaError::InfeasibleWeights);
    }
    Ok(theta)
}

impl<S: Scalar> ThetaPolytope<S> {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn equality_rows(&self) -> usize {
        self.system.a.rows()
    }

    pub fn contains(&self, t: &[S]) -> bool {
        self.system.is_feasible(t, MEMBERSHIP_EQ_TOL, MEMBERSHIP_NONNEG_TOL)
    }

    /// Euclidean projection onto the polytope.
    pub fn project(&self, point: &[S]) -> Result<Vec<S>, ThetaError> {
        if point.len() != self.dim() {
            return Err(ThetaError::Dimension { expected: self.dim(), got: point.len() });
        }
        match project(&self.system, point, Some(&self.t_bar)) {
            Ok(p) => Ok(p.point),
            Err(e @ QpError::Infeasible { .. }) => Err(ThetaError::Projection(e.to_string())),
            Err(e) => Err(ThetaError::Projection(e.to_string())),
        }
    }

    pub fn enumerate_vertices(&self) -> Result<Vec<Vec<S>>, ThetaError> {
        enumerate_vertices(&self.system)
    }
}

/// Vertices of `{A x = b, x >= 0}` by enumerating bases. Small systems only.
pub fn enumerate_vertices<S: Scalar>(sys: &LinearSystem<S>) -> Result<Vec<Vec<S>>, ThetaError> {
    let n = sys.dim();
    if n > VERTEX_ENUMERATION_CAP {
        return Err(ThetaError::TooLarge { cap: VERTEX_ENUMERATION_CAP, got: n });
    }
    let rows = independent_rows(&sys.a);
    let r = rows.len();
    let a = sys.a.select_rows(&rows);
    let b: Vec<S> = rows.iter().map(|&i| sys.b[i].clone()).collect();
    let mut out: Vec<Vec<S>> = Vec::new();
    let mut push = |x: Vec<S>| {
        if sys.is_feasible(&x, MEMBERSHIP_EQ_TOL, MEMBERSHIP_NONNEG_TOL)
            && !out.iter().any(|y| y.iter().zip(&x).all(|(p, q)| S::approx_eq(p, q, MEMBERSHIP_EQ_TOL)))
        {
            out.push(x);
        }
    };
    if r == 0 {
        push(vec![S::zero(); n]);
        return Ok(out);
    }
    let mut basis: Vec<usize> = (0..r).collect();
    loop {
        if let Some(xb) = solve(&a.select_columns(&basis), &b) {
            let mut x = vec![S::zero(); n];
            for (k, &j) in basis.iter().enumerate() {
                x[j] = xb[k].clone();
            }
            push(x);
        }
        // Next r-combination in lexicographic order.
        let Some(pos) = (0..r).rev().find(|&i| basis[i] < n - r + i) else {
            break;
        };
        basis[pos] += 1;
        for i in pos + 1..r {
            basis[i] = basis[i - 1] + 1;
        }
    }
    Ok(out)
}

/// Converts a selection between scalar backends.
pub fn convert_selection<A: Scalar, B: Scalar>(sel: &TupleSelection<A>) -> TupleSelection<B> {
    let vv = |v: &[Vec<A>]| v.iter().map(|r| r.iter().map(convert).collect()).collect();
    TupleSelection {
        m: sel.m,
        minimal_depth: sel.minimal_depth,
        x: vv(&sel.x),
        y: vv(&sel.y),
        element_of: sel.element_of.clone(),
        pair_interface: sel.pair_interface.clone(),
        pair_normals: sel.pair_normals.clone(),
        node_blocks: sel.node_blocks.clone(),
        block_nodes: sel.block_nodes.clone(),
        t_bar: sel.t_bar.iter().map(convert).collect(),
        element_weights: sel.element_weights.iter().map(convert).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_unit_cube_triangulation;
    use crate::pwa::{random_map, PeriodicPwaMap};
    use crate::scalar::rat;
    use std::sync::Arc;

    fn mesh(r: u32) -> Arc<Triangulation> {
        Arc::new(build_unit_cube_triangulation(2, r).unwrap())
    }

    #[test]
    fn coarsest_mesh_selection() {
        // One node class and three interfaces, all between the two triangles:
        // 2^m >= 6 forces m = 3, slots cycle (0, 1, 2, 0), equal split 1/8.
        let tri = mesh(0);
        let map = PeriodicPwaMap::<Rational>::zero(tri.clone());
        let sel = select_tuples(&map.extract_measure(), &tri, None).unwrap();
        assert_eq!(sel.m, 3);
        assert_eq!(sel.minimal_depth, 3);
        assert_eq!(sel.pair_interface, vec![0, 1, 2, 0]);
        assert_eq!(sel.element_of, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        assert!(sel.t_bar.iter().all(|t| *t == rat(1, 8)));
        assert_eq!(sel.node_blocks, vec![(0..8).collect::<Vec<_>>()]);
    }

    #[test]
    fn depth_too_small_reports_minimum() {
        let tri = mesh(1);
        let map = random_map::<Rational>(tri.clone(), 3, 1);
        let err = select_tuples(&map.extract_measure(), &tri, Some(1)).unwrap_err();
        assert_eq!(err, ThetaError::DepthTooSmall { requested: 1, minimal: 6 });
    }

    #[test]
    fn identical_components_give_identical_tuples() {
        let tri = mesh(1);
        let base = random_map::<Rational>(tri.clone(), 3, 5);
        let u = base.component(0);
        let map = PeriodicPwaMap::from_components(tri.clone(), &u, &u).unwrap();
        let sel = select_tuples(&map.extract_measure(), &tri, None).unwrap();
        assert_eq!(sel.x, sel.y);
    }

    #[test]
    fn theta_rows_and_membership() {
        let tri = mesh(1);
        let map = random_map::<Rational>(tri.clone(), 3, 2);
        let measure = map.extract_measure();
        let sel = select_tuples(&measure, &tri, None).unwrap();
        let theta = build_theta(&sel).unwrap();
        assert_eq!(theta.equality_rows(), (1 << (sel.m - 1)) + measure.merged(0.0).len());
        assert!(theta.contains(&sel.t_bar));
        let mut bumped = sel.t_bar.clone();
        bumped[0] += rat(1, 1000);
        assert!(!theta.contains(&bumped));
        assert_eq!(theta.project(&sel.t_bar).unwrap(), sel.t_bar);
    }

    #[test]
    fn single_pair_vertices() {
        let sys = LinearSystem::new(Matrix::from_rows(&[vec![rat(1, 1), rat(1, 1)]]), vec![rat(1, 1)]);
        let v = enumerate_vertices(&sys).unwrap();
        assert_eq!(v, vec![vec![rat(1, 1), rat(0, 1)], vec![rat(0, 1), rat(1, 1)]]);
        let empty = LinearSystem::new(Matrix::from_rows(&[vec![rat(1, 1), rat(1, 1)]]), vec![rat(-1, 1)]);
        assert!(enumerate_vertices(&empty).unwrap().is_empty());
    }

    #[test]
    fn coarsest_mesh_vertices() {
        // Zero map on the two-triangle mesh: four pairs with sum 1/4 each and
        // one atom of mass 1, so the polytope is a product of four segments
        // with 2^4 vertices.
        let tri = mesh(0);
        let map = PeriodicPwaMap::<Rational>::zero(tri.clone());
        let sel = select_tuples(&map.extract_measure(), &tri, None).unwrap();
        let theta = build_theta(&sel).unwrap();
        let v = theta.enumerate_vertices().unwrap();
        assert_eq!(v.len(), 16);
        assert!(v.iter().all(|x| theta.contains(x)));
    }

    #[test]
    fn enumeration_cap() {
        let sys = LinearSystem::new(Matrix::from_rows(&[vec![1.0; 17]]), vec![1.0]);
        assert!(matches!(enumerate_vertices(&sys), Err(ThetaError::TooLarge { .. })));
    }

    #[test]
    fn json_round_trip() {
        let tri = mesh(1);
        let map = random_map::<Rational>(tri.clone(), 3, 9);
        let sel = select_tuples(&map.extract_measure(), &tri, None).unwrap();
        assert_eq!(TupleSelection::<Rational>::from_json(&sel.to_json()).unwrap(), sel);
    }
}
